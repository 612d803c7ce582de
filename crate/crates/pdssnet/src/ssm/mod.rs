//! Selective state-space scan kernel.
//!
//! The recurrence, per channel `d` and state component `n`:
//!
//! ```text
//! h[t] = a_bar[t] * h[t-1] + b_bar[t] * u[t]
//! y[t] = sum_n c[t] * h[t] + d_skip * u[t]
//! ```
//!
//! with zero-order-hold discretization `a_bar = exp(delta * a)` and either
//! the first-order step `b_bar = delta * b` (default) or the exact hold
//! `b_bar = (exp(delta*a) - 1)/a * b`. `A` is diagonal per channel; `B`/`C`
//! are per-step (selective) or static. The recurrence is affine in the
//! hidden state, which the chunked kernel exploits by composing per-chunk
//! affine maps `h -> alpha*h + beta`.

mod backward;
pub(crate) mod scan;
mod simstep;

pub use backward::{finite_diff_check, rel_err, scan_backward, scan_vjp, GradCheckReport, ScanGrads};
pub use scan::{selective_scan_chunked, selective_scan_seq};
pub use simstep::{
    cosine_state_similarity, simstep_modulate, simstep_scan, simstep_scan_online, SimStepTrace,
};

use crate::error::{PdssError, Result};
use crate::grid::Tensor;

/// `B`/`C` operands: one matrix shared by every step, or one per step.
#[derive(Clone, Debug)]
pub enum SeqOrStatic {
    /// `[D_ch, N_state]`
    Static(Tensor),
    /// `[L, D_ch, N_state]`
    PerStep(Tensor),
}

impl SeqOrStatic {
    pub fn tensor(&self) -> &Tensor {
        match self {
            SeqOrStatic::Static(t) | SeqOrStatic::PerStep(t) => t,
        }
    }

    pub fn is_per_step(&self) -> bool {
        matches!(self, SeqOrStatic::PerStep(_))
    }
}

/// How `b_bar` is formed from `(a, b, delta)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discretization {
    /// `b_bar = delta * b` (first-order hold, the default).
    Taylor,
    /// `b_bar = (exp(delta*a) - 1)/a * b` (exact hold).
    Exact,
}

/// Scan operands. `a: [D_ch, N_state]` (diagonal state matrix), `d: [D_ch]`
/// (skip), `delta: [L, D_ch]` (strictly positive step sizes).
#[derive(Clone, Debug)]
pub struct ScanParams {
    pub a: Tensor,
    pub b: SeqOrStatic,
    pub c: SeqOrStatic,
    pub d: Tensor,
    pub delta: Tensor,
    pub disc: Discretization,
}

/// Hidden state `[D_ch, N_state]` plus the number of steps consumed so far.
#[derive(Clone, Debug)]
pub struct ScanState {
    pub h: Tensor,
    pub step: usize,
}

impl ScanState {
    pub fn zero(d_ch: usize, n_state: usize) -> Self {
        ScanState {
            h: Tensor::zeros(&[d_ch, n_state]),
            step: 0,
        }
    }
}

/// Scan result: outputs `y [L, D_ch]`, the full state trajectory
/// `h_all [L, D_ch, N_state]` (`h_all[t]` is the state after consuming
/// `u[t]`), and the final state.
#[derive(Clone, Debug)]
pub struct ScanOutput {
    pub y: Tensor,
    pub h_all: Tensor,
    pub h_final: ScanState,
}

/// Similarity-driven step-size modulation parameters. When enabled, the step
/// size of token `t` becomes `delta * (1 + m_t)` with
/// `m_t = sigmoid(relu(w_s * s_t + b_s))` and `s_t` the cosine similarity
/// between the token's state increment direction `B_t u_t` and the previous
/// hidden state — so `m_t` always lies in `[0.5, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct SimStepParams {
    pub w_s: f64,
    pub b_s: f64,
    pub enabled: bool,
}

/// Cosine guard: fibers with norm below this are treated as zero-similarity.
pub const SIM_EPS: f64 = 1e-8;

impl ScanParams {
    /// Validate operand ranks/extents against a sequence length and return
    /// `(l, d_ch, n_state)`. `checked` additionally enforces decay
    /// (`a <= 0`); `delta > 0` is always enforced.
    pub fn validate(&self, l: usize, checked: bool) -> Result<(usize, usize, usize)> {
        if self.a.rank() != 2 {
            return Err(PdssError::ShapeMismatch(format!(
                "a must be [D_ch, N_state], got {:?}",
                self.a.shape()
            )));
        }
        let (d_ch, n_state) = (self.a.shape()[0], self.a.shape()[1]);
        for (name, op) in [("b", &self.b), ("c", &self.c)] {
            let want: &[usize] = match op {
                SeqOrStatic::Static(t) => {
                    if t.shape() != [d_ch, n_state] {
                        return Err(PdssError::ShapeMismatch(format!(
                            "{name} static shape {:?}, want [{d_ch}, {n_state}]",
                            t.shape()
                        )));
                    }
                    continue;
                }
                SeqOrStatic::PerStep(t) => t.shape(),
            };
            if want != [l, d_ch, n_state] {
                return Err(PdssError::ShapeMismatch(format!(
                    "{name} per-step shape {want:?}, want [{l}, {d_ch}, {n_state}]"
                )));
            }
        }
        if self.b.is_per_step() != self.c.is_per_step() {
            return Err(PdssError::InvalidArgument(
                "b and c must both be static or both per-step".into(),
            ));
        }
        if self.d.shape() != [d_ch] {
            return Err(PdssError::ShapeMismatch(format!(
                "d shape {:?}, want [{d_ch}]",
                self.d.shape()
            )));
        }
        if self.delta.shape() != [l, d_ch] {
            return Err(PdssError::ShapeMismatch(format!(
                "delta shape {:?}, want [{l}, {d_ch}]",
                self.delta.shape()
            )));
        }
        if self.delta.data().iter().any(|&v| v <= 0.0) {
            return Err(PdssError::InvalidArgument(
                "delta entries must be strictly positive".into(),
            ));
        }
        if checked && self.a.data().iter().any(|&v| v > 0.0) {
            return Err(PdssError::InvalidArgument(
                "checked mode requires a <= 0 (decay)".into(),
            ));
        }
        Ok((l, d_ch, n_state))
    }
}

/// Zero-order-hold discretization of a scalar channel, first-order step:
/// `(a_bar, b_bar) = (exp(delta*a), delta*b)`.
pub fn discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta <= 0.0 {
        return Err(PdssError::InvalidArgument(format!(
            "discretize needs delta > 0, got {delta}"
        )));
    }
    Ok(((delta * a).exp(), delta * b))
}

/// Exact zero-order hold: `b_bar = (exp(delta*a) - 1)/a * b`, with the
/// `a -> 0` limit `delta * b` handled by series expansion.
pub fn discretize_exact(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta <= 0.0 {
        return Err(PdssError::InvalidArgument(format!(
            "discretize needs delta > 0, got {delta}"
        )));
    }
    Ok(((delta * a).exp(), zoh_phi(a, delta) * b))
}

/// `phi(a, delta) = (exp(delta*a) - 1)/a`, the exact-hold input weight
/// (excluding `b`), stable through `a = 0`.
pub(crate) fn zoh_phi(a: f64, delta: f64) -> f64 {
    if a.abs() > 1e-8 {
        (delta * a).exp_m1() / a
    } else {
        delta * (1.0 + 0.5 * delta * a + delta * delta * a * a / 6.0)
    }
}

/// Partial derivatives of `phi` w.r.t. `delta` and `a`.
pub(crate) fn zoh_phi_partials(a: f64, delta: f64) -> (f64, f64) {
    let d_delta = (delta * a).exp();
    let d_a = if a.abs() > 1e-6 {
        (delta * a * (delta * a).exp() - (delta * a).exp_m1()) / (a * a)
    } else {
        0.5 * delta * delta + delta * delta * delta * a / 3.0
    };
    (d_delta, d_a)
}
