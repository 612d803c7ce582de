//! Similarity-modulated step sizes.
//!
//! For token `t` and channel `d`, the similarity `s` is the cosine between
//! the token's state increment direction `B_t * u_t` (per channel, a vector
//! over state components) and the previous hidden state `h_{t-1}`. The
//! modulation gain is `m = sigmoid(relu(w_s * s + b_s))`, so `m` lies in
//! `[0.5, 1)` and the effective step is `delta * (1 + m)`.
//!
//! The default scheme is two-pass: pass 1 runs the base scan and caches the
//! whole state trajectory; pass 2 computes every `s_t` from the cached
//! states and reruns the scan with the modulated steps. A strictly-online
//! single-pass variant (similarity taken against the modulated state as it
//! evolves) is provided for comparison; the two coincide at `L = 1`.

use super::{
    selective_scan_seq, ScanOutput, ScanParams, ScanState, SeqOrStatic, SimStepParams, SIM_EPS,
};
use crate::error::Result;
use crate::grid::Tensor;

/// Cosine similarity between two state-space vectors; returns 0 when either
/// norm falls below `eps`, so the function is total.
pub fn cosine_state_similarity(bu: &[f64], h_prev: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(bu.len(), h_prev.len());
    debug_assert!(eps > 0.0);
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in bu.iter().zip(h_prev) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < eps || nb < eps {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Modulated step size `delta * (1 + sigmoid(relu(w_s*s + b_s)))`; identity
/// when disabled.
pub fn simstep_modulate(delta_t: f64, s_t: f64, sp: &SimStepParams) -> f64 {
    debug_assert!(delta_t > 0.0);
    if !sp.enabled {
        return delta_t;
    }
    delta_t * (1.0 + gain(sp.w_s * s_t + sp.b_s))
}

#[inline]
fn gain(z: f64) -> f64 {
    let r = z.max(0.0);
    1.0 / (1.0 + (-r).exp())
}

/// Per-token modulation record: similarities `s` and gains `m`, both
/// `[L, D_ch]`.
#[derive(Clone, Debug)]
pub struct SimStepTrace {
    pub s: Tensor,
    pub m: Tensor,
}

fn b_row<'a>(p: &'a ScanParams, t: usize, d: usize, n_state: usize) -> &'a [f64] {
    let dn = p.a.numel();
    let base = match &p.b {
        SeqOrStatic::Static(_) => d * n_state,
        SeqOrStatic::PerStep(_) => t * dn + d * n_state,
    };
    &p.b.tensor().data()[base..base + n_state]
}

/// Two-pass similarity-modulated scan. Disabled parameters return the base
/// scan bit-identically (pass 2 never runs) and no trace.
pub fn simstep_scan(
    p: &ScanParams,
    u: &Tensor,
    h0: &ScanState,
    sp: &SimStepParams,
) -> Result<(ScanOutput, Option<SimStepTrace>)> {
    let base = selective_scan_seq(p, u, h0)?;
    if !sp.enabled {
        return Ok((base, None));
    }
    let l = u.shape()[0];
    let d_ch = u.shape()[1];
    let n_state = p.a.shape()[1];
    let mut s = vec![0.0; l * d_ch];
    let mut m = vec![0.0; l * d_ch];
    let mut delta2 = vec![0.0; l * d_ch];
    for t in 0..l {
        for d in 0..d_ch {
            let ud = u.at(&[t, d]);
            let bu: Vec<f64> = b_row(p, t, d, n_state).iter().map(|&b| b * ud).collect();
            let hprev_owner;
            let hprev: &[f64] = if t == 0 {
                &h0.h.data()[d * n_state..(d + 1) * n_state]
            } else {
                hprev_owner =
                    &base.h_all.data()[(t - 1) * d_ch * n_state + d * n_state..][..n_state];
                hprev_owner
            };
            let sv = cosine_state_similarity(&bu, hprev, SIM_EPS);
            let mv = gain(sp.w_s * sv + sp.b_s);
            s[t * d_ch + d] = sv;
            m[t * d_ch + d] = mv;
            delta2[t * d_ch + d] = p.delta.at(&[t, d]) * (1.0 + mv);
        }
    }
    let p2 = ScanParams {
        delta: Tensor::new_unchecked(vec![l, d_ch], delta2),
        ..p.clone()
    };
    let out = selective_scan_seq(&p2, u, h0)?;
    Ok((
        out,
        Some(SimStepTrace {
            s: Tensor::new_unchecked(vec![l, d_ch], s),
            m: Tensor::new_unchecked(vec![l, d_ch], m),
        }),
    ))
}

/// Strictly-online variant: each token's similarity is computed against the
/// hidden state of the *modulated* recurrence as it evolves.
pub fn simstep_scan_online(
    p: &ScanParams,
    u: &Tensor,
    h0: &ScanState,
    sp: &SimStepParams,
) -> Result<(ScanOutput, SimStepTrace)> {
    use super::scan::validate_scan_inputs;
    use super::{zoh_phi, Discretization};
    let (l, d_ch, n_state) = validate_scan_inputs(p, u, h0)?;
    let dn = d_ch * n_state;
    let exact = p.disc == Discretization::Exact;
    let cdat = p.c.tensor().data();
    let cstride = if p.c.is_per_step() { dn } else { 0 };
    let mut h = h0.h.data().to_vec();
    let mut y = vec![0.0; l * d_ch];
    let mut h_all = vec![0.0; l * dn];
    let mut s = vec![0.0; l * d_ch];
    let mut m = vec![0.0; l * d_ch];
    for t in 0..l {
        for d in 0..d_ch {
            let ud = u.at(&[t, d]);
            let brow = b_row(p, t, d, n_state);
            let bu: Vec<f64> = brow.iter().map(|&b| b * ud).collect();
            let sv = cosine_state_similarity(&bu, &h[d * n_state..(d + 1) * n_state], SIM_EPS);
            let mv = if sp.enabled { gain(sp.w_s * sv + sp.b_s) } else { 0.0 };
            let dt = p.delta.at(&[t, d]) * if sp.enabled { 1.0 + mv } else { 1.0 };
            s[t * d_ch + d] = sv;
            m[t * d_ch + d] = mv;
            let mut acc = p.d.at(&[d]) * ud;
            for n in 0..n_state {
                let i = d * n_state + n;
                let av = p.a.at(&[d, n]);
                let abar = (dt * av).exp();
                let phi = if exact { zoh_phi(av, dt) } else { dt };
                let hv = abar * h[i] + phi * brow[n] * ud;
                h[i] = hv;
                h_all[t * dn + i] = hv;
                acc += cdat[t * cstride + i] * hv;
            }
            y[t * d_ch + d] = acc;
        }
    }
    Ok((
        ScanOutput {
            y: Tensor::new_unchecked(vec![l, d_ch], y),
            h_all: Tensor::new_unchecked(vec![l, d_ch, n_state], h_all),
            h_final: ScanState {
                h: Tensor::new_unchecked(vec![d_ch, n_state], h[..].to_vec()),
                step: h0.step + l,
            },
        },
        SimStepTrace {
            s: Tensor::new_unchecked(vec![l, d_ch], s),
            m: Tensor::new_unchecked(vec![l, d_ch], m),
        },
    ))
}
