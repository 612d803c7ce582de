//! Reverse-mode gradients for the scan kernel, plus finite-difference
//! checking utilities.
//!
//! The forward recurrence per channel `d` and state component `n` is
//!
//! ```text
//! abar = exp(delta * a)          phi = delta            (first-order)
//!                                phi = expm1(delta*a)/a (exact hold)
//! h[t] = abar * h[t-1] + phi * b_t * u_t
//! y[t] = d_skip * u_t + sum_n c_t * h[t]
//! ```
//!
//! The adjoint walks `t` backwards carrying `ghat`, the gradient flowing
//! into `h[t]` from steps after `t`. Every operand gradient falls out of
//! the product rule on the two terms above:
//!
//! ```text
//! g        = ghat + dy_t * c_t + dh_all[t] + [t = L-1] dh_final
//! d a      += g * h[t-1] * abar * delta   (+ exact-hold phi term)
//! d delta  += g * h[t-1] * abar * a + g * b_t * u_t * dphi/ddelta
//! d b_t    += g * phi * u_t
//! d u_t    += g * phi * b_t + dy_t * d_skip
//! d c_t    += dy_t * h[t]
//! d d_skip += dy_t * u_t
//! ghat     <- g * abar            (into h[t-1])
//! ```
//!
//! and `dh0 = ghat` after the `t = 0` step.

use super::scan::validate_scan_inputs;
use super::{
    selective_scan_seq, zoh_phi, zoh_phi_partials, Discretization, ScanOutput, ScanParams,
    ScanState, SeqOrStatic,
};
use crate::error::{PdssError, Result};
use crate::grid::Tensor;

/// Gradients of a scalar loss w.r.t. every scan operand. `db`/`dc` carry the
/// same static/per-step mode as the forward operands.
#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub du: Tensor,
    pub da: Tensor,
    pub db: SeqOrStatic,
    pub dc: SeqOrStatic,
    pub dd: Tensor,
    pub ddelta: Tensor,
    pub dh0: Tensor,
}

fn check_grad_shape(name: &str, got: &Tensor, want: &[usize]) -> Result<()> {
    if got.shape() != want {
        return Err(PdssError::ShapeMismatch(format!(
            "{name} upstream gradient shape {:?}, want {want:?}",
            got.shape()
        )));
    }
    Ok(())
}

/// Vector-Jacobian product of the scan. `fwd` must be the output of the
/// forward scan on exactly `(p, u, h0)`; the cached state trajectory is what
/// makes a single reverse sweep sufficient. Any subset of upstream
/// gradients (`dy` for the outputs, `dh_all` for the whole trajectory,
/// `dh_final` for the final state) may be supplied; absent ones are zero.
pub fn scan_vjp(
    p: &ScanParams,
    u: &Tensor,
    h0: &ScanState,
    fwd: &ScanOutput,
    dy: Option<&Tensor>,
    dh_all: Option<&Tensor>,
    dh_final: Option<&Tensor>,
) -> Result<ScanGrads> {
    let (l, d_ch, n_state) = validate_scan_inputs(p, u, h0)?;
    let dn = d_ch * n_state;
    if fwd.h_all.shape() != [l, d_ch, n_state] {
        return Err(PdssError::ShapeMismatch(format!(
            "forward trajectory shape {:?}, want [{l}, {d_ch}, {n_state}]",
            fwd.h_all.shape()
        )));
    }
    if let Some(g) = dy {
        check_grad_shape("y", g, &[l, d_ch])?;
    }
    if let Some(g) = dh_all {
        check_grad_shape("h_all", g, &[l, d_ch, n_state])?;
    }
    if let Some(g) = dh_final {
        check_grad_shape("h_final", g, &[d_ch, n_state])?;
    }

    let exact = p.disc == Discretization::Exact;
    let a = p.a.data();
    let b = p.b.tensor().data();
    let c = p.c.tensor().data();
    let bs = if p.b.is_per_step() { dn } else { 0 };
    let cs = if p.c.is_per_step() { dn } else { 0 };
    let d_skip = p.d.data();
    let delta = p.delta.data();
    let ud_all = u.data();
    let h_all = fwd.h_all.data();
    let h0d = h0.h.data();

    let mut ghat = vec![0.0; dn];
    let mut du = vec![0.0; l * d_ch];
    let mut da = vec![0.0; dn];
    let mut db = vec![0.0; b.len()];
    let mut dc = vec![0.0; c.len()];
    let mut dd = vec![0.0; d_ch];
    let mut ddelta = vec![0.0; l * d_ch];

    for t in (0..l).rev() {
        let bt = &b[t * bs..t * bs + dn];
        let ct = &c[t * cs..t * cs + dn];
        for d in 0..d_ch {
            let dt = delta[t * d_ch + d];
            let ut = ud_all[t * d_ch + d];
            let gy = dy.map_or(0.0, |g| g.data()[t * d_ch + d]);
            dd[d] += gy * ut;
            let mut du_acc = gy * d_skip[d];
            let mut ddt_acc = 0.0;
            for n in 0..n_state {
                let i = d * n_state + n;
                let hv = h_all[t * dn + i];
                let h_prev = if t == 0 { h0d[i] } else { h_all[(t - 1) * dn + i] };
                let mut g = ghat[i] + gy * ct[i];
                if let Some(gh) = dh_all {
                    g += gh.data()[t * dn + i];
                }
                if t == l - 1 {
                    if let Some(gf) = dh_final {
                        g += gf.data()[i];
                    }
                }
                dc[t * cs + i] += gy * hv;
                let av = a[i];
                let abar = (dt * av).exp();
                // recurrence term abar * h_prev
                let g_abar = g * h_prev;
                da[i] += g_abar * abar * dt;
                ddt_acc += g_abar * abar * av;
                // input term phi * b * u
                let (phi, phi_ddt, phi_da) = if exact {
                    let (pd, pa) = zoh_phi_partials(av, dt);
                    (zoh_phi(av, dt), pd, pa)
                } else {
                    (dt, 1.0, 0.0)
                };
                let g_phi = g * bt[i] * ut;
                ddt_acc += g_phi * phi_ddt;
                da[i] += g_phi * phi_da;
                db[t * bs + i] += g * phi * ut;
                du_acc += g * phi * bt[i];
                ghat[i] = g * abar;
            }
            du[t * d_ch + d] = du_acc;
            ddelta[t * d_ch + d] = ddt_acc;
        }
    }

    let wrap = |per_step: bool, v: Vec<f64>| {
        if per_step {
            SeqOrStatic::PerStep(Tensor::new_unchecked(vec![l, d_ch, n_state], v))
        } else {
            SeqOrStatic::Static(Tensor::new_unchecked(vec![d_ch, n_state], v))
        }
    };
    Ok(ScanGrads {
        du: Tensor::new_unchecked(vec![l, d_ch], du),
        da: Tensor::new_unchecked(vec![d_ch, n_state], da),
        db: wrap(p.b.is_per_step(), db),
        dc: wrap(p.c.is_per_step(), dc),
        dd: Tensor::new_unchecked(vec![d_ch], dd),
        ddelta: Tensor::new_unchecked(vec![l, d_ch], ddelta),
        dh0: Tensor::new_unchecked(vec![d_ch, n_state], ghat),
    })
}

/// Forward scan followed by the VJP for an output-gradient `dy`.
pub fn scan_backward(
    p: &ScanParams,
    u: &Tensor,
    h0: &ScanState,
    dy: &Tensor,
) -> Result<(ScanOutput, ScanGrads)> {
    let fwd = selective_scan_seq(p, u, h0)?;
    let grads = scan_vjp(p, u, h0, &fwd, Some(dy), None, None)?;
    Ok((fwd, grads))
}

/// `|analytic - numeric|` scaled by the larger magnitude, floored at `1e-6`
/// so near-zero pairs compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference comparison of an analytic gradient.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub numeric: Tensor,
    pub analytic: Tensor,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare `analytic` against central finite differences of `f` around
/// `x0`, coordinate by coordinate.
pub fn finite_diff_check<F: FnMut(&Tensor) -> f64>(
    mut f: F,
    x0: &Tensor,
    step: f64,
    analytic: &Tensor,
) -> GradCheckReport {
    assert_eq!(
        x0.shape(),
        analytic.shape(),
        "analytic gradient shape must match the probed point"
    );
    assert!(step > 0.0);
    let mut numeric = vec![0.0; x0.numel()];
    let mut probe = x0.clone();
    for i in 0..x0.numel() {
        let orig = x0.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * step);
    }
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&av, &nv)) in analytic.data().iter().zip(&numeric).enumerate() {
        let e = rel_err(av, nv);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
        }
    }
    GradCheckReport {
        numeric: Tensor::new_unchecked(x0.shape().to_vec(), numeric),
        analytic: analytic.clone(),
        max_rel_error,
        worst_index,
    }
}

#[cfg(test)]
mod tests {
    use super::super::scan::test_support::random_params;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Scalar probe loss: fixed random weights against y, h_all and h_final.
    fn scalar_loss(
        p: &ScanParams,
        u: &Tensor,
        h0: &ScanState,
        wy: &Tensor,
        wall: &Tensor,
        wfin: &Tensor,
    ) -> f64 {
        let out = selective_scan_seq(p, u, h0).unwrap();
        dot(&out.y, wy) + dot(&out.h_all, wall) + dot(&out.h_final.h, wfin)
    }

    fn check_all_operands(seed: u64, per_step: bool, disc: Discretization) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d_ch, n_state) = (7, 2, 3);
        let (p, u, h0) = random_params(&mut rng, l, d_ch, n_state, per_step, disc);
        let wy = Tensor::uniform(&[l, d_ch], &mut rng, -1.0, 1.0);
        let wall = Tensor::uniform(&[l, d_ch, n_state], &mut rng, -1.0, 1.0);
        let wfin = Tensor::uniform(&[d_ch, n_state], &mut rng, -1.0, 1.0);

        let fwd = selective_scan_seq(&p, &u, &h0).unwrap();
        let g = scan_vjp(&p, &u, &h0, &fwd, Some(&wy), Some(&wall), Some(&wfin)).unwrap();

        // Step and tolerance sized for central-difference roundoff:
        // coordinates near the 1e-6 floor see absolute fd noise around
        // eps*|loss|/step, which a tighter tolerance would false-flag.
        let step = 5e-5;
        let tol = 1e-5;
        let ctx = |op: &str| format!("seed={seed} per_step={per_step} disc={disc:?} operand={op}");

        let r = finite_diff_check(
            |x| scalar_loss(&p, x, &h0, &wy, &wall, &wfin),
            &u,
            step,
            &g.du,
        );
        assert!(r.passes(tol), "{}: {}", ctx("u"), r.max_rel_error);

        let r = finite_diff_check(
            |x| {
                let q = ScanParams { a: x.clone(), ..p.clone() };
                scalar_loss(&q, &u, &h0, &wy, &wall, &wfin)
            },
            &p.a,
            step,
            &g.da,
        );
        assert!(r.passes(tol), "{}: {}", ctx("a"), r.max_rel_error);

        let wrap = |x: &Tensor| {
            if per_step {
                SeqOrStatic::PerStep(x.clone())
            } else {
                SeqOrStatic::Static(x.clone())
            }
        };
        let r = finite_diff_check(
            |x| {
                let q = ScanParams { b: wrap(x), ..p.clone() };
                scalar_loss(&q, &u, &h0, &wy, &wall, &wfin)
            },
            p.b.tensor(),
            step,
            g.db.tensor(),
        );
        assert!(r.passes(tol), "{}: {}", ctx("b"), r.max_rel_error);

        let r = finite_diff_check(
            |x| {
                let q = ScanParams { c: wrap(x), ..p.clone() };
                scalar_loss(&q, &u, &h0, &wy, &wall, &wfin)
            },
            p.c.tensor(),
            step,
            g.dc.tensor(),
        );
        assert!(r.passes(tol), "{}: {}", ctx("c"), r.max_rel_error);

        let r = finite_diff_check(
            |x| {
                let q = ScanParams { d: x.clone(), ..p.clone() };
                scalar_loss(&q, &u, &h0, &wy, &wall, &wfin)
            },
            &p.d,
            step,
            &g.dd,
        );
        assert!(r.passes(tol), "{}: {}", ctx("d"), r.max_rel_error);

        let r = finite_diff_check(
            |x| {
                let q = ScanParams { delta: x.clone(), ..p.clone() };
                scalar_loss(&q, &u, &h0, &wy, &wall, &wfin)
            },
            &p.delta,
            step,
            &g.ddelta,
        );
        assert!(r.passes(tol), "{}: {}", ctx("delta"), r.max_rel_error);

        let r = finite_diff_check(
            |x| {
                let s = ScanState { h: x.clone(), step: h0.step };
                scalar_loss(&p, &u, &s, &wy, &wall, &wfin)
            },
            &h0.h,
            step,
            &g.dh0,
        );
        assert!(r.passes(tol), "{}: {}", ctx("h0"), r.max_rel_error);
    }

    #[test]
    fn gradients_match_finite_differences_taylor_static() {
        for seed in 0..3 {
            check_all_operands(seed, false, Discretization::Taylor);
        }
    }

    #[test]
    fn gradients_match_finite_differences_taylor_per_step() {
        for seed in 10..13 {
            check_all_operands(seed, true, Discretization::Taylor);
        }
    }

    #[test]
    fn gradients_match_finite_differences_exact_static() {
        for seed in 20..23 {
            check_all_operands(seed, false, Discretization::Exact);
        }
    }

    #[test]
    fn gradients_match_finite_differences_exact_per_step() {
        for seed in 30..33 {
            check_all_operands(seed, true, Discretization::Exact);
        }
    }

    #[test]
    fn skip_path_passes_output_gradient_through() {
        // c = 0 and d_skip = 1 make y == u, so du must equal dy bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut p, u, h0) = random_params(&mut rng, 9, 3, 2, false, Discretization::Taylor);
        p.c = SeqOrStatic::Static(Tensor::zeros(&[3, 2]));
        p.d = Tensor::full(&[3], 1.0);
        let dy = Tensor::uniform(&[9, 3], &mut rng, -1.0, 1.0);
        let (fwd, g) = scan_backward(&p, &u, &h0, &dy).unwrap();
        assert!(fwd.y.bits_eq(&u));
        assert!(g.du.bits_eq(&dy));
        assert!(g.da.data().iter().all(|&v| v == 0.0));
        assert!(g.db.tensor().data().iter().all(|&v| v == 0.0));
        assert!(g.ddelta.data().iter().all(|&v| v == 0.0));
        assert!(g.dh0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, u, h0) = random_params(&mut rng, 6, 2, 2, true, Discretization::Exact);
        let fwd = selective_scan_seq(&p, &u, &h0).unwrap();
        let g = scan_vjp(&p, &u, &h0, &fwd, None, None, None).unwrap();
        for t in [&g.du, &g.da, g.db.tensor(), g.dc.tensor(), &g.dd, &g.ddelta, &g.dh0] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn du_is_exact_for_the_linear_map() {
        // With every operand but u frozen the scan is linear in u, so the
        // first-order prediction du . step must match the true loss change
        // to rounding error.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (p, u, h0) = random_params(&mut rng, 8, 2, 3, false, Discretization::Taylor);
        let wy = Tensor::uniform(&[8, 2], &mut rng, -1.0, 1.0);
        let (_, g) = scan_backward(&p, &u, &h0, &wy).unwrap();
        let du_step = Tensor::uniform(&[8, 2], &mut rng, -1.0, 1.0);
        let loss = |x: &Tensor| {
            let out = selective_scan_seq(&p, x, &h0).unwrap();
            out.y.data().iter().zip(wy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let moved = u.zip_map(&du_step, |a, b| a + b).unwrap();
        let predicted = g.du.data().iter().zip(du_step.data()).map(|(a, b)| a * b).sum::<f64>();
        let actual = loss(&moved) - loss(&u);
        assert!((predicted - actual).abs() < 1e-10, "{predicted} vs {actual}");
    }

    #[test]
    fn vjp_rejects_bad_upstream_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, u, h0) = random_params(&mut rng, 4, 2, 2, false, Discretization::Taylor);
        let fwd = selective_scan_seq(&p, &u, &h0).unwrap();
        let bad = Tensor::zeros(&[4, 3]);
        assert!(scan_vjp(&p, &u, &h0, &fwd, Some(&bad), None, None).is_err());
        let bad_fin = Tensor::zeros(&[2, 3]);
        assert!(scan_vjp(&p, &u, &h0, &fwd, None, None, Some(&bad_fin)).is_err());
    }

    #[test]
    fn finite_diff_harness_matches_simple_polynomial() {
        // f(x) = x0^2 + 3*x1 around (3, -1): gradient (6, 3).
        let x0 = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        let analytic = Tensor::new(vec![2], vec![6.0, 3.0]).unwrap();
        let r = finite_diff_check(
            |x| x.data()[0] * x.data()[0] + 3.0 * x.data()[1],
            &x0,
            1e-5,
            &analytic,
        );
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert!((r.numeric.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floors_tiny_magnitudes() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        // absolute comparison below the floor
        assert!((rel_err(1e-9, 2e-9) - 1e-3).abs() < 1e-12);
        // plain relative error above it
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
