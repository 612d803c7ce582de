//! The selective scan as a single tape operation, plus the two-pass
//! similarity-modulated scan assembled from tape primitives.
//!
//! The recurrence is recorded as one op with three outputs (per-token
//! outputs, the state trajectory, the final state); its pullback is the
//! hand-derived reverse sweep from [`crate::ssm::scan_vjp`]. The forward
//! pass runs the chunked kernel, whose arithmetic is independent of thread
//! count, so recorded values never depend on parallelism.

use super::{Tape, VarId};
use crate::error::{PdssError, Result};
use crate::grid::Tensor;
use crate::ssm::{
    scan_vjp, selective_scan_chunked, Discretization, ScanOutput, ScanParams, ScanState,
    SeqOrStatic,
};

/// Configuration of a recorded scan: discretization rule and chunk length
/// for the forward kernel.
#[derive(Clone, Copy, Debug)]
pub struct ScanSpec {
    pub disc: Discretization,
    pub chunk: usize,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec {
            disc: Discretization::Taylor,
            chunk: 64,
        }
    }
}

/// The three results of a recorded scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanOutputsVar {
    /// Per-token outputs `[L, D_ch]`.
    pub y: VarId,
    /// State trajectory `[L, D_ch, N_state]` (state after each token).
    pub h_all: VarId,
    /// Final state `[D_ch, N_state]`.
    pub h_final: VarId,
}

fn wrap_operand(t: &Tensor, name: &str) -> Result<SeqOrStatic> {
    match t.rank() {
        2 => Ok(SeqOrStatic::Static(t.clone())),
        3 => Ok(SeqOrStatic::PerStep(t.clone())),
        r => Err(PdssError::ShapeMismatch(format!(
            "scan operand {name} must be rank 2 (static) or 3 (per-step), got rank {r}"
        ))),
    }
}

fn params_from_values(
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    delta: &Tensor,
    disc: Discretization,
) -> Result<ScanParams> {
    Ok(ScanParams {
        a: a.clone(),
        b: wrap_operand(b, "b")?,
        c: wrap_operand(c, "c")?,
        d: d.clone(),
        delta: delta.clone(),
        disc,
    })
}

impl Tape {
    /// Record a selective scan over `u [L, D_ch]` with diagonal state matrix
    /// `a [D_ch, N_state]`, input/output projections `b`/`c` (each either
    /// `[D_ch, N_state]` shared across tokens or `[L, D_ch, N_state]`
    /// per-token), skip gains `d [D_ch]`, step sizes `delta [L, D_ch]`, and
    /// initial state `h0 [D_ch, N_state]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        a: VarId,
        b: VarId,
        c: VarId,
        d: VarId,
        delta: VarId,
        u: VarId,
        h0: VarId,
        spec: ScanSpec,
    ) -> Result<ScanOutputsVar> {
        let params = params_from_values(
            self.val(a),
            self.val(b),
            self.val(c),
            self.val(d),
            self.val(delta),
            spec.disc,
        )?;
        let h0_state = ScanState {
            h: self.val(h0).clone(),
            step: 0,
        };
        let fwd = selective_scan_chunked(&params, self.val(u), &h0_state, spec.chunk)?;
        let disc = spec.disc;
        let ids = self.record(
            &[a, b, c, d, delta, u, h0],
            vec![fwd.y, fwd.h_all, fwd.h_final.h],
            Box::new(move |ins, outs, gs| {
                let params = params_from_values(ins[0], ins[1], ins[2], ins[3], ins[4], disc)
                    .expect("operand shapes were validated at record time");
                let l = ins[5].shape()[0];
                let h0_state = ScanState {
                    h: ins[6].clone(),
                    step: 0,
                };
                let fwd = ScanOutput {
                    y: outs[0].clone(),
                    h_all: outs[1].clone(),
                    h_final: ScanState {
                        h: outs[2].clone(),
                        step: l,
                    },
                };
                let grads = scan_vjp(&params, ins[5], &h0_state, &fwd, gs[0], gs[1], gs[2])
                    .expect("pullback shapes match the recorded forward pass");
                vec![
                    Some(grads.da),
                    Some(grads.db.tensor().clone()),
                    Some(grads.dc.tensor().clone()),
                    Some(grads.dd),
                    Some(grads.ddelta),
                    Some(grads.du),
                    Some(grads.dh0),
                ]
            }),
        );
        Ok(ScanOutputsVar {
            y: ids[0],
            h_all: ids[1],
            h_final: ids[2],
        })
    }

    /// Two-pass similarity-modulated scan on the tape. A base scan caches
    /// the state trajectory; each token's step size is then rescaled by
    /// `1 + sigmoid(relu(w_s * s + b_s))` where `s` is the cosine between
    /// the token's state increment direction `b_t * u_t` and the state the
    /// token saw, and the scan reruns with the modulated steps. `b` must be
    /// per-token (`[L, D_ch, N_state]`) since the increment direction is
    /// token-dependent; `w_s`/`b_s` are rank-0 vars.
    #[allow(clippy::too_many_arguments)]
    pub fn simstep_selective_scan(
        &mut self,
        a: VarId,
        b: VarId,
        c: VarId,
        d: VarId,
        delta: VarId,
        u: VarId,
        h0: VarId,
        w_s: VarId,
        b_s: VarId,
        spec: ScanSpec,
    ) -> Result<ScanOutputsVar> {
        if self.val(b).rank() != 3 {
            return Err(PdssError::InvalidArgument(
                "similarity modulation needs a per-token b operand [L, D_ch, N_state]".into(),
            ));
        }
        let base = self.selective_scan(a, b, c, d, delta, u, h0, spec)?;
        let prev = self.shift_states(base.h_all, h0)?;
        let bu = self.mul_state_bcast(b, u)?;
        let s = self.cosine_over_state(bu, prev)?;
        let scaled = self.scale_by_scalar_var(s, w_s)?;
        let pre = self.add_scalar_var(scaled, b_s)?;
        let gate = self.relu(pre);
        let m = self.sigmoid(gate);
        let one_plus_m = self.add_scalar(m, 1.0);
        let delta2 = self.mul(delta, one_plus_m)?;
        self.selective_scan(a, b, c, d, delta2, u, h0, spec)
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::check_leaf;
    use super::*;
    use crate::ssm::scan::test_support::random_params;
    use crate::ssm::{simstep_scan, SimStepParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Push every scan operand onto a tape as a leaf and return the ids in
    /// `selective_scan` argument order.
    fn leaves(tape: &mut Tape, p: &ScanParams, u: &Tensor, h0: &ScanState) -> [VarId; 7] {
        [
            tape.var(p.a.clone()),
            tape.var(p.b.tensor().clone()),
            tape.var(p.c.tensor().clone()),
            tape.var(p.d.clone()),
            tape.var(p.delta.clone()),
            tape.var(u.clone()),
            tape.var(h0.h.clone()),
        ]
    }

    #[test]
    fn recorded_scan_reproduces_kernel_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for (per_step, disc) in [
            (false, Discretization::Taylor),
            (true, Discretization::Taylor),
            (true, Discretization::Exact),
        ] {
            let (p, u, h0) = random_params(&mut rng, 12, 3, 4, per_step, disc);
            let spec = ScanSpec { disc, chunk: 5 };
            let want = selective_scan_chunked(&p, &u, &h0, 5).unwrap();
            let mut tape = Tape::new();
            let [a, b, c, d, delta, uv, h0v] = leaves(&mut tape, &p, &u, &h0);
            let out = tape.selective_scan(a, b, c, d, delta, uv, h0v, spec).unwrap();
            assert!(tape.val(out.y).bits_eq(&want.y));
            assert!(tape.val(out.h_all).bits_eq(&want.h_all));
            assert!(tape.val(out.h_final).bits_eq(&want.h_final.h));
        }
    }

    #[test]
    fn recorded_scan_pullback_matches_direct_reverse_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (per_step, disc) in [
            (false, Discretization::Taylor),
            (true, Discretization::Exact),
        ] {
            let (p, u, h0) = random_params(&mut rng, 10, 2, 3, per_step, disc);
            let wy = Tensor::uniform(&[10, 2], &mut rng, -1.0, 1.0);
            let wall = Tensor::uniform(&[10, 2, 3], &mut rng, -1.0, 1.0);
            let wfin = Tensor::uniform(&[2, 3], &mut rng, -1.0, 1.0);
            let spec = ScanSpec { disc, chunk: 4 };

            let mut tape = Tape::new();
            let vars = leaves(&mut tape, &p, &u, &h0);
            let [a, b, c, d, delta, uv, h0v] = vars;
            let out = tape.selective_scan(a, b, c, d, delta, uv, h0v, spec).unwrap();
            let l1 = tape.weighted_sum(out.y, &wy).unwrap();
            let l2 = tape.weighted_sum(out.h_all, &wall).unwrap();
            let l3 = tape.weighted_sum(out.h_final, &wfin).unwrap();
            let l12 = tape.add(l1, l2).unwrap();
            let loss = tape.add(l12, l3).unwrap();
            let g = tape.backward(loss).unwrap();

            let fwd = selective_scan_chunked(&p, &u, &h0, 4).unwrap();
            let direct =
                scan_vjp(&p, &u, &h0, &fwd, Some(&wy), Some(&wall), Some(&wfin)).unwrap();
            assert!(g.get(a).unwrap().bits_eq(&direct.da));
            assert!(g.get(b).unwrap().bits_eq(direct.db.tensor()));
            assert!(g.get(c).unwrap().bits_eq(direct.dc.tensor()));
            assert!(g.get(d).unwrap().bits_eq(&direct.dd));
            assert!(g.get(delta).unwrap().bits_eq(&direct.ddelta));
            assert!(g.get(uv).unwrap().bits_eq(&direct.du));
            assert!(g.get(h0v).unwrap().bits_eq(&direct.dh0));
        }
    }

    #[test]
    fn recorded_scan_finite_difference_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (p, u, h0) = random_params(&mut rng, 8, 2, 3, true, Discretization::Taylor);
        let wy = Tensor::uniform(&[8, 2], &mut rng, -1.0, 1.0);
        let spec = ScanSpec {
            disc: Discretization::Taylor,
            chunk: 3,
        };
        let mut tape = Tape::new();
        let [a, b, c, d, delta, uv, h0v] = leaves(&mut tape, &p, &u, &h0);
        let out = tape.selective_scan(a, b, c, d, delta, uv, h0v, spec).unwrap();
        let loss = tape.weighted_sum(out.y, &wy).unwrap();
        let g = tape.backward(loss).unwrap();
        for (probe_delta, at, analytic) in [
            (true, &p.delta, g.get(delta).unwrap()),
            (false, &u, g.get(uv).unwrap()),
        ] {
            let r = check_leaf(
                |probe| {
                    let mut t = Tape::new();
                    let pp = ScanParams {
                        delta: if probe_delta { probe.clone() } else { p.delta.clone() },
                        ..p.clone()
                    };
                    let uu = if probe_delta { u.clone() } else { probe.clone() };
                    let [a, b, c, d, delta, uv, h0v] = leaves(&mut t, &pp, &uu, &h0);
                    let out = t.selective_scan(a, b, c, d, delta, uv, h0v, spec).unwrap();
                    let l = t.weighted_sum(out.y, &wy).unwrap();
                    t.val(l).data()[0]
                },
                at,
                analytic,
            );
            assert!(r.passes(1e-5), "probe_delta={probe_delta}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn tape_simstep_matches_two_pass_kernel_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (p, u, h0) = random_params(&mut rng, 9, 2, 3, true, Discretization::Taylor);
        let (w_s, b_s) = (0.7, -0.2);
        let (kernel_out, trace) = simstep_scan(
            &p,
            &u,
            &h0,
            &SimStepParams {
                w_s,
                b_s,
                enabled: true,
            },
        )
        .unwrap();
        assert!(trace.is_some());
        // chunk >= L makes the chunked kernel bit-identical to the
        // sequential one, so the tape build must reproduce the kernel's
        // two-pass result exactly.
        let spec = ScanSpec {
            disc: Discretization::Taylor,
            chunk: 9,
        };
        let mut tape = Tape::new();
        let [a, b, c, d, delta, uv, h0v] = leaves(&mut tape, &p, &u, &h0);
        let ws = tape.var(Tensor::scalar(w_s));
        let bs = tape.var(Tensor::scalar(b_s));
        let out = tape
            .simstep_selective_scan(a, b, c, d, delta, uv, h0v, ws, bs, spec)
            .unwrap();
        assert!(tape.val(out.y).bits_eq(&kernel_out.y));
        assert!(tape.val(out.h_all).bits_eq(&kernel_out.h_all));
        assert!(tape.val(out.h_final).bits_eq(&kernel_out.h_final.h));
    }

    #[test]
    fn tape_simstep_gradchecks_every_leaf() {
        let (l, d_ch, n_state) = (5usize, 2usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (mut p, mut u, h0) = random_params(&mut rng, l, d_ch, n_state, true, Discretization::Taylor);
        // keep u away from 0: the similarity's sign flips with u, so finite
        // differences need a margin around each coordinate
        u = u.map(|v| 0.25 + 0.75 * v.abs());
        p.delta = p.delta.map(|v| v.max(0.05));
        let (w_s, b_s) = (0.05, 0.1); // keeps the gate strictly inside relu's linear region
        let wy = Tensor::uniform(&[l, d_ch], &mut rng, -1.0, 1.0);
        let spec = ScanSpec {
            disc: Discretization::Taylor,
            chunk: 3,
        };
        let build = |p: &ScanParams, u: &Tensor, h0: &ScanState, w_s: f64, b_s: f64| {
            let mut tape = Tape::new();
            let vars = leaves(&mut tape, p, u, h0);
            let [a, b, c, d, delta, uv, h0v] = vars;
            let ws = tape.var(Tensor::scalar(w_s));
            let bs = tape.var(Tensor::scalar(b_s));
            let out = tape
                .simstep_selective_scan(a, b, c, d, delta, uv, h0v, ws, bs, spec)
                .unwrap();
            let loss = tape.weighted_sum(out.y, &wy).unwrap();
            (tape, vars, ws, bs, loss)
        };
        let (tape, vars, ws, bs, loss) = build(&p, &u, &h0, w_s, b_s);
        let g = tape.backward(loss).unwrap();
        let probes: [(&str, &Tensor, &Tensor); 9] = [
            ("a", &p.a, g.get(vars[0]).unwrap()),
            ("b", p.b.tensor(), g.get(vars[1]).unwrap()),
            ("c", p.c.tensor(), g.get(vars[2]).unwrap()),
            ("d", &p.d, g.get(vars[3]).unwrap()),
            ("delta", &p.delta, g.get(vars[4]).unwrap()),
            ("u", &u, g.get(vars[5]).unwrap()),
            ("h0", &h0.h, g.get(vars[6]).unwrap()),
            ("w_s", &Tensor::scalar(w_s), g.get(ws).unwrap()),
            ("b_s", &Tensor::scalar(b_s), g.get(bs).unwrap()),
        ];
        for (name, at, analytic) in probes {
            let r = check_leaf(
                |probe| {
                    let mut p2 = p.clone();
                    let mut u2 = u.clone();
                    let mut h2 = h0.clone();
                    let mut ws2 = w_s;
                    let mut bs2 = b_s;
                    match name {
                        "a" => p2.a = probe.clone(),
                        "b" => p2.b = SeqOrStatic::PerStep(probe.clone()),
                        "c" => p2.c = SeqOrStatic::PerStep(probe.clone()),
                        "d" => p2.d = probe.clone(),
                        "delta" => p2.delta = probe.clone(),
                        "u" => u2 = probe.clone(),
                        "h0" => h2.h = probe.clone(),
                        "w_s" => ws2 = probe.data()[0],
                        "b_s" => bs2 = probe.data()[0],
                        _ => unreachable!(),
                    }
                    let (t, _, _, _, l) = build(&p2, &u2, &h2, ws2, bs2);
                    t.val(l).data()[0]
                },
                at,
                analytic,
            );
            assert!(r.passes(1e-5), "{name}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn tape_simstep_rejects_static_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let (p, u, h0) = random_params(&mut rng, 4, 2, 2, false, Discretization::Taylor);
        let mut tape = Tape::new();
        let [a, b, c, d, delta, uv, h0v] = leaves(&mut tape, &p, &u, &h0);
        let ws = tape.var(Tensor::scalar(0.1));
        let bs = tape.var(Tensor::scalar(0.1));
        let err = tape
            .simstep_selective_scan(a, b, c, d, delta, uv, h0v, ws, bs, ScanSpec::default())
            .unwrap_err();
        assert!(matches!(err, PdssError::InvalidArgument(_)));
    }

    #[test]
    fn recorded_scan_rejects_rank_deficient_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (p, u, h0) = random_params(&mut rng, 4, 2, 2, false, Discretization::Taylor);
        let mut tape = Tape::new();
        let a = tape.var(p.a.clone());
        let b_bad = tape.var(Tensor::zeros(&[2])); // rank 1: neither static nor per-step
        let c = tape.var(p.c.tensor().clone());
        let d = tape.var(p.d.clone());
        let delta = tape.var(p.delta.clone());
        let uv = tape.var(u.clone());
        let h0v = tape.var(h0.h.clone());
        assert!(tape
            .selective_scan(a, b_bad, c, d, delta, uv, h0v, ScanSpec::default())
            .is_err());
    }
}
