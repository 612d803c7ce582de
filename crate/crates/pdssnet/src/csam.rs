//! Channel similarity adjustment: the channel-order scan with
//! similarity-modulated step sizes, wrapped pre-norm style. Channels are the
//! tokens (`L = C`) and the flattened spatial positions are each token's
//! feature vector (`D = H*W`). The sequence is scanned in both channel
//! orders with one shared operand generator and one shared similarity gate
//! `(w_s, b_s)`; the reversed output is re-reversed and the two are merged
//! by summation, then projected `C -> C`.
//!
//! This block produces the features consumed by the segmentation head and
//! has, by construction, no access path to the class prototype memory.

use crate::autodiff::{ScanSpec, Tape, VarId};
use crate::error::{PdssError, Result};
use crate::grid::Tensor;
use crate::scanblock::{generated_scan, ScanGenParams, ScanGenVars};
use crate::sscm::LN_EPS;
use rand::Rng;

/// Initial similarity-gate scalars. Both positive so the gate's rectifier
/// sits strictly in its active region for any cosine in `[-1, 1]`, letting
/// gradients reach the gate from the first step.
pub const GATE_INIT_W: f64 = 0.1;
pub const GATE_INIT_B: f64 = 0.1;

/// Parameters of the channel scan block: one token-conditioned operand
/// generator sized to `H*W` feature channels, the shared similarity gate,
/// the `C -> C` output projection, and the pre-normalization affine pair.
#[derive(Clone, Debug)]
pub struct SCSS2DParams {
    pub gen: ScanGenParams,
    /// Rank-0 similarity-gate weight.
    pub w_s: Tensor,
    /// Rank-0 similarity-gate bias.
    pub b_s: Tensor,
    pub simstep_enabled: bool,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

pub struct SCSS2DVars {
    pub gen: ScanGenVars,
    pub w_s: VarId,
    pub b_s: VarId,
    pub out_w: VarId,
    pub out_b: VarId,
    pub ln_gamma: VarId,
    pub ln_beta: VarId,
}

impl SCSS2DParams {
    /// `hw` is the flattened spatial extent the block is bound to (its
    /// scan-channel width); inputs of any other spatial size are rejected.
    pub fn init<R: Rng>(
        c_feat: usize,
        hw: usize,
        n_state: usize,
        simstep_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let gen = ScanGenParams::init(hw, n_state, rng);
        let (out_w, out_b) = crate::sscm::conv_init(c_feat, c_feat, 1, rng);
        SCSS2DParams {
            gen,
            w_s: Tensor::scalar(GATE_INIT_W),
            b_s: Tensor::scalar(GATE_INIT_B),
            simstep_enabled,
            out_w,
            out_b,
            ln_gamma: Tensor::full(&[c_feat], 1.0),
            ln_beta: Tensor::zeros(&[c_feat]),
        }
    }

    pub fn c_feat(&self) -> usize {
        self.out_w.shape()[0]
    }

    pub fn hw(&self) -> usize {
        self.gen.d_ch()
    }

    pub fn push_vars(&self, tape: &mut Tape) -> SCSS2DVars {
        SCSS2DVars {
            gen: self.gen.push_vars(tape),
            w_s: tape.var(self.w_s.clone()),
            b_s: tape.var(self.b_s.clone()),
            out_w: tape.var(self.out_w.clone()),
            out_b: tape.var(self.out_b.clone()),
            ln_gamma: tape.var(self.ln_gamma.clone()),
            ln_beta: tape.var(self.ln_beta.clone()),
        }
    }

    /// Walk `(name, tensor)` pairs in the same order as
    /// [`SCSS2DParams::push_vars`].
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.gen.visit(&format!("{prefix}.gen"), f);
        f(format!("{prefix}.gate.w_s"), &self.w_s);
        f(format!("{prefix}.gate.b_s"), &self.b_s);
        f(format!("{prefix}.out.w"), &self.out_w);
        f(format!("{prefix}.out.b"), &self.out_b);
        f(format!("{prefix}.ln.gamma"), &self.ln_gamma);
        f(format!("{prefix}.ln.beta"), &self.ln_beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gen.visit_mut(&format!("{prefix}.gen"), f);
        f(format!("{prefix}.gate.w_s"), &mut self.w_s);
        f(format!("{prefix}.gate.b_s"), &mut self.b_s);
        f(format!("{prefix}.out.w"), &mut self.out_w);
        f(format!("{prefix}.out.b"), &mut self.out_b);
        f(format!("{prefix}.ln.gamma"), &mut self.ln_gamma);
        f(format!("{prefix}.ln.beta"), &mut self.ln_beta);
    }
}

/// The bidirectional channel scan proper, on an already-normalized `[C,H,W]`
/// map. `simstep_enabled` routes both directions through the two-pass
/// similarity-modulated scan with the shared gate.
pub fn sc_ss2d(
    tape: &mut Tape,
    cv: &SCSS2DVars,
    x: VarId,
    spec: ScanSpec,
    simstep_enabled: bool,
) -> Result<VarId> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 3 {
        return Err(PdssError::ShapeMismatch(format!(
            "channel scan wants [C,H,W], got {xs:?}"
        )));
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let hw = h * w;
    let bound = tape.val(cv.gen.a_log).shape()[0];
    if bound != hw {
        return Err(PdssError::ShapeMismatch(format!(
            "channel scan bound to {bound} spatial positions, input has {hw} ({h}x{w})"
        )));
    }
    let n_state = tape.val(cv.gen.a_log).shape()[1];
    let gate = if simstep_enabled {
        Some((cv.w_s, cv.b_s))
    } else {
        None
    };
    let tok = tape.reshape(x, &[c, hw])?;
    let h0 = tape.var(Tensor::zeros(&[hw, n_state]));
    let fwd = generated_scan(tape, &cv.gen, tok, h0, spec, gate)?;
    let tok_rev = tape.reverse_rows(tok)?;
    let rev = generated_scan(tape, &cv.gen, tok_rev, h0, spec, gate)?;
    let rev_back = tape.reverse_rows(rev.y)?;
    let merged = tape.add(fwd.y, rev_back)?;
    let map = tape.reshape(merged, &[c, h, w])?;
    tape.conv2d(map, cv.out_w, cv.out_b, 1, 0)
}

/// Full adjustment block: pre-normalize, run the bidirectional channel
/// scan, and add the input back.
pub fn csam_forward(
    tape: &mut Tape,
    cv: &SCSS2DVars,
    uf: VarId,
    spec: ScanSpec,
    simstep_enabled: bool,
) -> Result<VarId> {
    let normed = tape.layer_norm_channels(uf, cv.ln_gamma, cv.ln_beta, LN_EPS)?;
    let core = sc_ss2d(tape, cv, normed, spec, simstep_enabled)?;
    tape.add(uf, core)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{
        selective_scan_chunked, simstep_scan, Discretization, ScanState, SimStepParams,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> ScanSpec {
        ScanSpec::default()
    }

    fn mute_readout(p: &mut SCSS2DParams) {
        p.gen.visit_mut("g", &mut |name, t| {
            if name.ends_with(".w_c") {
                *t = Tensor::zeros(t.shape());
            }
        });
    }

    #[test]
    fn skip_path_reproduces_input_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, h, w) = (3, 2, 2);
        let mut p = SCSS2DParams::init(c, h * w, 2, false, &mut rng);
        mute_readout(&mut p);
        // unit skip: each direction passes the token through, the merge
        // doubles it, and a half-identity projection undoes the doubling
        p.gen.visit_mut("g", &mut |name, t| {
            if name.ends_with(".skip") {
                *t = Tensor::full(t.shape(), 1.0);
            }
        });
        let mut wt = Tensor::zeros(&[c, c, 1, 1]);
        for ch in 0..c {
            wt.data_mut()[ch * c + ch] = 0.5;
        }
        p.out_w = wt;
        p.out_b = Tensor::zeros(&[c]);
        let x = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let cv = p.push_vars(&mut tape);
        let xv = tape.var(x.clone());
        let out = sc_ss2d(&mut tape, &cv, xv, spec(), false).unwrap();
        assert_eq!(tape.val(out).max_abs_diff(&x), 0.0);
    }

    #[test]
    fn zero_core_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (c, h, w) = (3, 2, 3);
        let mut p = SCSS2DParams::init(c, h * w, 2, true, &mut rng);
        mute_readout(&mut p);
        p.gen.visit_mut("g", &mut |name, t| {
            if name.ends_with(".skip") {
                *t = Tensor::zeros(t.shape());
            }
        });
        p.out_b = Tensor::zeros(&[c]);
        let uf = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let cv = p.push_vars(&mut tape);
        let v = tape.var(uf.clone());
        let out = csam_forward(&mut tape, &cv, v, spec(), true).unwrap();
        assert_eq!(tape.val(out).max_abs_diff(&uf), 0.0);
    }

    #[test]
    fn single_channel_merges_to_double_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (c, h, w) = (1, 2, 2);
        let p = SCSS2DParams::init(c, h * w, 2, true, &mut rng);
        let x = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let cv = p.push_vars(&mut tape);
        let xv = tape.var(x.clone());
        let out = sc_ss2d(&mut tape, &cv, xv, spec(), true).unwrap();

        // kernel oracle: one token, so forward and reverse are the same scan
        let tok = Tensor::new_unchecked(vec![1, h * w], x.data().to_vec());
        let params = p.gen.generate(&tok, Discretization::Taylor).unwrap();
        let sp = SimStepParams {
            w_s: GATE_INIT_W,
            b_s: GATE_INIT_B,
            enabled: true,
        };
        let (y, _) = simstep_scan(&params, &tok, &ScanState::zero(h * w, 2), &sp).unwrap();
        let doubled = y.y.map(|v| 2.0 * v);
        let map = Tensor::new_unchecked(vec![c, h, w], doubled.data().to_vec());
        let expect = crate::grid::conv2d(&map, &p.out_w, &p.out_b, 1, 0).unwrap();
        assert!(tape.val(out).bits_eq(&expect));
    }

    #[test]
    fn disabled_gate_matches_plain_bidirectional_scan_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (c, h, w) = (4, 3, 2);
        let hw = h * w;
        let p = SCSS2DParams::init(c, hw, 3, false, &mut rng);
        let x = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let cv = p.push_vars(&mut tape);
        let xv = tape.var(x.clone());
        let out = sc_ss2d(&mut tape, &cv, xv, spec(), false).unwrap();

        // independent value route through the scan kernel
        let tok = Tensor::new_unchecked(vec![c, hw], x.data().to_vec());
        let mut rev_rows = Vec::with_capacity(c * hw);
        for t in (0..c).rev() {
            rev_rows.extend_from_slice(&tok.data()[t * hw..(t + 1) * hw]);
        }
        let tok_rev = Tensor::new_unchecked(vec![c, hw], rev_rows);
        let h0 = ScanState::zero(hw, 3);
        let pf = p.gen.generate(&tok, Discretization::Taylor).unwrap();
        let pr = p.gen.generate(&tok_rev, Discretization::Taylor).unwrap();
        let yf = selective_scan_chunked(&pf, &tok, &h0, 64).unwrap();
        let yr = selective_scan_chunked(&pr, &tok_rev, &h0, 64).unwrap();
        let mut merged = vec![0.0; c * hw];
        for t in 0..c {
            for d in 0..hw {
                merged[t * hw + d] =
                    yf.y.data()[t * hw + d] + yr.y.data()[(c - 1 - t) * hw + d];
            }
        }
        let map = Tensor::new_unchecked(vec![c, h, w], merged);
        let expect = crate::grid::conv2d(&map, &p.out_w, &p.out_b, 1, 0).unwrap();
        assert!(tape.val(out).bits_eq(&expect));
    }

    #[test]
    fn modulation_stays_in_half_open_band_and_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (c, h, w) = (6, 2, 2);
        let hw = h * w;
        let p = SCSS2DParams::init(c, hw, 2, true, &mut rng);
        // identical channels: every token is the same feature vector
        let fiber = Tensor::uniform(&[hw], &mut rng, 0.2, 1.0);
        let mut data = Vec::with_capacity(c * hw);
        for _ in 0..c {
            data.extend_from_slice(fiber.data());
        }
        let tok = Tensor::new_unchecked(vec![c, hw], data);
        let params = p.gen.generate(&tok, Discretization::Taylor).unwrap();
        let sp = SimStepParams {
            w_s: 0.3,
            b_s: 0.0,
            enabled: true,
        };
        let (_, trace) = simstep_scan(&params, &tok, &ScanState::zero(hw, 2), &sp).unwrap();
        let trace = trace.unwrap();
        for (i, &m) in trace.m.data().iter().enumerate() {
            assert!((0.5..1.0).contains(&m), "m[{i}] = {m}");
        }
        // first token sees the zero state (guarded similarity -> m = 1/2);
        // afterwards the state is parallel to the drive, so s ~ 1
        for d in 0..hw {
            assert_eq!(trace.m.data()[d], 0.5);
        }
        for t in 1..c {
            for d in 0..hw {
                let s = trace.s.data()[t * hw + d];
                assert!(s > 0.999, "s[{t},{d}] = {s}");
            }
        }
    }

    #[test]
    fn equivariant_under_joint_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (c, h, w) = (3, 2, 2);
        let hw = h * w;
        let p = SCSS2DParams::init(c, hw, 2, true, &mut rng);
        let uf = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        let perm = [2usize, 0, 3, 1];

        // permute the scan-channel axis of every bound parameter the same way
        let mut p2 = p.clone();
        let n = p.gen.n_state();
        for d in 0..hw {
            for nn in 0..n {
                p2.gen.a_log.data_mut()[d * n + nn] = p.gen.a_log.data()[perm[d] * n + nn];
                p2.gen.w_b.data_mut()[nn * hw + d] = p.gen.w_b.data()[nn * hw + perm[d]];
                p2.gen.w_c.data_mut()[nn * hw + d] = p.gen.w_c.data()[nn * hw + perm[d]];
            }
            p2.gen.skip.data_mut()[d] = p.gen.skip.data()[perm[d]];
            p2.gen.w_dt.data_mut()[d] = p.gen.w_dt.data()[perm[d]];
            p2.gen.b_dt.data_mut()[d] = p.gen.b_dt.data()[perm[d]];
        }
        let mut uf2 = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for d in 0..hw {
                uf2.data_mut()[ch * hw + d] = uf.data()[ch * hw + perm[d]];
            }
        }
        let run = |pp: &SCSS2DParams, x: &Tensor| {
            let mut tape = Tape::new();
            let cv = pp.push_vars(&mut tape);
            let v = tape.var(x.clone());
            let out = csam_forward(&mut tape, &cv, v, spec(), true).unwrap();
            tape.val(out).clone()
        };
        let base = run(&p, &uf);
        let permuted = run(&p2, &uf2);
        let mut expect = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for d in 0..hw {
                expect.data_mut()[ch * hw + d] = base.data()[ch * hw + perm[d]];
            }
        }
        assert!(
            permuted.max_abs_diff(&expect) < 1e-12,
            "diff {}",
            permuted.max_abs_diff(&expect)
        );
    }

    #[test]
    fn shape_contract_and_tile_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let p = SCSS2DParams::init(16, 32 * 32, 2, true, &mut rng);
        let uf = Tensor::uniform(&[16, 32, 32], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let cv = p.push_vars(&mut tape);
        let v = tape.var(uf);
        let out = csam_forward(&mut tape, &cv, v, spec(), true).unwrap();
        assert_eq!(tape.val(out).shape(), &[16, 32, 32]);

        let wrong = tape.var(Tensor::zeros(&[16, 8, 8]));
        assert!(csam_forward(&mut tape, &cv, wrong, spec(), true).is_err());
    }

    #[test]
    fn gradcheck_through_full_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (c, h, w) = (3, 2, 2);
        let mut p = SCSS2DParams::init(c, h * w, 2, true, &mut rng);
        // keep the gate's rectifier strictly active across probe wiggles
        p.w_s = Tensor::scalar(0.1);
        p.b_s = Tensor::scalar(0.15);
        // spread fibers keep the normalization variance O(1) so the
        // finite-difference truncation error stays well below tolerance
        let uf = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let cv = p.push_vars(&mut tape);
        let v = tape.var(uf.clone());
        let out = csam_forward(&mut tape, &cv, v, spec(), true).unwrap();
        let loss = tape.mean_all(out);
        let g = tape.backward(loss).unwrap();
        for (leaf, grad, which) in [
            (uf.clone(), g.get(v).unwrap(), "input"),
            (p.w_s.clone(), g.get(cv.w_s).unwrap(), "gate weight"),
            (p.gen.w_dt.clone(), g.get(cv.gen.w_dt).unwrap(), "step proj"),
        ] {
            let r = crate::autodiff::test_support::check_leaf(
                |probe| {
                    let mut q = p.clone();
                    let mut x = uf.clone();
                    match which {
                        "input" => x = probe.clone(),
                        "gate weight" => q.w_s = probe.clone(),
                        _ => q.gen.w_dt = probe.clone(),
                    }
                    let mut t = Tape::new();
                    let cv = q.push_vars(&mut t);
                    let v = t.var(x);
                    let out = csam_forward(&mut t, &cv, v, spec(), true).unwrap();
                    let l = t.mean_all(out);
                    t.val(l).data()[0]
                },
                &leaf,
                grad,
            );
            assert!(r.passes(1e-5), "{which}: rel err {}", r.max_rel_error);
        }
    }

    #[test]
    fn visit_matches_push_vars_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p = SCSS2DParams::init(4, 9, 2, true, &mut rng);
        let mut names = Vec::new();
        p.visit("csam", &mut |n, _| names.push(n));
        assert_eq!(names.len(), 6 + 2 + 2 + 2);
        assert_eq!(names[0], "csam.gen.a_log");
        assert_eq!(names[6], "csam.gate.w_s");
        assert_eq!(names[names.len() - 1], "csam.ln.beta");
    }
}
