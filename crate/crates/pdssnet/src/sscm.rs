//! Semantic-structure coordination: Sobel structural extraction plus the
//! hierarchical four-direction scan in which each direction's semantic scan
//! hands its final hidden state to the structural scan as the initial state.
//!
//! Per direction `k`, both feature maps are serialized with traversal `k`;
//! the semantic scan consumes the projected positional map and its final
//! state seeds the structural scan over the Sobel map. Outputs are
//! deserialized back to maps, the four semantic maps and the four structural
//! maps are each merged by summation, and the channelwise concatenation of
//! the two stacks is projected `2C -> C`. The block is wrapped pre-norm
//! style: `uf = pp + block(layer_norm(pp), sobel(x1))` with `pp` the `1x1`
//! projection of the positional stack.

use crate::autodiff::{ScanSpec, Tape, VarId};
use crate::error::{PdssError, Result};
use crate::grid::Tensor;
use crate::scan2d::ScanDirection;
use crate::scanblock::{generated_scan, ScanGenParams, ScanGenVars};
use rand::Rng;

/// Epsilon inside the per-pixel layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Per-channel Sobel gradient magnitude of the shallow encoder features —
/// the structural map fed to the scan. Value route; the tape route is
/// [`Tape::sobel_magnitude`].
pub fn sobel_structure(x1: &Tensor) -> Result<Tensor> {
    crate::grid::sobel_magnitude(x1)
}

/// Fan-in uniform init for a `k x k` convolution: weights and bias drawn
/// from `U(-1/sqrt(in_c*k*k), 1/sqrt(in_c*k*k))`.
pub(crate) fn conv_init<R: Rng>(
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut R,
) -> (Tensor, Tensor) {
    let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
    let w = Tensor::uniform(&[out_c, in_c, k, k], rng, -bound, bound);
    let b = Tensor::uniform(&[out_c], rng, -bound, bound);
    (w, b)
}

/// Parameters of the hierarchical four-direction scan: one semantic and one
/// structural operand generator per direction (indexed in
/// [`ScanDirection::ALL`] order), the `2C -> C` output projection, and the
/// pre-normalization affine pair.
#[derive(Clone, Debug)]
pub struct FSS2DParams {
    pub semantic: Vec<ScanGenParams>,
    pub structural: Vec<ScanGenParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

pub struct FSS2DVars {
    pub semantic: Vec<ScanGenVars>,
    pub structural: Vec<ScanGenVars>,
    pub out_w: VarId,
    pub out_b: VarId,
    pub ln_gamma: VarId,
    pub ln_beta: VarId,
}

impl FSS2DParams {
    pub fn init<R: Rng>(c_feat: usize, n_state: usize, rng: &mut R) -> Self {
        let semantic = (0..4)
            .map(|_| ScanGenParams::init(c_feat, n_state, rng))
            .collect();
        let structural = (0..4)
            .map(|_| ScanGenParams::init(c_feat, n_state, rng))
            .collect();
        let (out_w, out_b) = conv_init(c_feat, 2 * c_feat, 1, rng);
        FSS2DParams {
            semantic,
            structural,
            out_w,
            out_b,
            ln_gamma: Tensor::full(&[c_feat], 1.0),
            ln_beta: Tensor::zeros(&[c_feat]),
        }
    }

    pub fn c_feat(&self) -> usize {
        self.semantic[0].d_ch()
    }

    pub fn push_vars(&self, tape: &mut Tape) -> FSS2DVars {
        FSS2DVars {
            semantic: self.semantic.iter().map(|g| g.push_vars(tape)).collect(),
            structural: self.structural.iter().map(|g| g.push_vars(tape)).collect(),
            out_w: tape.var(self.out_w.clone()),
            out_b: tape.var(self.out_b.clone()),
            ln_gamma: tape.var(self.ln_gamma.clone()),
            ln_beta: tape.var(self.ln_beta.clone()),
        }
    }

    /// Walk `(name, tensor)` pairs in the same order as [`FSS2DParams::push_vars`].
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (dir, g) in ScanDirection::ALL.iter().zip(&self.semantic) {
            g.visit(&format!("{prefix}.sem_{}", dir.tag()), f);
        }
        for (dir, g) in ScanDirection::ALL.iter().zip(&self.structural) {
            g.visit(&format!("{prefix}.struct_{}", dir.tag()), f);
        }
        f(format!("{prefix}.out.w"), &self.out_w);
        f(format!("{prefix}.out.b"), &self.out_b);
        f(format!("{prefix}.ln.gamma"), &self.ln_gamma);
        f(format!("{prefix}.ln.beta"), &self.ln_beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (dir, g) in ScanDirection::ALL.iter().zip(self.semantic.iter_mut()) {
            g.visit_mut(&format!("{prefix}.sem_{}", dir.tag()), f);
        }
        for (dir, g) in ScanDirection::ALL.iter().zip(self.structural.iter_mut()) {
            g.visit_mut(&format!("{prefix}.struct_{}", dir.tag()), f);
        }
        f(format!("{prefix}.out.w"), &mut self.out_w);
        f(format!("{prefix}.out.b"), &mut self.out_b);
        f(format!("{prefix}.ln.gamma"), &mut self.ln_gamma);
        f(format!("{prefix}.ln.beta"), &mut self.ln_beta);
    }
}

/// Values captured per direction during a traced forward, enough to verify
/// the state-handoff law against the scan kernel from outside the tape.
#[derive(Clone, Debug)]
pub struct DirectionTrace {
    pub direction: ScanDirection,
    /// Structural token sequence `[H*W, C]` fed to the structural scan.
    pub struct_tokens: Tensor,
    /// Final hidden state of the semantic scan, `[C, N_state]`.
    pub h_sem: Tensor,
    /// Structural scan output `[H*W, C]` (pre-deserialization).
    pub o_struct: Tensor,
}

/// The hierarchical scan proper. `pos_proj` is the already-normalized
/// projected positional map and `structure` the Sobel map, both `[C,H,W]`.
/// With `seed_structural = false` the state handoff is severed and every
/// structural scan starts from the zero state (ablation switch). A `trace`
/// sink captures per-direction values in [`ScanDirection::ALL`] order.
pub fn f_ss2d(
    tape: &mut Tape,
    fv: &FSS2DVars,
    pos_proj: VarId,
    structure: VarId,
    spec: ScanSpec,
    seed_structural: bool,
    mut trace: Option<&mut Vec<DirectionTrace>>,
) -> Result<VarId> {
    let ps = tape.val(pos_proj).shape().to_vec();
    if ps != tape.val(structure).shape() || ps.len() != 3 {
        return Err(PdssError::ShapeMismatch(format!(
            "positional map {:?} vs structural map {:?}",
            ps,
            tape.val(structure).shape()
        )));
    }
    let (c, h, w) = (ps[0], ps[1], ps[2]);
    let n_state = tape.val(fv.semantic[0].a_log).shape()[1];
    let h0_zero = tape.var(Tensor::zeros(&[c, n_state]));
    let mut sem_maps = Vec::with_capacity(4);
    let mut struct_maps = Vec::with_capacity(4);
    for (k, &dir) in ScanDirection::ALL.iter().enumerate() {
        let tok_p = tape.serialize_spatial(pos_proj, dir)?;
        let tok_s = tape.serialize_spatial(structure, dir)?;
        let sem = generated_scan(tape, &fv.semantic[k], tok_p, h0_zero, spec, None)?;
        let h0_struct = if seed_structural {
            sem.h_final
        } else {
            h0_zero
        };
        let st = generated_scan(tape, &fv.structural[k], tok_s, h0_struct, spec, None)?;
        sem_maps.push(tape.deserialize_spatial(sem.y, dir, h, w)?);
        struct_maps.push(tape.deserialize_spatial(st.y, dir, h, w)?);
        if let Some(sink) = trace.as_deref_mut() {
            sink.push(DirectionTrace {
                direction: dir,
                struct_tokens: tape.val(tok_s).clone(),
                h_sem: tape.val(sem.h_final).clone(),
                o_struct: tape.val(st.y).clone(),
            });
        }
    }
    let mut s = sem_maps[0];
    let mut t = struct_maps[0];
    for k in 1..4 {
        s = tape.add(s, sem_maps[k])?;
        t = tape.add(t, struct_maps[k])?;
    }
    let cat = tape.concat_channels(&[s, t])?;
    tape.conv2d(cat, fv.out_w, fv.out_b, 1, 0)
}

/// Parameters of the full coordination block: the `N_cls*C -> C` positional
/// projection plus the hierarchical scan bundle.
#[derive(Clone, Debug)]
pub struct SSCMParams {
    pub project_w: Tensor,
    pub project_b: Tensor,
    pub f: FSS2DParams,
}

pub struct SSCMVars {
    pub project_w: VarId,
    pub project_b: VarId,
    pub f: FSS2DVars,
}

impl SSCMParams {
    pub fn init<R: Rng>(n_cls: usize, c_feat: usize, n_state: usize, rng: &mut R) -> Self {
        let (project_w, project_b) = conv_init(c_feat, n_cls * c_feat, 1, rng);
        SSCMParams {
            project_w,
            project_b,
            f: FSS2DParams::init(c_feat, n_state, rng),
        }
    }

    pub fn push_vars(&self, tape: &mut Tape) -> SSCMVars {
        SSCMVars {
            project_w: tape.var(self.project_w.clone()),
            project_b: tape.var(self.project_b.clone()),
            f: self.f.push_vars(tape),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.project.w"), &self.project_w);
        f(format!("{prefix}.project.b"), &self.project_b);
        self.f.visit(&format!("{prefix}.f"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.project.w"), &mut self.project_w);
        f(format!("{prefix}.project.b"), &mut self.project_b);
        self.f.visit_mut(&format!("{prefix}.f"), f);
    }
}

/// Full coordination block: project the positional stack to `C` channels,
/// pre-normalize, run the hierarchical scan against the Sobel map of the
/// shallow features, and add the projected input back (pre-norm residual).
pub fn sscm_forward(
    tape: &mut Tape,
    sv: &SSCMVars,
    pos: VarId,
    x1: VarId,
    spec: ScanSpec,
    seed_structural: bool,
    trace: Option<&mut Vec<DirectionTrace>>,
) -> Result<VarId> {
    let pp = tape.conv2d(pos, sv.project_w, sv.project_b, 1, 0)?;
    let normed = tape.layer_norm_channels(pp, sv.f.ln_gamma, sv.f.ln_beta, LN_EPS)?;
    let structure = tape.sobel_magnitude(x1)?;
    let enhanced = f_ss2d(tape, &sv.f, normed, structure, spec, seed_structural, trace)?;
    tape.add(pp, enhanced)
}
