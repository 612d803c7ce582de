//! Full-network assembly at desk scale: a small four-stage convolutional
//! encoder standing in for a pretrained backbone, multi-scale feature
//! fusion, ground-truth-driven prototype extraction with spatial
//! modulation, the hierarchical semantic/structural scan block, the
//! prototype-memory update branch, the channel-scan adjustment block, a
//! `1x1` segmentation head, and a plain gradient-descent training step.
//!
//! Dataflow per forward pass: encoder -> fusion -> `Q` (normalized fused
//! features) -> prototypes (fresh from labels when training, frozen memory
//! at inference) -> confidence-modulated positional stack -> coordination
//! block -> adjustment block -> head. During training the coordination
//! output additionally drives one EMA update of the persistent prototype
//! memory per step; the adjustment block and everything after it never
//! touch that memory.

use crate::apem::{ClassPrototypeMemory, OneHotLabels, PROTO_NORM_EPS};
use crate::autodiff::{Gradients, ScanSpec, Tape, VarId};
use crate::csam::{csam_forward, SCSS2DParams, SCSS2DVars};
use crate::error::{PdssError, Result};
use crate::grid::{read_tensor_file, write_tensor_file, Tensor};
use crate::scanblock::ScanGenVars;
use crate::sscm::{conv_init, sscm_forward, SSCMParams, SSCMVars};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Everything a run needs to be reproducible. Deserializes from JSON with
/// per-field defaults, so partial configs are valid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of segmentation classes.
    pub n_cls: usize,
    /// Feature width `C` of the first encoder stage and all scan blocks.
    pub c_feat: usize,
    /// State components per scan channel.
    pub n_state: usize,
    /// Square tile extent consumed by the network (must be divisible by 8).
    pub tile: usize,
    /// Similarity-modulated step sizes in the channel scan.
    pub simstep: bool,
    /// Hand the semantic final state to the structural scan (ablation switch).
    pub seed_structural: bool,
    /// Prototype-memory EMA retention.
    pub beta: f64,
    /// Parameter-init / data seed.
    pub seed: u64,
    /// Gradient-descent step size.
    pub lr: f64,
    /// Training steps for the toy loop.
    pub steps: usize,
    pub use_ce: bool,
    pub use_dice: bool,
    /// Scan chunk length (affects grouping only, not results).
    pub chunk: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_cls: 3,
            c_feat: 16,
            n_state: 8,
            tile: 32,
            simstep: true,
            seed_structural: true,
            beta: 0.7,
            seed: 0,
            // Plain fixed-step descent diverges above ~0.008 at the default
            // widths (16 features, 8 states); 0.005 trains reliably.
            lr: 0.005,
            steps: 500,
            use_ce: true,
            use_dice: true,
            chunk: 64,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cls < 1 || self.c_feat < 1 || self.n_state < 1 {
            return Err(PdssError::InvalidArgument(
                "n_cls, c_feat and n_state must all be >= 1".into(),
            ));
        }
        if self.tile < 8 || self.tile % 8 != 0 {
            return Err(PdssError::InvalidArgument(format!(
                "tile extent {} must be a positive multiple of 8",
                self.tile
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(PdssError::InvalidArgument(format!(
                "beta {} outside [0, 1]",
                self.beta
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PdssError::InvalidArgument(format!(
                "learning rate {} must be positive and finite",
                self.lr
            )));
        }
        if self.steps < 1 || self.chunk < 1 {
            return Err(PdssError::InvalidArgument(
                "steps and chunk must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn scan_spec(&self) -> ScanSpec {
        ScanSpec {
            chunk: self.chunk,
            ..ScanSpec::default()
        }
    }
}

/// All trainable tensors of the network.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    /// Four 3x3 stages at strides 1,2,2,2 and widths C,2C,4C,8C.
    pub enc: Vec<(Tensor, Tensor)>,
    /// 1x1 projections of stages x2..x4 down to C channels each.
    pub fuse: Vec<(Tensor, Tensor)>,
    /// 1x1 reduction of the fused stack (3C -> C) feeding the normalized
    /// feature map the prototypes are pooled from.
    pub q_w: Tensor,
    pub q_b: Tensor,
    /// 1x1 confidence head (C -> N_cls) for spatial modulation.
    pub conf_w: Tensor,
    pub conf_b: Tensor,
    pub sscm: SSCMParams,
    pub csam: SCSS2DParams,
    /// 1x1 segmentation head (C -> N_cls).
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub struct NetworkVars {
    pub enc: Vec<(VarId, VarId)>,
    pub fuse: Vec<(VarId, VarId)>,
    pub q_w: VarId,
    pub q_b: VarId,
    pub conf_w: VarId,
    pub conf_b: VarId,
    pub sscm: SSCMVars,
    pub csam: SCSS2DVars,
    pub head_w: VarId,
    pub head_b: VarId,
}

impl NetworkParams {
    pub fn init(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.c_feat;
        let widths = [c, 2 * c, 4 * c, 8 * c];
        let mut enc = Vec::with_capacity(4);
        let mut in_c = 3;
        for &out_c in &widths {
            enc.push(conv_init(out_c, in_c, 3, &mut rng));
            in_c = out_c;
        }
        let fuse = widths[1..]
            .iter()
            .map(|&wc| conv_init(c, wc, 1, &mut rng))
            .collect();
        let (q_w, q_b) = conv_init(c, 3 * c, 1, &mut rng);
        let (conf_w, conf_b) = conv_init(cfg.n_cls, c, 1, &mut rng);
        let sscm = SSCMParams::init(cfg.n_cls, c, cfg.n_state, &mut rng);
        let csam = SCSS2DParams::init(
            c,
            cfg.tile * cfg.tile,
            cfg.n_state,
            cfg.simstep,
            &mut rng,
        );
        let (head_w, head_b) = conv_init(cfg.n_cls, c, 1, &mut rng);
        Ok(NetworkParams {
            enc,
            fuse,
            q_w,
            q_b,
            conf_w,
            conf_b,
            sscm,
            csam,
            head_w,
            head_b,
        })
    }

    /// Walk every trainable leaf as `(name, tensor)` in a fixed order; the
    /// same order as [`NetworkParams::push_vars`] / [`NetworkVars::leaf_ids`].
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, (w, b)) in self.enc.iter().enumerate() {
            f(format!("enc{}.w", i + 1), w);
            f(format!("enc{}.b", i + 1), b);
        }
        for (i, (w, b)) in self.fuse.iter().enumerate() {
            f(format!("fuse{}.w", i + 2), w);
            f(format!("fuse{}.b", i + 2), b);
        }
        f("q.w".into(), &self.q_w);
        f("q.b".into(), &self.q_b);
        f("conf.w".into(), &self.conf_w);
        f("conf.b".into(), &self.conf_b);
        self.sscm.visit("sscm", f);
        self.csam.visit("csam", f);
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, (w, b)) in self.enc.iter_mut().enumerate() {
            f(format!("enc{}.w", i + 1), w);
            f(format!("enc{}.b", i + 1), b);
        }
        for (i, (w, b)) in self.fuse.iter_mut().enumerate() {
            f(format!("fuse{}.w", i + 2), w);
            f(format!("fuse{}.b", i + 2), b);
        }
        f("q.w".into(), &mut self.q_w);
        f("q.b".into(), &mut self.q_b);
        f("conf.w".into(), &mut self.conf_w);
        f("conf.b".into(), &mut self.conf_b);
        self.sscm.visit_mut("sscm", f);
        self.csam.visit_mut("csam", f);
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }

    pub fn push_vars(&self, tape: &mut Tape) -> NetworkVars {
        NetworkVars {
            enc: self
                .enc
                .iter()
                .map(|(w, b)| (tape.var(w.clone()), tape.var(b.clone())))
                .collect(),
            fuse: self
                .fuse
                .iter()
                .map(|(w, b)| (tape.var(w.clone()), tape.var(b.clone())))
                .collect(),
            q_w: tape.var(self.q_w.clone()),
            q_b: tape.var(self.q_b.clone()),
            conf_w: tape.var(self.conf_w.clone()),
            conf_b: tape.var(self.conf_b.clone()),
            sscm: self.sscm.push_vars(tape),
            csam: self.csam.push_vars(tape),
            head_w: tape.var(self.head_w.clone()),
            head_b: tape.var(self.head_b.clone()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

fn gen_ids(g: &ScanGenVars) -> [VarId; 6] {
    [g.a_log, g.skip, g.w_b, g.w_c, g.w_dt, g.b_dt]
}

impl NetworkVars {
    /// Leaf var ids in [`NetworkParams::visit`] order.
    pub fn leaf_ids(&self) -> Vec<VarId> {
        let mut ids = Vec::new();
        for (w, b) in &self.enc {
            ids.push(*w);
            ids.push(*b);
        }
        for (w, b) in &self.fuse {
            ids.push(*w);
            ids.push(*b);
        }
        ids.extend([self.q_w, self.q_b, self.conf_w, self.conf_b]);
        ids.extend([self.sscm.project_w, self.sscm.project_b]);
        for g in &self.sscm.f.semantic {
            ids.extend(gen_ids(g));
        }
        for g in &self.sscm.f.structural {
            ids.extend(gen_ids(g));
        }
        ids.extend([
            self.sscm.f.out_w,
            self.sscm.f.out_b,
            self.sscm.f.ln_gamma,
            self.sscm.f.ln_beta,
        ]);
        ids.extend(gen_ids(&self.csam.gen));
        ids.extend([
            self.csam.w_s,
            self.csam.b_s,
            self.csam.out_w,
            self.csam.out_b,
            self.csam.ln_gamma,
            self.csam.ln_beta,
        ]);
        ids.extend([self.head_w, self.head_b]);
        ids
    }
}

/// Named leaf vars for a forward pass, shape-checked against the parameter
/// walk so the two orders cannot silently drift apart.
pub fn leaf_registry(
    params: &NetworkParams,
    vars: &NetworkVars,
    tape: &Tape,
) -> Result<Vec<(String, VarId)>> {
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    params.visit(&mut |n, t| {
        names.push(n);
        shapes.push(t.shape().to_vec());
    });
    let ids = vars.leaf_ids();
    if names.len() != ids.len() {
        return Err(PdssError::InvalidArgument(format!(
            "parameter walk has {} leaves but the var walk has {}",
            names.len(),
            ids.len()
        )));
    }
    for ((name, shape), &id) in names.iter().zip(&shapes).zip(&ids) {
        if tape.val(id).shape() != shape.as_slice() {
            return Err(PdssError::ShapeMismatch(format!(
                "leaf {name} walked as {:?} but pushed as {:?}",
                shape,
                tape.val(id).shape()
            )));
        }
    }
    Ok(names.into_iter().zip(ids).collect())
}

/// What steers the prototype stack in a forward pass: ground-truth labels
/// (training; prototypes pooled fresh from the current features,
/// differentiably) or a frozen memory matrix (inference).
pub enum Guidance<'a> {
    Labels(&'a OneHotLabels),
    Memory(&'a Tensor),
}

/// Retained intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub ff: Tensor,
    pub prototypes: Tensor,
    pub pos: Tensor,
    pub structure: Tensor,
    pub uf: Tensor,
    pub adjusted: Tensor,
    pub logits: Tensor,
}

pub struct ForwardOutput {
    /// `[N_cls, tile, tile]` logits at input resolution.
    pub logits: VarId,
    /// Coordination-block output (drives the memory update branch).
    pub uf: VarId,
    pub trace: Option<ForwardTrace>,
}

/// The four encoder stages; returns `[x1, x2, x3, x4]`.
fn encoder(tape: &mut Tape, nv: &NetworkVars, image: VarId) -> Result<Vec<VarId>> {
    let mut stages = Vec::with_capacity(4);
    let mut x = image;
    for (i, &(w, b)) in nv.enc.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let pre = tape.conv2d(x, w, b, stride, 1)?;
        x = tape.silu(pre);
        stages.push(x);
    }
    Ok(stages)
}

/// Bilinear-resize stages 2..4 to `(h, w)`, project each to `C` channels,
/// concatenate in stage order.
fn feature_fusion(
    tape: &mut Tape,
    nv: &NetworkVars,
    stages: &[VarId],
    h: usize,
    w: usize,
) -> Result<VarId> {
    let mut parts = Vec::with_capacity(3);
    for (i, &(pw, pb)) in nv.fuse.iter().enumerate() {
        let resized = tape.bilinear_resize(stages[i + 1], h, w)?;
        parts.push(tape.conv2d(resized, pw, pb, 1, 0)?);
    }
    tape.concat_channels(&parts)
}

/// One full forward pass on the tape.
pub fn pdssnet_forward(
    tape: &mut Tape,
    nv: &NetworkVars,
    cfg: &NetworkConfig,
    image: VarId,
    guidance: Guidance,
    want_trace: bool,
) -> Result<ForwardOutput> {
    let shape = tape.val(image).shape().to_vec();
    if shape != [3, cfg.tile, cfg.tile] {
        return Err(PdssError::ShapeMismatch(format!(
            "network bound to [3, {t}, {t}] images, got {shape:?}",
            t = cfg.tile
        )));
    }
    let (h, w) = (cfg.tile, cfg.tile);
    let spec = cfg.scan_spec();

    let stages = encoder(tape, nv, image)?;
    let x1 = stages[0];
    let ff = feature_fusion(tape, nv, &stages, h, w)?;

    // normalized fused features the prototypes are pooled from
    let q_raw = tape.conv2d(ff, nv.q_w, nv.q_b, 1, 0)?;
    let q = tape.l2_normalize_channels(q_raw, PROTO_NORM_EPS)?;

    let protos = match guidance {
        Guidance::Labels(labels) => {
            if labels.onehot.shape() != [cfg.n_cls, h, w] {
                return Err(PdssError::ShapeMismatch(format!(
                    "labels {:?} vs expected [{}, {h}, {w}]",
                    labels.onehot.shape(),
                    cfg.n_cls
                )));
            }
            tape.masked_mean_channels(q, &labels.onehot.clone())?
        }
        Guidance::Memory(m) => {
            if m.shape() != [cfg.n_cls, cfg.c_feat] {
                return Err(PdssError::ShapeMismatch(format!(
                    "memory {:?} vs expected [{}, {}]",
                    m.shape(),
                    cfg.n_cls,
                    cfg.c_feat
                )));
            }
            tape.var(m.clone())
        }
    };

    // spatial modulation: per-class confidence maps scale the prototype rows
    let conf_pre = tape.conv2d(x1, nv.conf_w, nv.conf_b, 1, 0)?;
    let conf = tape.sigmoid(conf_pre);
    let pos = tape.modulate_prototypes(conf, protos)?;

    let uf = sscm_forward(tape, &nv.sscm, pos, x1, spec, cfg.seed_structural, None)?;
    let adjusted = csam_forward(tape, &nv.csam, uf, spec, cfg.simstep)?;
    let logits_low = tape.conv2d(adjusted, nv.head_w, nv.head_b, 1, 0)?;
    let logits = tape.bilinear_resize(logits_low, h, w)?;

    let trace = if want_trace {
        Some(ForwardTrace {
            ff: tape.val(ff).clone(),
            prototypes: tape.val(protos).clone(),
            pos: tape.val(pos).clone(),
            structure: crate::grid::sobel_magnitude(tape.val(x1))?,
            uf: tape.val(uf).clone(),
            adjusted: tape.val(adjusted).clone(),
            logits: tape.val(logits).clone(),
        })
    } else {
        None
    };

    Ok(ForwardOutput { logits, uf, trace })
}

/// Convenience: inference forward returning logit values.
pub fn infer(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    memory: &ClassPrototypeMemory,
    image: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nv = params.push_vars(&mut tape);
    let img = tape.var(image.clone());
    let out = pdssnet_forward(
        &mut tape,
        &nv,
        cfg,
        img,
        Guidance::Memory(&memory.protos),
        false,
    )?;
    Ok(tape.val(out.logits).clone())
}

/// Mutable training state: parameters, the persistent prototype memory
/// (EMA-updated once per step, starting from zeros), and the step counter.
pub struct TrainState {
    pub params: NetworkParams,
    pub memory: ClassPrototypeMemory,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        Ok(TrainState {
            params: NetworkParams::init(cfg)?,
            memory: ClassPrototypeMemory::new(cfg.n_cls, cfg.c_feat),
            step: 0,
        })
    }
}

/// Per-step scalars for the loss curve. Disabled terms report 0.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub loss_total: f64,
    pub valid_pixels: f64,
}

/// One training step on one tile.
///
/// The very first step modulates with fresh label-pooled prototypes (the
/// differentiable masked-mean path) and their value seeds the prototype
/// memory through the first EMA blend; every later step modulates with the
/// persistent memory — the same source inference reads — so the network
/// trains against the prototypes it will be deployed with. Each step runs
/// the combined loss, a reverse sweep, a plain gradient-descent update,
/// and one value-level EMA update of the memory from the coordination
/// output. Non-finite losses abort with a numeric error.
pub fn train_step(
    state: &mut TrainState,
    cfg: &NetworkConfig,
    image: &Tensor,
    labels: &OneHotLabels,
) -> Result<StepReport> {
    if !cfg.use_ce && !cfg.use_dice {
        return Err(PdssError::InvalidArgument(
            "at least one loss term must be enabled".into(),
        ));
    }
    let mut tape = Tape::new();
    let nv = state.params.push_vars(&mut tape);
    let registry = leaf_registry(&state.params, &nv, &tape)?;
    let img = tape.var(image.clone());
    let first_step = state.step == 0;
    let mem_snapshot = state.memory.protos.clone();
    let guidance = if first_step {
        Guidance::Labels(labels)
    } else {
        Guidance::Memory(&mem_snapshot)
    };
    let fwd = pdssnet_forward(&mut tape, &nv, cfg, img, guidance, first_step)?;
    let probs = tape.softmax_channels(fwd.logits)?;

    let mut loss_ce = 0.0;
    let mut loss_dice = 0.0;
    let mut total: Option<VarId> = None;
    if cfg.use_ce {
        let ce = crate::eval::cross_entropy_on_tape(&mut tape, probs, labels)?;
        loss_ce = tape.val(ce).data()[0];
        total = Some(ce);
    }
    if cfg.use_dice {
        let di = crate::eval::dice_loss_on_tape(&mut tape, probs, labels)?;
        loss_dice = tape.val(di).data()[0];
        total = Some(match total {
            Some(t) => tape.add(t, di)?,
            None => di,
        });
    }
    let total = total.expect("at least one term enabled");
    let loss_total = tape.val(total).data()[0];
    if !loss_total.is_finite() {
        return Err(PdssError::NonFinite(format!(
            "training loss diverged at step {}: {loss_total}",
            state.step
        )));
    }

    let grads: Gradients = tape.backward(total)?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, id) in &registry {
        if let Some(g) = grads.get(*id) {
            by_name.insert(name.clone(), g.clone());
        }
    }
    let lr = cfg.lr;
    state.params.visit_mut(&mut |name, t| {
        if let Some(g) = by_name.get(&name) {
            for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gv;
            }
        }
    });

    // memory branch, one write per step: the first step blends from the
    // label-pooled init, later steps blend from the previous memory
    if first_step {
        let init = fwd
            .trace
            .as_ref()
            .expect("first step retains its trace")
            .prototypes
            .clone();
        state.memory = ClassPrototypeMemory::from_tensor(init)?;
    }
    let uf_val = tape.val(fwd.uf).clone();
    state.memory.update(&uf_val, labels, cfg.beta)?;
    state.step += 1;

    Ok(StepReport {
        step: state.step,
        loss_ce,
        loss_dice,
        loss_total,
        valid_pixels: labels.valid_pixels(),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    step: usize,
    config: NetworkConfig,
    memory: String,
    params: BTreeMap<String, String>,
}

const CHECKPOINT_FORMAT: &str = "pdssnet-checkpoint-v1";

/// Write a checkpoint directory: `manifest.json` plus one tensor file per
/// parameter leaf and one for the prototype memory.
pub fn save_checkpoint(state: &TrainState, cfg: &NetworkConfig, dir: &Path) -> Result<()> {
    let tdir = dir.join("tensors");
    std::fs::create_dir_all(&tdir)?;
    let mut entries = BTreeMap::new();
    let mut leaves = Vec::new();
    state.params.visit(&mut |name, t| leaves.push((name, t)));
    for (name, t) in leaves {
        let rel = format!("tensors/{name}.pdst");
        write_tensor_file(t, &dir.join(&rel))?;
        entries.insert(name, rel);
    }
    write_tensor_file(&state.memory.protos, &dir.join("tensors/memory.pdst"))?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        step: state.step,
        config: cfg.clone(),
        memory: "tensors/memory.pdst".into(),
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Read a checkpoint back; every parameter leaf must be present with the
/// exact shape the config implies.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, NetworkConfig)> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_str(&raw)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(PdssError::BadFile(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let mut params = NetworkParams::init(&cfg)?;
    let mut failure: Option<PdssError> = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some(rel) = manifest.params.get(&name) else {
            failure = Some(PdssError::BadFile(format!(
                "checkpoint is missing parameter {name}"
            )));
            return;
        };
        match read_tensor_file(&dir.join(rel)) {
            Ok(loaded) if loaded.shape() == t.shape() => *t = loaded,
            Ok(loaded) => {
                failure = Some(PdssError::ShapeMismatch(format!(
                    "checkpoint leaf {name}: {:?} vs expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if manifest.params.len() != params.n_leaves() {
        return Err(PdssError::BadFile(format!(
            "checkpoint lists {} parameters, network has {}",
            manifest.params.len(),
            params.n_leaves()
        )));
    }
    let mem_t = read_tensor_file(&dir.join(&manifest.memory))?;
    if mem_t.shape() != [cfg.n_cls, cfg.c_feat] {
        return Err(PdssError::ShapeMismatch(format!(
            "memory {:?} vs expected [{}, {}]",
            mem_t.shape(),
            cfg.n_cls,
            cfg.c_feat
        )));
    }
    let memory = ClassPrototypeMemory::from_tensor(mem_t)?;
    Ok((
        TrainState {
            params,
            memory,
            step: manifest.step,
        },
        cfg,
    ))
}
