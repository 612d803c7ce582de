//! Losses and segmentation metrics.
//!
//! Losses take class *probabilities* (softmax happens upstream) plus one-hot
//! labels, average over non-ignored pixels only, and exist in two
//! arithmetic-equivalent routes: a plain value route for reporting/oracles
//! and a tape route for training. The metrics side is a GT-row/pred-column
//! confusion matrix with the usual derived quantities, averaged over the
//! classes actually present in the ground truth.

use crate::apem::{OneHotLabels, IGNORE_LABEL};
use crate::autodiff::{Tape, VarId};
use crate::error::{PdssError, Result};
use crate::grid::Tensor;
use serde::{Deserialize, Serialize};

/// Floor inside `ln` so confident-but-wrong probabilities stay finite.
pub const CE_PROB_FLOOR: f64 = 1e-12;

/// Smoothing constant in the per-pixel overlap denominator.
pub const DICE_SMOOTH: f64 = 1e-6;

/// A loss value plus the number of pixels it averaged over. A term with
/// `valid_pixels == 0` carries value 0 and should be reported as degenerate
/// rather than treated as a real 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub value: f64,
    pub valid_pixels: f64,
}

impl LossTerm {
    pub fn degenerate(&self) -> bool {
        self.valid_pixels == 0.0
    }
}

fn check_probs(probs: &Tensor, labels: &OneHotLabels) -> Result<()> {
    if probs.shape() != labels.onehot.shape() {
        return Err(PdssError::ShapeMismatch(format!(
            "probabilities {:?} vs one-hot labels {:?}",
            probs.shape(),
            labels.onehot.shape()
        )));
    }
    Ok(())
}

/// Mean negative log-probability of the true class over non-ignored pixels.
pub fn cross_entropy(probs: &Tensor, labels: &OneHotLabels) -> Result<LossTerm> {
    check_probs(probs, labels)?;
    let count = labels.valid_pixels();
    if count == 0.0 {
        return Ok(LossTerm {
            value: 0.0,
            valid_pixels: 0.0,
        });
    }
    let (k, hw) = (labels.n_cls(), probs.numel() / labels.n_cls());
    let mut acc = 0.0;
    for kk in 0..k {
        for px in 0..hw {
            let y = labels.onehot.data()[kk * hw + px];
            if y == 0.0 {
                continue;
            }
            acc -= y * probs.data()[kk * hw + px].max(CE_PROB_FLOOR).ln();
        }
    }
    Ok(LossTerm {
        value: acc / count,
        valid_pixels: count,
    })
}

/// One minus the mean per-pixel overlap score
/// `sum_k 2*p_k*y_k / (p_k + y_k + smooth)` over non-ignored pixels.
pub fn dice_loss(probs: &Tensor, labels: &OneHotLabels) -> Result<LossTerm> {
    check_probs(probs, labels)?;
    let count = labels.valid_pixels();
    if count == 0.0 {
        return Ok(LossTerm {
            value: 0.0,
            valid_pixels: 0.0,
        });
    }
    let (k, hw) = (labels.n_cls(), probs.numel() / labels.n_cls());
    let mut acc = 0.0;
    for kk in 0..k {
        for px in 0..hw {
            let y = labels.onehot.data()[kk * hw + px];
            if y == 0.0 {
                continue;
            }
            let p = probs.data()[kk * hw + px];
            acc += 2.0 * p * y / (p + y + DICE_SMOOTH);
        }
    }
    Ok(LossTerm {
        value: 1.0 - acc / count,
        valid_pixels: count,
    })
}

/// The training objective: enabled terms summed.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CombinedLoss {
    pub ce: Option<LossTerm>,
    pub dice: Option<LossTerm>,
    pub total: f64,
}

pub fn combined_loss(
    probs: &Tensor,
    labels: &OneHotLabels,
    use_ce: bool,
    use_dice: bool,
) -> Result<CombinedLoss> {
    if !use_ce && !use_dice {
        return Err(PdssError::InvalidArgument(
            "at least one loss term must be enabled".into(),
        ));
    }
    let ce = if use_ce {
        Some(cross_entropy(probs, labels)?)
    } else {
        None
    };
    let dice = if use_dice {
        Some(dice_loss(probs, labels)?)
    } else {
        None
    };
    let total = ce.map_or(0.0, |t| t.value) + dice.map_or(0.0, |t| t.value);
    Ok(CombinedLoss { ce, dice, total })
}

/// Tape route of [`cross_entropy`]: `probs` is a `[K,H,W]` var. Degenerate
/// label maps (no valid pixels) yield a constant-zero scalar var.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: VarId, labels: &OneHotLabels) -> Result<VarId> {
    check_probs(tape.val(probs), labels)?;
    let count = labels.valid_pixels();
    if count == 0.0 {
        return Ok(tape.var(Tensor::scalar(0.0)));
    }
    let weights = labels.onehot.map(|y| -y / count);
    let logp = tape.ln_clamped(probs, CE_PROB_FLOOR);
    tape.weighted_sum(logp, &weights)
}

/// Tape route of [`dice_loss`].
pub fn dice_loss_on_tape(tape: &mut Tape, probs: VarId, labels: &OneHotLabels) -> Result<VarId> {
    check_probs(tape.val(probs), labels)?;
    let count = labels.valid_pixels();
    if count == 0.0 {
        return Ok(tape.var(Tensor::scalar(0.0)));
    }
    // per-entry overlap 2*p*y/(p+y+smooth); the one-hot factor kills value
    // and gradient wherever y = 0, so weighting by the valid-pixel mask and
    // summing recovers exactly the per-pixel scores
    let oh = tape.var(labels.onehot.clone());
    let pm = tape.mul(probs, oh)?;
    let den_sum = tape.add(probs, oh)?;
    let den = tape.add_scalar(den_sum, DICE_SMOOTH);
    let frac = tape.div(pm, den)?;
    let scaled = tape.scale(frac, 2.0);
    let (k, hw) = (labels.n_cls(), labels.onehot.numel() / labels.n_cls());
    let mut w = vec![0.0; k * hw];
    for px in 0..hw {
        let valid = (0..k).any(|kk| labels.onehot.data()[kk * hw + px] != 0.0);
        if valid {
            for kk in 0..k {
                w[kk * hw + px] = 1.0 / count;
            }
        }
    }
    let wt = Tensor::new_unchecked(labels.onehot.shape().to_vec(), w);
    let score = tape.weighted_sum(scaled, &wt)?;
    let neg = tape.neg(score);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Tape route of [`combined_loss`]: sum of the enabled terms as a scalar var.
pub fn combined_loss_on_tape(
    tape: &mut Tape,
    probs: VarId,
    labels: &OneHotLabels,
    use_ce: bool,
    use_dice: bool,
) -> Result<VarId> {
    match (use_ce, use_dice) {
        (false, false) => Err(PdssError::InvalidArgument(
            "at least one loss term must be enabled".into(),
        )),
        (true, false) => cross_entropy_on_tape(tape, probs, labels),
        (false, true) => dice_loss_on_tape(tape, probs, labels),
        (true, true) => {
            let ce = cross_entropy_on_tape(tape, probs, labels)?;
            let di = dice_loss_on_tape(tape, probs, labels)?;
            tape.add(ce, di)
        }
    }
}

/// Per-pixel argmax over the channel axis of `[K,H,W]`; ties go to the
/// lowest class index.
pub fn argmax_channels(probs: &Tensor) -> Result<Tensor> {
    if probs.rank() != 3 {
        return Err(PdssError::ShapeMismatch(format!(
            "argmax_channels wants [K,H,W], got {:?}",
            probs.shape()
        )));
    }
    let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for px in 0..hw {
        let mut best = 0usize;
        let mut best_v = probs.data()[px];
        for kk in 1..k {
            let v = probs.data()[kk * hw + px];
            if v > best_v {
                best_v = v;
                best = kk;
            }
        }
        out[px] = best as f64;
    }
    Ok(Tensor::new_unchecked(vec![h, w], out))
}

/// Confusion matrix with ground-truth rows and prediction columns; ignored
/// ground-truth pixels are counted separately and contribute to nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_cls: usize,
    /// Row-major `[n_cls * n_cls]`: `counts[gt * n_cls + pred]`.
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(n_cls: usize) -> Self {
        ConfusionMatrix {
            n_cls,
            counts: vec![0; n_cls * n_cls],
            ignored: 0,
        }
    }

    /// Tally a predicted class map against a ground-truth map (both `[H,W]`,
    /// integer values; ground truth may use the ignore value).
    pub fn accumulate(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        if pred.shape() != gt.shape() || pred.rank() != 2 {
            return Err(PdssError::ShapeMismatch(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let k = self.n_cls as f64;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if g.fract() != 0.0 || !(0.0..k).contains(&g) {
                return Err(PdssError::InvalidArgument(format!(
                    "ground-truth label {g} outside 0..{} and not the ignore value",
                    self.n_cls
                )));
            }
            if p.fract() != 0.0 || !(0.0..k).contains(&p) {
                return Err(PdssError::InvalidArgument(format!(
                    "predicted label {p} outside 0..{}",
                    self.n_cls
                )));
            }
            self.counts[g as usize * self.n_cls + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_cls != self.n_cls {
            return Err(PdssError::ShapeMismatch(format!(
                "merging confusion matrices over {} vs {} classes",
                self.n_cls, other.n_cls
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Derive the metrics report. Zero-denominator ratios are reported as 0,
    /// and the means run over ground-truth-present classes only.
    pub fn metrics(&self) -> MetricsReport {
        let k = self.n_cls;
        let total = self.total();
        let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.counts[c * k + c] as f64;
            let row: f64 = (0..k).map(|j| self.counts[c * k + j] as f64).sum();
            let col: f64 = (0..k).map(|i| self.counts[i * k + c] as f64).sum();
            let (fn_, fp) = (row - tp, col - tp);
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            per_class.push(ClassMetrics {
                iou: ratio(tp, tp + fp + fn_),
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
                support: row as u64,
                present: row > 0.0,
            });
        }
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.present).collect();
        let n_present = present.len() as f64;
        let trace: u64 = (0..k).map(|c| self.counts[c * k + c]).sum();
        MetricsReport {
            n_cls: k,
            overall_accuracy: ratio(trace as f64, total as f64),
            mean_iou: ratio(present.iter().map(|m| m.iou).sum(), n_present),
            mean_f1: ratio(present.iter().map(|m| m.f1).sum(), n_present),
            per_class,
            total_pixels: total,
            ignored_pixels: self.ignored,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth pixels of this class.
    pub support: u64,
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_cls: usize,
    pub overall_accuracy: f64,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub total_pixels: u64,
    pub ignored_pixels: u64,
}
