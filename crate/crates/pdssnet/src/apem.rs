//! Ground-truth-driven class prototype memory.
//!
//! Prototypes are per-class mean feature vectors pooled over the pixels the
//! label map assigns to each class. A persistent `[K, C]` memory is blended
//! toward the current sample's prototypes by an exponential moving average
//! whose features are unit-normalized first, so every prototype row stays
//! inside the unit ball. Classes absent from a sample leave their memory
//! rows untouched, and pixels labeled with the ignore value participate in
//! nothing.

use crate::error::{PdssError, Result};
use crate::grid::{l2_normalize, Tensor};

/// Label value that excludes a pixel from pooling, losses, and metrics.
pub const IGNORE_LABEL: f64 = 255.0;

/// Guard for the internal unit normalization of update features.
pub const PROTO_NORM_EPS: f64 = 1e-8;

/// One-hot encoded label map: `onehot [K, H, W]` with the fiber of every
/// ignored pixel all zero, plus per-class pixel counts.
#[derive(Clone, Debug)]
pub struct OneHotLabels {
    pub onehot: Tensor,
    pub counts: Vec<f64>,
}

impl OneHotLabels {
    /// Encode an `[H, W]` label map with values in `0..n_cls` or
    /// [`IGNORE_LABEL`]. Any other value (including fractions) is an error.
    pub fn encode(labels: &Tensor, n_cls: usize) -> Result<Self> {
        if labels.rank() != 2 {
            return Err(PdssError::ShapeMismatch(format!(
                "label map must be [H, W], got {:?}",
                labels.shape()
            )));
        }
        if n_cls == 0 {
            return Err(PdssError::InvalidArgument("n_cls must be >= 1".into()));
        }
        let (h, w) = (labels.shape()[0], labels.shape()[1]);
        let hw = h * w;
        let mut onehot = vec![0.0; n_cls * hw];
        let mut counts = vec![0.0; n_cls];
        for (px, &v) in labels.data().iter().enumerate() {
            if v == IGNORE_LABEL {
                continue;
            }
            if v.fract() != 0.0 || v < 0.0 || v >= n_cls as f64 {
                return Err(PdssError::InvalidArgument(format!(
                    "label {v} at pixel {px} is neither in 0..{n_cls} nor the ignore value"
                )));
            }
            let k = v as usize;
            onehot[k * hw + px] = 1.0;
            counts[k] += 1.0;
        }
        Ok(OneHotLabels {
            onehot: Tensor::new_unchecked(vec![n_cls, h, w], onehot),
            counts,
        })
    }

    pub fn n_cls(&self) -> usize {
        self.onehot.shape()[0]
    }

    /// Pixels carrying a usable label.
    pub fn valid_pixels(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Classes with at least one labeled pixel.
    pub fn present(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c >= 0.5).collect()
    }
}

/// Pooling weight of a class with `count` labeled pixels: `1 / ln(count+1)`,
/// or 0 for an absent class. Rare classes weigh more when prototypes are
/// pooled across several samples.
pub fn class_weight(count: f64) -> f64 {
    if count < 0.5 {
        0.0
    } else {
        1.0 / (count + 1.0).ln()
    }
}

/// Per-class masked mean of `features [C, H, W]` under the one-hot mask:
/// `[K, C]` with zero rows for absent classes. Loop order matches the
/// differentiable pooling op bit for bit.
pub fn masked_class_means(features: &Tensor, labels: &OneHotLabels) -> Result<Tensor> {
    let fs = features.shape();
    if fs.len() != 3 || labels.onehot.shape()[1..] != fs[1..] {
        return Err(PdssError::ShapeMismatch(format!(
            "features {:?} vs labels {:?}",
            fs,
            labels.onehot.shape()
        )));
    }
    let (c, hw) = (fs[0], fs[1] * fs[2]);
    let k = labels.n_cls();
    let xv = features.data();
    let mut out = vec![0.0; k * c];
    for kk in 0..k {
        if labels.counts[kk] < 0.5 {
            continue;
        }
        for px in 0..hw {
            let m = labels.onehot.data()[kk * hw + px];
            if m == 0.0 {
                continue;
            }
            for ch in 0..c {
                out[kk * c + ch] += m * xv[ch * hw + px];
            }
        }
        for ch in 0..c {
            out[kk * c + ch] /= labels.counts[kk];
        }
    }
    Ok(Tensor::new_unchecked(vec![k, c], out))
}

/// Fresh prototypes from one sample: the plain masked class means of the
/// (already normalized) embedding.
pub fn init_prototypes(q: &Tensor, labels: &OneHotLabels) -> Result<Tensor> {
    masked_class_means(q, labels)
}

/// Pools prototypes across several samples with per-sample, per-class
/// rarity weights: the final row `k` is
/// `sum_s w_ks * (masked sum)_ks / sum_s w_ks * count_ks`
/// with `w_ks = class_weight(count_ks)`. A class never seen ends as a zero
/// row. One sample reduces to the plain masked mean (weights cancel).
#[derive(Clone, Debug)]
pub struct PrototypeAccumulator {
    wsum: Tensor,
    wcnt: Vec<f64>,
}

impl PrototypeAccumulator {
    pub fn new(n_cls: usize, c_feat: usize) -> Self {
        PrototypeAccumulator {
            wsum: Tensor::zeros(&[n_cls, c_feat]),
            wcnt: vec![0.0; n_cls],
        }
    }

    pub fn add_sample(&mut self, features: &Tensor, labels: &OneHotLabels) -> Result<()> {
        let (k, c) = (self.wsum.shape()[0], self.wsum.shape()[1]);
        let fs = features.shape();
        if fs.len() != 3 || fs[0] != c || labels.onehot.shape()[1..] != fs[1..] {
            return Err(PdssError::ShapeMismatch(format!(
                "accumulator [K={k}, C={c}] got features {:?} labels {:?}",
                fs,
                labels.onehot.shape()
            )));
        }
        if labels.n_cls() != k {
            return Err(PdssError::ShapeMismatch(format!(
                "accumulator has {k} classes, labels {}",
                labels.n_cls()
            )));
        }
        let hw = fs[1] * fs[2];
        for kk in 0..k {
            let weight = class_weight(labels.counts[kk]);
            if weight == 0.0 {
                continue;
            }
            for px in 0..hw {
                let m = labels.onehot.data()[kk * hw + px];
                if m == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    self.wsum.data_mut()[kk * c + ch] += weight * m * features.data()[ch * hw + px];
                }
            }
            self.wcnt[kk] += weight * labels.counts[kk];
        }
        Ok(())
    }

    pub fn finish(&self) -> Tensor {
        let (k, c) = (self.wsum.shape()[0], self.wsum.shape()[1]);
        let mut out = vec![0.0; k * c];
        for kk in 0..k {
            if self.wcnt[kk] <= 0.0 {
                continue;
            }
            for ch in 0..c {
                out[kk * c + ch] = self.wsum.data()[kk * c + ch] / self.wcnt[kk];
            }
        }
        Tensor::new_unchecked(vec![k, c], out)
    }
}

/// One EMA step of the prototype memory toward the current sample:
/// the update features are unit-normalized per pixel, pooled into current
/// prototypes `A`, and present rows move to `beta * M + (1-beta) * A`;
/// absent rows are returned bit-identically. `beta` outside `[0, 1]` is
/// rejected.
pub fn update_prototypes(
    memory: &Tensor,
    update_features: &Tensor,
    labels: &OneHotLabels,
    beta: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(PdssError::InvalidArgument(format!(
            "memory blend factor must lie in [0, 1], got {beta}"
        )));
    }
    let (k, c) = match memory.shape() {
        [k, c] => (*k, *c),
        s => {
            return Err(PdssError::ShapeMismatch(format!(
                "prototype memory must be [K, C], got {s:?}"
            )))
        }
    };
    if update_features.rank() != 3 || update_features.shape()[0] != c || labels.n_cls() != k {
        return Err(PdssError::ShapeMismatch(format!(
            "memory [K={k}, C={c}] got features {:?}, labels with {} classes",
            update_features.shape(),
            labels.n_cls()
        )));
    }
    let normalized = l2_normalize(update_features, 0, PROTO_NORM_EPS)?;
    let fresh = masked_class_means(&normalized, labels)?;
    let mut out = memory.data().to_vec();
    for kk in 0..k {
        if labels.counts[kk] < 0.5 {
            continue; // absent class: row frozen
        }
        for ch in 0..c {
            out[kk * c + ch] =
                beta * memory.data()[kk * c + ch] + (1.0 - beta) * fresh.data()[kk * c + ch];
        }
    }
    Ok(Tensor::new_unchecked(vec![k, c], out))
}

/// Persistent `[K, C]` prototype memory. Created zeroed; the training loop
/// seeds it on its first step and EMA-blends it once per step from then on.
/// At inference it is loaded from a checkpoint and read frozen.
#[derive(Clone, Debug)]
pub struct ClassPrototypeMemory {
    pub protos: Tensor,
}

impl ClassPrototypeMemory {
    pub fn new(n_cls: usize, c_feat: usize) -> Self {
        ClassPrototypeMemory {
            protos: Tensor::zeros(&[n_cls, c_feat]),
        }
    }

    pub fn from_tensor(protos: Tensor) -> Result<Self> {
        if protos.rank() != 2 {
            return Err(PdssError::ShapeMismatch(format!(
                "prototype memory must be [K, C], got {:?}",
                protos.shape()
            )));
        }
        Ok(ClassPrototypeMemory { protos })
    }

    pub fn n_cls(&self) -> usize {
        self.protos.shape()[0]
    }

    pub fn c_feat(&self) -> usize {
        self.protos.shape()[1]
    }

    pub fn update(&mut self, update_features: &Tensor, labels: &OneHotLabels, beta: f64) -> Result<()> {
        self.protos = update_prototypes(&self.protos, update_features, labels, beta)?;
        Ok(())
    }
}
