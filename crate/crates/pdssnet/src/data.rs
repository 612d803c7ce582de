//! Deterministic synthetic segmentation tiles: each class owns a distinct
//! mean color, tiles are built from a colored background plus randomly
//! placed rectangle/disk blobs, and strong uniform noise is added to the
//! image only — labels stay exact. The noise amplitude is chosen to be
//! comparable to the gap between class colors, so a single pixel is
//! genuinely ambiguous and a segmenter has to pool spatial context to do
//! well. The generator exists so training, evaluation, and the
//! command-line tools can run end to end without any external dataset.

use crate::error::{PdssError, Result};
use crate::grid::{read_tensor_file, write_tensor_file, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-pixel, per-channel uniform noise amplitude added to images. The
/// class palette spans `[0.32, 0.68]` per channel, so at `±0.30` the noise
/// boxes of neighbouring classes overlap: pointwise classification tops
/// out well below the ceiling and context has to carry the rest.
pub const NOISE_AMP: f64 = 0.30;

/// One image/label pair.
#[derive(Clone, Debug)]
pub struct SegSample {
    /// `[3, tile, tile]` color image, values within `(0, 1)`.
    pub image: Tensor,
    /// `[tile, tile]` integer class ids as floats.
    pub labels: Tensor,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Distinct mean color per class: evenly spaced hues at fixed saturation
/// and value, so channel values live in `[v(1-s), v] = [0.3196, 0.68]` and
/// stay inside `(0, 1)` even after `±NOISE_AMP` noise.
pub fn class_palette(n_cls: usize) -> Vec<[f64; 3]> {
    (0..n_cls)
        .map(|k| hsv_to_rgb(k as f64 / n_cls.max(1) as f64, 0.53, 0.68))
        .collect()
}

/// One tile: fill with the background class, stamp 3–5 random blobs
/// (rectangle or disk, random class), then add image noise.
pub fn gen_blob_tile(
    rng: &mut ChaCha8Rng,
    n_cls: usize,
    tile: usize,
    background: usize,
) -> Result<SegSample> {
    if n_cls < 1 || background >= n_cls || tile < 1 {
        return Err(PdssError::InvalidArgument(format!(
            "bad tile request: n_cls {n_cls}, background {background}, tile {tile}"
        )));
    }
    let palette = class_palette(n_cls);
    let mut labels = vec![background as f64; tile * tile];
    let n_blobs = rng.gen_range(3..=5);
    for _ in 0..n_blobs {
        let cls = rng.gen_range(0..n_cls);
        let lo = (tile / 8).max(1);
        let hi = (tile / 3).max(lo + 1);
        if rng.gen_bool(0.5) {
            // axis-aligned rectangle
            let hx = rng.gen_range(lo..hi) as i64;
            let hy = rng.gen_range(lo..hi) as i64;
            let cx = rng.gen_range(0..tile) as i64;
            let cy = rng.gen_range(0..tile) as i64;
            for y in (cy - hy).max(0)..(cy + hy).min(tile as i64) {
                for x in (cx - hx).max(0)..(cx + hx).min(tile as i64) {
                    labels[y as usize * tile + x as usize] = cls as f64;
                }
            }
        } else {
            // disk
            let r = rng.gen_range(lo..hi) as i64;
            let cx = rng.gen_range(0..tile) as i64;
            let cy = rng.gen_range(0..tile) as i64;
            for y in (cy - r).max(0)..(cy + r + 1).min(tile as i64) {
                for x in (cx - r).max(0)..(cx + r + 1).min(tile as i64) {
                    let (dx, dy) = (x - cx, y - cy);
                    if dx * dx + dy * dy <= r * r {
                        labels[y as usize * tile + x as usize] = cls as f64;
                    }
                }
            }
        }
    }
    let mut image = vec![0.0; 3 * tile * tile];
    for c in 0..3 {
        for px in 0..tile * tile {
            let color = palette[labels[px] as usize][c];
            image[c * tile * tile + px] = color + rng.gen_range(-NOISE_AMP..=NOISE_AMP);
        }
    }
    Ok(SegSample {
        image: Tensor::new(vec![3, tile, tile], image)?,
        labels: Tensor::new(vec![tile, tile], labels)?,
    })
}

/// A full fixture set. The background class cycles through the tiles, so
/// every class is guaranteed to appear once `n_tiles >= n_cls`.
pub fn gen_dataset(seed: u64, n_cls: usize, tile: usize, n_tiles: usize) -> Result<Vec<SegSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_tiles)
        .map(|i| gen_blob_tile(&mut rng, n_cls, tile, i % n_cls))
        .collect()
}

/// Pixel count per class id across all samples.
pub fn label_histogram(samples: &[SegSample], n_cls: usize) -> Vec<u64> {
    let mut hist = vec![0u64; n_cls];
    for s in samples {
        for &v in s.labels.data() {
            let k = v as usize;
            if (k as f64 - v).abs() < 1e-12 && k < n_cls {
                hist[k] += 1;
            }
        }
    }
    hist
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub n_cls: usize,
    pub tile: usize,
    pub n_tiles: usize,
    pub histogram: Vec<u64>,
    /// Relative `(image, labels)` tensor-file paths per tile.
    pub entries: Vec<(String, String)>,
}

const DATASET_FORMAT: &str = "pdssnet-fixtures-v1";

/// Write every tile as a pair of tensor files plus a JSON manifest.
pub fn save_dataset(
    samples: &[SegSample],
    seed: u64,
    n_cls: usize,
    dir: &Path,
) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(PdssError::InvalidArgument("empty dataset".into()));
    }
    let tile = samples[0].labels.shape()[0];
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let img = format!("tile_{i:03}.image.pdst");
        let lab = format!("tile_{i:03}.labels.pdst");
        write_tensor_file(&s.image, &dir.join(&img))?;
        write_tensor_file(&s.labels, &dir.join(&lab))?;
        entries.push((img, lab));
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        seed,
        n_cls,
        tile,
        n_tiles: samples.len(),
        histogram: label_histogram(samples, n_cls),
        entries,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Read a fixture set back, validating shapes against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(Vec<SegSample>, DatasetManifest)> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)?;
    if manifest.format != DATASET_FORMAT {
        return Err(PdssError::BadFile(format!(
            "unknown dataset format {:?}",
            manifest.format
        )));
    }
    if manifest.entries.len() != manifest.n_tiles {
        return Err(PdssError::BadFile(format!(
            "manifest claims {} tiles but lists {} entries",
            manifest.n_tiles,
            manifest.entries.len()
        )));
    }
    let t = manifest.tile;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for (img_rel, lab_rel) in &manifest.entries {
        let image = read_tensor_file(&dir.join(img_rel))?;
        let labels = read_tensor_file(&dir.join(lab_rel))?;
        if image.shape() != [3, t, t] || labels.shape() != [t, t] {
            return Err(PdssError::ShapeMismatch(format!(
                "tile files {img_rel}/{lab_rel}: {:?} and {:?} vs tile extent {t}",
                image.shape(),
                labels.shape()
            )));
        }
        samples.push(SegSample { image, labels });
    }
    Ok((samples, manifest))
}
