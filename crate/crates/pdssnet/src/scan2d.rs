//! Scan geometry: flattening `[C, H, W]` maps into directional token
//! sequences and back, merging direction-aligned outputs, and the channel
//! serialization used by the channel scan (tokens = channels).
//!
//! Four spatial traversals are supported: row-major (`Horizontal`),
//! column-major (`Vertical`), and their exact reversals. Serialization and
//! deserialization are inverse permutations, so round trips are bit-exact.

use crate::error::{PdssError, Result};
use crate::grid::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    Horizontal,
    Vertical,
    HorizontalRev,
    VerticalRev,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::Horizontal,
        ScanDirection::Vertical,
        ScanDirection::HorizontalRev,
        ScanDirection::VerticalRev,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ScanDirection::Horizontal => "h",
            ScanDirection::Vertical => "v",
            ScanDirection::HorizontalRev => "hr",
            ScanDirection::VerticalRev => "vr",
        }
    }
}

/// A `[L, D_ch]` token sequence tagged with the traversal that produced it
/// and the spatial extents needed to invert it.
#[derive(Clone, Debug)]
pub struct DirectionalSequence {
    pub values: Tensor,
    pub direction: ScanDirection,
    pub height: usize,
    pub width: usize,
}

/// Flat spatial index visited by token `t` of a traversal.
pub(crate) fn position_order(dir: ScanDirection, h: usize, w: usize) -> Vec<usize> {
    let l = h * w;
    match dir {
        ScanDirection::Horizontal => (0..l).collect(),
        ScanDirection::Vertical => (0..l).map(|t| (t % h) * w + t / h).collect(),
        ScanDirection::HorizontalRev => (0..l).rev().collect(),
        ScanDirection::VerticalRev => (0..l).map(|t| {
            let f = l - 1 - t;
            (f % h) * w + f / h
        })
        .collect(),
    }
}

/// Serialize a `[C, H, W]` map into a `[H*W, C]` token sequence in the given
/// traversal order; token features are the channel fibers.
pub fn serialize_2d(t: &Tensor, dir: ScanDirection) -> Result<DirectionalSequence> {
    if t.rank() != 3 {
        return Err(PdssError::ShapeMismatch(format!(
            "serialize_2d wants [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let order = position_order(dir, h, w);
    let src = t.data();
    let hw = h * w;
    let mut out = vec![0.0; hw * c];
    for (tok, &p) in order.iter().enumerate() {
        for ch in 0..c {
            out[tok * c + ch] = src[ch * hw + p];
        }
    }
    Ok(DirectionalSequence {
        values: Tensor::new_unchecked(vec![hw, c], out),
        direction: dir,
        height: h,
        width: w,
    })
}

/// Invert [`serialize_2d`]: scatter a `[H*W, C]` sequence back to `[C, H, W]`.
pub fn deserialize_2d(s: &DirectionalSequence) -> Result<Tensor> {
    let (h, w) = (s.height, s.width);
    let hw = h * w;
    if s.values.rank() != 2 || s.values.shape()[0] != hw {
        return Err(PdssError::ShapeMismatch(format!(
            "deserialize_2d sequence {:?} does not cover {h}x{w}",
            s.values.shape()
        )));
    }
    let c = s.values.shape()[1];
    let order = position_order(s.direction, h, w);
    let src = s.values.data();
    let mut out = vec![0.0; c * hw];
    for (tok, &p) in order.iter().enumerate() {
        for ch in 0..c {
            out[ch * hw + p] = src[tok * c + ch];
        }
    }
    Ok(Tensor::new_unchecked(vec![c, h, w], out))
}

/// Realign four directional outputs (one per direction, any argument order)
/// to map form and sum them elementwise. Summation happens in the canonical
/// direction order, so the result is byte-identical however the arguments
/// are permuted.
pub fn merge_directions(seqs: &[DirectionalSequence]) -> Result<Tensor> {
    if seqs.len() != 4 {
        return Err(PdssError::InvalidArgument(format!(
            "merge_directions wants 4 sequences, got {}",
            seqs.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for dir in ScanDirection::ALL {
        let seq = seqs
            .iter()
            .find(|s| s.direction == dir)
            .ok_or_else(|| {
                PdssError::InvalidArgument(format!(
                    "merge_directions missing direction {}",
                    dir.tag()
                ))
            })?;
        let map = deserialize_2d(seq)?;
        acc = Some(match acc {
            None => map,
            Some(a) => a.zip_map(&map, |x, y| x + y)?,
        });
    }
    Ok(acc.unwrap())
}

/// Channel serialization: a `[C, H, W]` map viewed as `C` tokens whose
/// features are the flattened `H*W` spatial content (a pure reshape).
pub fn serialize_channels(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(PdssError::ShapeMismatch(format!(
            "serialize_channels wants [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    t.reshaped(vec![c, h * w])
}

/// Invert [`serialize_channels`].
pub fn deserialize_channels(s: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if s.rank() != 2 || s.shape()[1] != h * w {
        return Err(PdssError::ShapeMismatch(format!(
            "deserialize_channels sequence {:?} does not cover {h}x{w}",
            s.shape()
        )));
    }
    s.reshaped(vec![s.shape()[0], h, w])
}
