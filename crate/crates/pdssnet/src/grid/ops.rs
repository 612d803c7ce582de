//! Elementary grid operations: per-fiber l2 normalization, bilinear resize
//! (align-corners = false), 2-D cross-correlation with zero padding, and
//! channel concatenation.

use super::Tensor;
use crate::error::{PdssError, Result};

/// Kernel + bias pair for [`conv2d`]. Kernel is `[C_out, C_in, kh, kw]`,
/// bias `[C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }
}

/// Normalize each fiber along `axis` to unit l2 norm. Fibers whose norm is
/// below `eps` are passed through unchanged (in particular the zero fiber
/// stays zero), so the operation is total.
pub fn l2_normalize(t: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(PdssError::InvalidArgument(format!(
            "l2_normalize axis {axis} out of range for rank {}",
            t.rank()
        )));
    }
    if eps <= 0.0 {
        return Err(PdssError::InvalidArgument("l2_normalize eps must be > 0".into()));
    }
    let shape = t.shape();
    let n_axis = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = t.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n_axis * inner + i;
            let mut sq = 0.0;
            for k in 0..n_axis {
                let v = out[base + k * inner];
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm >= eps {
                for k in 0..n_axis {
                    out[base + k * inner] /= norm;
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(shape.to_vec(), out))
}

/// Bilinear resize of a `[C, H, W]` map to `[C, out_h, out_w]` with
/// align-corners = false sampling (source coordinate of output pixel `i` is
/// `(i + 0.5) * in/out - 0.5`, taps clamped to the frame). Resizing to the
/// same extents reproduces the input exactly.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(PdssError::ShapeMismatch(format!(
            "bilinear_resize wants [C,H,W], got {:?}",
            t.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(PdssError::InvalidArgument("bilinear_resize zero output extent".into()));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let taps_h = resize_taps(h, out_h);
    let taps_w = resize_taps(w, out_w);
    let src = t.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, wy) = taps_h[oy];
            for ox in 0..out_w {
                let (x0, x1, wx) = taps_w[ox];
                let v = (1.0 - wy) * ((1.0 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1])
                    + wy * ((1.0 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1]);
                out[(ch * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![c, out_h, out_w], out))
}

/// Per-output-pixel source taps: (low index, high index, high weight).
pub(crate) fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let lo = floor.max(0.0) as usize;
            let lo = lo.min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            // When src < 0 both taps clamp to pixel 0; weight goes to the low tap.
            let frac = if floor < 0.0 { 0.0 } else { frac };
            (lo, hi, frac)
        })
        .collect()
}

/// 2-D cross-correlation of `x: [C_in, H, W]` with `kernel: [C_out, C_in,
/// kh, kw]` plus `bias: [C_out]`, zero padding `pad`, stride `stride`.
/// Output extent is `floor((H + 2*pad - kh)/stride) + 1`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.rank() != 3 || kernel.rank() != 4 || bias.rank() != 1 {
        return Err(PdssError::ShapeMismatch(format!(
            "conv2d shapes x{:?} k{:?} b{:?}",
            x.shape(),
            kernel.shape(),
            bias.shape()
        )));
    }
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kc, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kc != c_in {
        return Err(PdssError::ShapeMismatch(format!(
            "conv2d kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if bias.shape()[0] != c_out {
        return Err(PdssError::ShapeMismatch("conv2d bias/out-channel mismatch".into()));
    }
    if stride == 0 {
        return Err(PdssError::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(PdssError::InvalidArgument(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bd[co];
                for ci in 0..c_in {
                    let kbase = ((co * c_in + ci) * kh) * kw;
                    let xbase = ci * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[xbase + iy as usize * w + ix as usize]
                                * kd[kbase + ky * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![c_out, oh, ow], out))
}

/// Symmetric reflection of an out-of-range index into `[0, n)`:
/// `-1 -> 0`, `-2 -> 1`, `n -> n-1`, `n+1 -> n-2`. Valid for the one-pixel
/// overshoot a 3x3 stencil produces on any `n >= 1`.
pub(crate) fn reflect_index(idx: isize, n: usize) -> usize {
    if idx < 0 {
        (-idx - 1) as usize
    } else if idx >= n as isize {
        (2 * n as isize - idx - 1) as usize
    } else {
        idx as usize
    }
}

pub(crate) const SOBEL_GX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub(crate) const SOBEL_GY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Per-channel horizontal/vertical 3x3 edge responses of a `[C,H,W]` map
/// under symmetric-reflect padding. Returned as `(gx, gy)`, both `[C,H,W]`.
pub(crate) fn sobel_responses(t: &Tensor) -> Result<(Tensor, Tensor)> {
    if t.rank() != 3 {
        return Err(PdssError::ShapeMismatch(format!(
            "sobel wants [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut gx = vec![0.0; c * h * w];
    let mut gy = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut ax = 0.0;
                let mut ay = 0.0;
                for (ki, row) in SOBEL_GX.iter().enumerate() {
                    let iy = reflect_index(i as isize + ki as isize - 1, h);
                    for (kj, &kx) in row.iter().enumerate() {
                        let ix = reflect_index(j as isize + kj as isize - 1, w);
                        let v = plane[iy * w + ix];
                        ax += kx * v;
                        ay += SOBEL_GY[ki][kj] * v;
                    }
                }
                gx[(ch * h + i) * w + j] = ax;
                gy[(ch * h + i) * w + j] = ay;
            }
        }
    }
    Ok((
        Tensor::new_unchecked(vec![c, h, w], gx),
        Tensor::new_unchecked(vec![c, h, w], gy),
    ))
}

/// Edge-magnitude map `sqrt(gx^2 + gy^2)` of a `[C,H,W]` map, per channel,
/// with symmetric-reflect padding. Constant inputs produce exact zeros.
pub fn sobel_magnitude(t: &Tensor) -> Result<Tensor> {
    let (gx, gy) = sobel_responses(t)?;
    Ok(gx.zip_map(&gy, |a, b| (a * a + b * b).sqrt()).unwrap())
}

/// Stack `[C_i, H, W]` maps along the channel axis in argument order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(PdssError::InvalidArgument("concat_channels of nothing".into()));
    }
    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
    let mut c_total = 0;
    for p in parts {
        if p.rank() != 3 {
            return Err(PdssError::ShapeMismatch("concat_channels wants [C,H,W] parts".into()));
        }
        if p.shape()[1] != h || p.shape()[2] != w {
            return Err(PdssError::ShapeMismatch(format!(
                "concat_channels spatial mismatch {:?} vs {}x{}",
                p.shape(),
                h,
                w
            )));
        }
        c_total += p.shape()[0];
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new_unchecked(vec![c_total, h, w], data))
}
