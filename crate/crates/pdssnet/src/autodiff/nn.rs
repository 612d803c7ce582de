//! Differentiable network building blocks: convolution, resampling,
//! per-pixel normalizations, softmax, masked class pooling, prototype
//! modulation, and the edge-magnitude map.

use super::{Tape, VarId};
use crate::error::{PdssError, Result};
use crate::grid::ops::{reflect_index, resize_taps, sobel_responses, SOBEL_GX, SOBEL_GY};
use crate::grid::Tensor;

impl Tape {
    /// 2-D cross-correlation `x:[C_in,H,W] * w:[C_out,C_in,kh,kw] + b`,
    /// zero padding, matching the value-level kernel bit for bit.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let out = crate::grid::conv2d(self.val(x), self.val(w), self.val(b), stride, pad)?;
        Ok(self.record1(
            &[x, w, b],
            out,
            Box::new(move |ins, outs, gs| {
                let Some(g) = gs[0] else {
                    return vec![None, None, None];
                };
                let (xv, wv) = (ins[0], ins[1]);
                let (c_in, h, w_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (c_out, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
                let (oh, ow) = (outs[0].shape()[1], outs[0].shape()[2]);
                let mut dx = vec![0.0; xv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                let mut db = vec![0.0; c_out];
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(co * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            for ci in 0..c_in {
                                let kbase = ((co * c_in + ci) * kh) * kw;
                                let xbase = ci * h * w_in;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w_in as isize {
                                            continue;
                                        }
                                        let xi = xbase + iy as usize * w_in + ix as usize;
                                        dx[xi] += gv * wv.data()[kbase + ky * kw + kx];
                                        dw[kbase + ky * kw + kx] += gv * xv.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new_unchecked(xv.shape().to_vec(), dx)),
                    Some(Tensor::new_unchecked(wv.shape().to_vec(), dw)),
                    Some(Tensor::new_unchecked(vec![c_out], db)),
                ]
            }),
        ))
    }

    /// Bilinear resize of a `[C,H,W]` var (align-corners = false); the
    /// adjoint scatters each output pixel back through its four taps.
    pub fn bilinear_resize(&mut self, x: VarId, out_h: usize, out_w: usize) -> Result<VarId> {
        let out = crate::grid::bilinear_resize(self.val(x), out_h, out_w)?;
        Ok(self.record1(
            &[x],
            out,
            Box::new(move |ins, _, gs| {
                vec![gs[0].map(|g| {
                    let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
                    let taps_h = resize_taps(h, out_h);
                    let taps_w = resize_taps(w, out_w);
                    let mut dx = vec![0.0; ins[0].numel()];
                    for ch in 0..c {
                        for oy in 0..out_h {
                            let (y0, y1, wy) = taps_h[oy];
                            for ox in 0..out_w {
                                let (x0, x1, wx) = taps_w[ox];
                                let gv = g.data()[(ch * out_h + oy) * out_w + ox];
                                let base = ch * h * w;
                                dx[base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                                dx[base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                                dx[base + y1 * w + x0] += gv * wy * (1.0 - wx);
                                dx[base + y1 * w + x1] += gv * wy * wx;
                            }
                        }
                    }
                    Tensor::new_unchecked(ins[0].shape().to_vec(), dx)
                })]
            }),
        ))
    }

    /// Per-pixel unit normalization of the channel fiber of a `[C,H,W]` var.
    /// Fibers with norm below `eps` pass through unchanged (identity
    /// gradient there), matching the value-level kernel.
    pub fn l2_normalize_channels(&mut self, x: VarId, eps: f64) -> Result<VarId> {
        if self.val(x).rank() != 3 {
            return Err(PdssError::ShapeMismatch(format!(
                "l2_normalize_channels wants [C,H,W], got {:?}",
                self.val(x).shape()
            )));
        }
        let out = crate::grid::l2_normalize(self.val(x), 0, eps)?;
        Ok(self.record1(
            &[x],
            out,
            Box::new(move |ins, outs, gs| {
                vec![gs[0].map(|g| {
                    let (c, hw) = (ins[0].shape()[0], ins[0].numel() / ins[0].shape()[0]);
                    let xv = ins[0].data();
                    let yv = outs[0].data();
                    let mut dx = vec![0.0; ins[0].numel()];
                    for px in 0..hw {
                        let mut sq = 0.0;
                        for ch in 0..c {
                            let v = xv[ch * hw + px];
                            sq += v * v;
                        }
                        let n = sq.sqrt();
                        if n < eps {
                            for ch in 0..c {
                                dx[ch * hw + px] = g.data()[ch * hw + px];
                            }
                        } else {
                            let mut ydotg = 0.0;
                            for ch in 0..c {
                                ydotg += yv[ch * hw + px] * g.data()[ch * hw + px];
                            }
                            for ch in 0..c {
                                dx[ch * hw + px] =
                                    (g.data()[ch * hw + px] - yv[ch * hw + px] * ydotg) / n;
                            }
                        }
                    }
                    Tensor::new_unchecked(ins[0].shape().to_vec(), dx)
                })]
            }),
        ))
    }

    /// Per-pixel layer normalization over the channel fiber of `[C,H,W]`
    /// with learned per-channel gain/shift: `gamma * (x - mu)/sqrt(var+eps)
    /// + beta`, biased variance.
    pub fn layer_norm_channels(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<VarId> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 3
            || self.val(gamma).shape() != [xs[0]]
            || self.val(beta).shape() != [xs[0]]
        {
            return Err(PdssError::ShapeMismatch(format!(
                "layer_norm_channels wants x [C,H,W], gamma/beta [C]; got {:?}/{:?}/{:?}",
                xs,
                self.val(gamma).shape(),
                self.val(beta).shape()
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let xv = self.val(x).data();
        let gv = self.val(gamma).data();
        let bv = self.val(beta).data();
        let mut out = vec![0.0; c * hw];
        let mut xhat = vec![0.0; c * hw];
        let mut inv_sigma = vec![0.0; hw];
        for px in 0..hw {
            let mut mu = 0.0;
            for ch in 0..c {
                mu += xv[ch * hw + px];
            }
            mu /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xv[ch * hw + px] - mu;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[px] = inv;
            for ch in 0..c {
                let xh = (xv[ch * hw + px] - mu) * inv;
                xhat[ch * hw + px] = xh;
                out[ch * hw + px] = gv[ch] * xh + bv[ch];
            }
        }
        Ok(self.record1(
            &[x, gamma, beta],
            Tensor::new_unchecked(xs.clone(), out),
            Box::new(move |ins, _, gs| {
                let Some(g) = gs[0] else {
                    return vec![None, None, None];
                };
                let gamma_v = ins[1].data();
                let mut dx = vec![0.0; c * hw];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for px in 0..hw {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for ch in 0..c {
                        let gg = g.data()[ch * hw + px];
                        let xh = xhat[ch * hw + px];
                        dgamma[ch] += gg * xh;
                        dbeta[ch] += gg;
                        let dxh = gg * gamma_v[ch];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh;
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for ch in 0..c {
                        let dxh = g.data()[ch * hw + px] * gamma_v[ch];
                        dx[ch * hw + px] = inv_sigma[px]
                            * (dxh - mean_dxhat - xhat[ch * hw + px] * mean_dxhat_xhat);
                    }
                }
                vec![
                    Some(Tensor::new_unchecked(ins[0].shape().to_vec(), dx)),
                    Some(Tensor::new_unchecked(vec![c], dgamma)),
                    Some(Tensor::new_unchecked(vec![c], dbeta)),
                ]
            }),
        ))
    }

    /// Numerically stable per-pixel softmax over the channel axis of
    /// `[C,H,W]`.
    pub fn softmax_channels(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(PdssError::ShapeMismatch(format!(
                "softmax_channels wants [C,H,W], got {xs:?}"
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let xv = self.val(x).data();
        let mut out = vec![0.0; c * hw];
        for px in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(xv[ch * hw + px]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (xv[ch * hw + px] - mx).exp();
                out[ch * hw + px] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * hw + px] /= z;
            }
        }
        Ok(self.record1(
            &[x],
            Tensor::new_unchecked(xs, out),
            Box::new(move |ins, outs, gs| {
                vec![gs[0].map(|g| {
                    let yv = outs[0].data();
                    let mut dx = vec![0.0; ins[0].numel()];
                    for px in 0..hw {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += g.data()[ch * hw + px] * yv[ch * hw + px];
                        }
                        for ch in 0..c {
                            dx[ch * hw + px] =
                                yv[ch * hw + px] * (g.data()[ch * hw + px] - dot);
                        }
                    }
                    Tensor::new_unchecked(ins[0].shape().to_vec(), dx)
                })]
            }),
        ))
    }

    /// Class-pooled feature means: for indicator mask `[K,H,W]` (captured as
    /// configuration, not differentiated) and features `x [C,H,W]`, returns
    /// `[K,C]` with row `k` the mean feature over pixels where `mask[k]` is
    /// set. Rows whose pixel count is below 0.5 come back as zeros and pass
    /// no gradient.
    pub fn masked_mean_channels(&mut self, x: VarId, mask: &Tensor) -> Result<VarId> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 3 || mask.rank() != 3 || mask.shape()[1..] != xs[1..] {
            return Err(PdssError::ShapeMismatch(format!(
                "masked_mean_channels wants x [C,H,W], mask [K,H,W]; got {:?}/{:?}",
                xs,
                mask.shape()
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let k = mask.shape()[0];
        let counts: Vec<f64> = (0..k)
            .map(|kk| mask.data()[kk * hw..(kk + 1) * hw].iter().sum())
            .collect();
        let xv = self.val(x).data();
        let mut out = vec![0.0; k * c];
        for kk in 0..k {
            if counts[kk] < 0.5 {
                continue;
            }
            for px in 0..hw {
                let m = mask.data()[kk * hw + px];
                if m == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[kk * c + ch] += m * xv[ch * hw + px];
                }
            }
            for ch in 0..c {
                out[kk * c + ch] /= counts[kk];
            }
        }
        let mask_cl = mask.clone();
        Ok(self.record1(
            &[x],
            Tensor::new_unchecked(vec![k, c], out),
            Box::new(move |ins, _, gs| {
                vec![gs[0].map(|g| {
                    let mut dx = vec![0.0; ins[0].numel()];
                    for kk in 0..k {
                        if counts[kk] < 0.5 {
                            continue;
                        }
                        for px in 0..hw {
                            let m = mask_cl.data()[kk * hw + px];
                            if m == 0.0 {
                                continue;
                            }
                            let scale = m / counts[kk];
                            for ch in 0..c {
                                dx[ch * hw + px] += g.data()[kk * c + ch] * scale;
                            }
                        }
                    }
                    Tensor::new_unchecked(ins[0].shape().to_vec(), dx)
                })]
            }),
        ))
    }

    /// Outer modulation of class prototypes by per-class confidence maps:
    /// `out[n*C + c, px] = conf[n, px] * protos[n, c]`, giving an
    /// `[N*C, H, W]` positional volume.
    pub fn modulate_prototypes(&mut self, conf: VarId, protos: VarId) -> Result<VarId> {
        let cs = self.val(conf).shape().to_vec();
        let ps = self.val(protos).shape().to_vec();
        if cs.len() != 3 || ps.len() != 2 || cs[0] != ps[0] {
            return Err(PdssError::ShapeMismatch(format!(
                "modulate_prototypes wants conf [N,H,W], protos [N,C]; got {cs:?}/{ps:?}"
            )));
        }
        let (n, h, w) = (cs[0], cs[1], cs[2]);
        let c = ps[1];
        let hw = h * w;
        let cv = self.val(conf).data();
        let pv = self.val(protos).data();
        let mut out = vec![0.0; n * c * hw];
        for nn in 0..n {
            for ch in 0..c {
                let m = pv[nn * c + ch];
                let dst = (nn * c + ch) * hw;
                for px in 0..hw {
                    out[dst + px] = cv[nn * hw + px] * m;
                }
            }
        }
        Ok(self.record1(
            &[conf, protos],
            Tensor::new_unchecked(vec![n * c, h, w], out),
            Box::new(move |ins, _, gs| {
                let Some(g) = gs[0] else { return vec![None, None] };
                let (cv, pv) = (ins[0].data(), ins[1].data());
                let mut dconf = vec![0.0; n * hw];
                let mut dp = vec![0.0; n * c];
                for nn in 0..n {
                    for ch in 0..c {
                        let src = (nn * c + ch) * hw;
                        let m = pv[nn * c + ch];
                        for px in 0..hw {
                            let gv = g.data()[src + px];
                            dconf[nn * hw + px] += gv * m;
                            dp[nn * c + ch] += gv * cv[nn * hw + px];
                        }
                    }
                }
                vec![
                    Some(Tensor::new_unchecked(vec![n, h, w], dconf)),
                    Some(Tensor::new_unchecked(vec![n, c], dp)),
                ]
            }),
        ))
    }

    /// Edge-magnitude map `sqrt(gx^2+gy^2)` of a `[C,H,W]` var through the
    /// 3x3 horizontal/vertical stencils with symmetric-reflect padding.
    /// Pixels with zero magnitude get zero gradient (subgradient choice at
    /// the cone point).
    pub fn sobel_magnitude(&mut self, x: VarId) -> Result<VarId> {
        let out = crate::grid::sobel_magnitude(self.val(x))?;
        Ok(self.record1(
            &[x],
            out,
            Box::new(move |ins, outs, gs| {
                vec![gs[0].map(|g| {
                    let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
                    let (gx, gy) = sobel_responses(ins[0]).unwrap();
                    let mag = outs[0].data();
                    let mut dx = vec![0.0; ins[0].numel()];
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let idx = (ch * h + i) * w + j;
                                if mag[idx] == 0.0 {
                                    continue;
                                }
                                let dgx = g.data()[idx] * gx.data()[idx] / mag[idx];
                                let dgy = g.data()[idx] * gy.data()[idx] / mag[idx];
                                for (ki, row) in SOBEL_GX.iter().enumerate() {
                                    let iy = reflect_index(i as isize + ki as isize - 1, h);
                                    for (kj, &kx) in row.iter().enumerate() {
                                        let ix =
                                            reflect_index(j as isize + kj as isize - 1, w);
                                        dx[(ch * h + iy) * w + ix] +=
                                            kx * dgx + SOBEL_GY[ki][kj] * dgy;
                                    }
                                }
                            }
                        }
                    }
                    Tensor::new_unchecked(ins[0].shape().to_vec(), dx)
                })]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::check_leaf;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv2d_forward_matches_value_kernel_and_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
            let x0 = Tensor::uniform(&[2, 4, 5], &mut rng, -1.0, 1.0);
            let w0 = Tensor::uniform(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
            let b0 = Tensor::uniform(&[3], &mut rng, -0.1, 0.1);
            let mut tape = Tape::new();
            let x = tape.var(x0.clone());
            let w = tape.var(w0.clone());
            let b = tape.var(b0.clone());
            let y = tape.conv2d(x, w, b, stride, pad).unwrap();
            let oracle = crate::grid::conv2d(&x0, &w0, &b0, stride, pad).unwrap();
            assert!(tape.val(y).bits_eq(&oracle));
            let wt = Tensor::uniform(tape.val(y).shape(), &mut rng, -1.0, 1.0);
            let loss = tape.weighted_sum(y, &wt).unwrap();
            let g = tape.backward(loss).unwrap();
            for probe in 0..3usize {
                let (at, analytic) = match probe {
                    0 => (&x0, g.get(x).unwrap()),
                    1 => (&w0, g.get(w).unwrap()),
                    _ => (&b0, g.get(b).unwrap()),
                };
                let r = check_leaf(
                    |p| {
                        let mut t = Tape::new();
                        let xv = t.var(if probe == 0 { p.clone() } else { x0.clone() });
                        let wv = t.var(if probe == 1 { p.clone() } else { w0.clone() });
                        let bv = t.var(if probe == 2 { p.clone() } else { b0.clone() });
                        let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
                        let l = t.weighted_sum(y, &wt).unwrap();
                        t.val(l).data()[0]
                    },
                    at,
                    analytic,
                );
                assert!(
                    r.passes(1e-5),
                    "stride={stride} pad={pad} probe={probe}: {}",
                    r.max_rel_error
                );
            }
        }
    }

    #[test]
    fn bilinear_resize_gradchecks_up_and_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x0 = Tensor::uniform(&[2, 4, 4], &mut rng, -1.0, 1.0);
        for (oh, ow) in [(8usize, 8usize), (2, 3), (4, 4)] {
            let mut tape = Tape::new();
            let x = tape.var(x0.clone());
            let y = tape.bilinear_resize(x, oh, ow).unwrap();
            let oracle = crate::grid::bilinear_resize(&x0, oh, ow).unwrap();
            assert!(tape.val(y).bits_eq(&oracle));
            let wt = Tensor::uniform(&[2, oh, ow], &mut rng, -1.0, 1.0);
            let loss = tape.weighted_sum(y, &wt).unwrap();
            let g = tape.backward(loss).unwrap();
            let r = check_leaf(
                |p| {
                    let mut t = Tape::new();
                    let xv = t.var(p.clone());
                    let y = t.bilinear_resize(xv, oh, ow).unwrap();
                    let l = t.weighted_sum(y, &wt).unwrap();
                    t.val(l).data()[0]
                },
                &x0,
                g.get(x).unwrap(),
            );
            assert!(r.passes(1e-5), "{oh}x{ow}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn l2_normalize_channels_gradchecks_and_guards_zero_fibers() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0 = Tensor::uniform(&[3, 2, 2], &mut rng, 0.3, 1.0);
        let wt = Tensor::uniform(&[3, 2, 2], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = tape.l2_normalize_channels(x, 1e-8).unwrap();
        // unit norms per pixel
        for px in 0..4 {
            let n: f64 = (0..3)
                .map(|c| tape.val(y).data()[c * 4 + px].powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let loss = tape.weighted_sum(y, &wt).unwrap();
        let g = tape.backward(loss).unwrap();
        let r = check_leaf(
            |p| {
                let mut t = Tape::new();
                let xv = t.var(p.clone());
                let y = t.l2_normalize_channels(xv, 1e-8).unwrap();
                let l = t.weighted_sum(y, &wt).unwrap();
                t.val(l).data()[0]
            },
            &x0,
            g.get(x).unwrap(),
        );
        assert!(r.passes(1e-5), "{}", r.max_rel_error);

        // zero fiber: identity value and identity gradient
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[3, 1, 1]));
        let y = tape.l2_normalize_channels(x, 1e-8).unwrap();
        assert!(tape.val(y).data().iter().all(|&v| v == 0.0));
        let w1 = Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = tape.weighted_sum(y, &w1).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().bits_eq(&w1));
    }

    #[test]
    fn layer_norm_channels_normalizes_and_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (c, h, w) = (4, 2, 3);
        let x0 = Tensor::uniform(&[c, h, w], &mut rng, -2.0, 2.0);
        let g0 = Tensor::uniform(&[c], &mut rng, 0.5, 1.5);
        let b0 = Tensor::uniform(&[c], &mut rng, -0.5, 0.5);
        let wt = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        // with unit gain / zero shift every pixel fiber is standardized
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let ones = tape.var(Tensor::full(&[c], 1.0));
        let zeros = tape.var(Tensor::zeros(&[c]));
        let y = tape.layer_norm_channels(x, ones, zeros, 1e-6).unwrap();
        for px in 0..h * w {
            let mean: f64 =
                (0..c).map(|ch| tape.val(y).data()[ch * h * w + px]).sum::<f64>() / c as f64;
            let var: f64 = (0..c)
                .map(|ch| (tape.val(y).data()[ch * h * w + px] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // gradcheck all three operands with generic gain/shift
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let ga = tape.var(g0.clone());
        let be = tape.var(b0.clone());
        let y = tape.layer_norm_channels(x, ga, be, 1e-6).unwrap();
        let loss = tape.weighted_sum(y, &wt).unwrap();
        let g = tape.backward(loss).unwrap();
        for probe in 0..3usize {
            let (at, analytic) = match probe {
                0 => (&x0, g.get(x).unwrap()),
                1 => (&g0, g.get(ga).unwrap()),
                _ => (&b0, g.get(be).unwrap()),
            };
            let r = check_leaf(
                |p| {
                    let mut t = Tape::new();
                    let xv = t.var(if probe == 0 { p.clone() } else { x0.clone() });
                    let gv = t.var(if probe == 1 { p.clone() } else { g0.clone() });
                    let bv = t.var(if probe == 2 { p.clone() } else { b0.clone() });
                    let y = t.layer_norm_channels(xv, gv, bv, 1e-6).unwrap();
                    let l = t.weighted_sum(y, &wt).unwrap();
                    t.val(l).data()[0]
                },
                at,
                analytic,
            );
            assert!(r.passes(1e-5), "probe={probe}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn softmax_channels_sums_to_one_and_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x0 = Tensor::uniform(&[3, 2, 2], &mut rng, -2.0, 2.0);
        let wt = Tensor::uniform(&[3, 2, 2], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = tape.softmax_channels(x).unwrap();
        for px in 0..4 {
            let s: f64 = (0..3).map(|c| tape.val(y).data()[c * 4 + px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let loss = tape.weighted_sum(y, &wt).unwrap();
        let g = tape.backward(loss).unwrap();
        let r = check_leaf(
            |p| {
                let mut t = Tape::new();
                let xv = t.var(p.clone());
                let y = t.softmax_channels(xv).unwrap();
                let l = t.weighted_sum(y, &wt).unwrap();
                t.val(l).data()[0]
            },
            &x0,
            g.get(x).unwrap(),
        );
        assert!(r.passes(1e-5), "{}", r.max_rel_error);
        // huge logits stay finite
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2, 1, 1], vec![1e4, -1e4]).unwrap());
        let y = tape.softmax_channels(x).unwrap();
        assert!((tape.val(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.val(y).data()[1].abs() < 1e-12);
    }

    #[test]
    fn masked_mean_pools_per_class_and_gradchecks() {
        let (c, h, w, k) = (3usize, 2usize, 3usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x0 = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        // pixels 0,1,2 -> class 0; pixels 3,4 -> class 1; pixel 5 ignored
        let mut mask = Tensor::zeros(&[k, h, w]);
        for px in 0..3 {
            mask.data_mut()[px] = 1.0;
        }
        for px in 3..5 {
            mask.data_mut()[h * w + px] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let m = tape.masked_mean_channels(x, &mask).unwrap();
        assert_eq!(tape.val(m).shape(), &[k, c]);
        for ch in 0..c {
            let want0: f64 = (0..3).map(|px| x0.data()[ch * 6 + px]).sum::<f64>() / 3.0;
            let want1: f64 = (3..5).map(|px| x0.data()[ch * 6 + px]).sum::<f64>() / 2.0;
            assert!((tape.val(m).at(&[0, ch]) - want0).abs() < 1e-14);
            assert!((tape.val(m).at(&[1, ch]) - want1).abs() < 1e-14);
        }
        let wt = Tensor::uniform(&[k, c], &mut rng, -1.0, 1.0);
        let loss = tape.weighted_sum(m, &wt).unwrap();
        let g = tape.backward(loss).unwrap();
        // ignored pixel receives zero gradient
        for ch in 0..c {
            assert_eq!(g.get(x).unwrap().data()[ch * 6 + 5], 0.0);
        }
        let r = check_leaf(
            |p| {
                let mut t = Tape::new();
                let xv = t.var(p.clone());
                let m = t.masked_mean_channels(xv, &mask).unwrap();
                let l = t.weighted_sum(m, &wt).unwrap();
                t.val(l).data()[0]
            },
            &x0,
            g.get(x).unwrap(),
        );
        assert!(r.passes(1e-5), "{}", r.max_rel_error);
    }

    #[test]
    fn masked_mean_empty_class_row_is_zero() {
        let x0 = Tensor::full(&[2, 2, 2], 3.0);
        let mut mask = Tensor::zeros(&[3, 2, 2]);
        for px in 0..4 {
            mask.data_mut()[px] = 1.0; // everything class 0; classes 1,2 absent
        }
        let mut tape = Tape::new();
        let x = tape.var(x0);
        let m = tape.masked_mean_channels(x, &mask).unwrap();
        assert_eq!(tape.val(m).at(&[0, 0]), 3.0);
        for kk in 1..3 {
            for ch in 0..2 {
                assert_eq!(tape.val(m).at(&[kk, ch]), 0.0);
            }
        }
    }

    #[test]
    fn modulate_prototypes_rank_one_blocks_and_gradchecks() {
        let (n, c, h, w) = (2usize, 3usize, 2usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let conf0 = Tensor::uniform(&[n, h, w], &mut rng, 0.1, 0.9);
        let p0 = Tensor::uniform(&[n, c], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let conf = tape.var(conf0.clone());
        let p = tape.var(p0.clone());
        let pos = tape.modulate_prototypes(conf, p).unwrap();
        assert_eq!(tape.val(pos).shape(), &[n * c, h, w]);
        for nn in 0..n {
            for ch in 0..c {
                for px in 0..h * w {
                    let want = conf0.data()[nn * h * w + px] * p0.at(&[nn, ch]);
                    assert!(
                        (tape.val(pos).data()[(nn * c + ch) * h * w + px] - want).abs() < 1e-15
                    );
                }
            }
        }
        let wt = Tensor::uniform(&[n * c, h, w], &mut rng, -1.0, 1.0);
        let loss = tape.weighted_sum(pos, &wt).unwrap();
        let g = tape.backward(loss).unwrap();
        for probe_conf in [true, false] {
            let (at, analytic) = if probe_conf {
                (&conf0, g.get(conf).unwrap())
            } else {
                (&p0, g.get(p).unwrap())
            };
            let r = check_leaf(
                |pp| {
                    let mut t = Tape::new();
                    let cv = t.var(if probe_conf { pp.clone() } else { conf0.clone() });
                    let pv = t.var(if probe_conf { p0.clone() } else { pp.clone() });
                    let pos = t.modulate_prototypes(cv, pv).unwrap();
                    let l = t.weighted_sum(pos, &wt).unwrap();
                    t.val(l).data()[0]
                },
                at,
                analytic,
            );
            assert!(r.passes(1e-5), "probe_conf={probe_conf}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn sobel_magnitude_matches_value_kernel_and_gradchecks() {
        // ramp + small noise keeps every pixel's magnitude well away from
        // the nondifferentiable zero cone
        let (c, h, w) = (2usize, 4usize, 5usize);
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut x0 = Tensor::uniform(&[c, h, w], &mut rng, -0.01, 0.01);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    x0.data_mut()[(ch * h + i) * w + j] += 0.4 * i as f64 + 0.8 * j as f64;
                }
            }
        }
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let m = tape.sobel_magnitude(x).unwrap();
        assert!(tape.val(m).bits_eq(&crate::grid::sobel_magnitude(&x0).unwrap()));
        let wt = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0);
        let loss = tape.weighted_sum(m, &wt).unwrap();
        let g = tape.backward(loss).unwrap();
        let r = check_leaf(
            |p| {
                let mut t = Tape::new();
                let xv = t.var(p.clone());
                let m = t.sobel_magnitude(xv).unwrap();
                let l = t.weighted_sum(m, &wt).unwrap();
                t.val(l).data()[0]
            },
            &x0,
            g.get(x).unwrap(),
        );
        assert!(r.passes(1e-5), "{}", r.max_rel_error);
    }

    #[test]
    fn sobel_magnitude_constant_input_zero_everywhere() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::full(&[1, 3, 3], 2.5));
        let m = tape.sobel_magnitude(x).unwrap();
        assert!(tape.val(m).data().iter().all(|&v| v == 0.0));
        let loss = tape.sum_all(m);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
