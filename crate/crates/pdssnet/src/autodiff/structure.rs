//! Structural ops: reshapes, permutations, broadcast linear maps, and the
//! sequence-shape helpers the scan pipelines are assembled from.

use super::{Tape, VarId};
use crate::error::{PdssError, Result};
use crate::grid::Tensor;
use crate::scan2d::{position_order, ScanDirection};
use crate::ssm::SIM_EPS;

impl Tape {
    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let out = self.val(x).reshaped(shape.to_vec())?;
        let orig: Vec<usize> = self.val(x).shape().to_vec();
        Ok(self.record1(
            &[x],
            out,
            Box::new(move |_, _, gs| {
                vec![gs[0].map(|g| g.reshaped(orig.clone()).unwrap())]
            }),
        ))
    }

    /// Reverse along axis 0 (rows of `[L, ...]`). Self-adjoint.
    pub fn reverse_rows(&mut self, x: VarId) -> Result<VarId> {
        let out = reverse_rows_value(self.val(x))?;
        Ok(self.record1(
            &[x],
            out,
            Box::new(|_, _, gs| {
                vec![gs[0].map(|g| reverse_rows_value(g).unwrap())]
            }),
        ))
    }

    /// Concatenate `[C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.val(p)).collect();
        let out = crate::grid::concat_channels(&tensors)?;
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[0]).collect();
        Ok(self.record1(
            parts,
            out,
            Box::new(move |ins, _, gs| {
                let Some(g) = gs[0] else {
                    return vec![None; ins.len()];
                };
                let hw: usize = g.shape()[1..].iter().product();
                let mut offset = 0usize;
                widths
                    .iter()
                    .zip(ins)
                    .map(|(&c, input)| {
                        let slice =
                            g.data()[offset * hw..(offset + c) * hw].to_vec();
                        offset += c;
                        Some(Tensor::new_unchecked(input.shape().to_vec(), slice))
                    })
                    .collect()
            }),
        ))
    }

    /// `[C,H,W]` map to a `[H*W, C]` token sequence in the given scan
    /// direction (tokens are pixels, features are channels).
    pub fn serialize_spatial(&mut self, x: VarId, dir: ScanDirection) -> Result<VarId> {
        let t = self.val(x);
        if t.rank() != 3 {
            return Err(PdssError::ShapeMismatch(format!(
                "serialize_spatial wants [C,H,W], got {:?}",
                t.shape()
            )));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let order = position_order(dir, h, w);
        let l = h * w;
        let mut out = vec![0.0; l * c];
        for (tok, &pos) in order.iter().enumerate() {
            for ch in 0..c {
                out[tok * c + ch] = t.data()[ch * l + pos];
            }
        }
        Ok(self.record1(
            &[x],
            Tensor::new_unchecked(vec![l, c], out),
            Box::new(move |ins, _, gs| {
                vec![gs[0].map(|g| {
                    let mut dx = vec![0.0; ins[0].numel()];
                    for (tok, &pos) in order.iter().enumerate() {
                        for ch in 0..c {
                            dx[ch * l + pos] += g.data()[tok * c + ch];
                        }
                    }
                    Tensor::new_unchecked(ins[0].shape().to_vec(), dx)
                })]
            }),
        ))
    }

    /// Inverse of [`Tape::serialize_spatial`]: `[H*W, C]` tokens back to a
    /// `[C,H,W]` map for the direction that produced them.
    pub fn deserialize_spatial(
        &mut self,
        x: VarId,
        dir: ScanDirection,
        h: usize,
        w: usize,
    ) -> Result<VarId> {
        let t = self.val(x);
        if t.rank() != 2 || t.shape()[0] != h * w {
            return Err(PdssError::ShapeMismatch(format!(
                "deserialize_spatial wants [{}, C], got {:?}",
                h * w,
                t.shape()
            )));
        }
        let c = t.shape()[1];
        let l = h * w;
        let order = position_order(dir, h, w);
        let mut out = vec![0.0; c * l];
        for (tok, &pos) in order.iter().enumerate() {
            for ch in 0..c {
                out[ch * l + pos] = t.data()[tok * c + ch];
            }
        }
        Ok(self.record1(
            &[x],
            Tensor::new_unchecked(vec![c, h, w], out),
            Box::new(move |ins, _, gs| {
                vec![gs[0].map(|g| {
                    let mut dx = vec![0.0; ins[0].numel()];
                    for (tok, &pos) in order.iter().enumerate() {
                        for ch in 0..c {
                            dx[tok * c + ch] += g.data()[ch * l + pos];
                        }
                    }
                    Tensor::new_unchecked(ins[0].shape().to_vec(), dx)
                })]
            }),
        ))
    }

    /// `z[t,d] = x[t,d] * w[d]` — per-column scaling of a sequence.
    pub fn mul_row_bcast(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        let (l, d) = self.row_bcast_shapes("mul_row_bcast", x, w)?;
        let xv = self.val(x).data();
        let wv = self.val(w).data();
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            for j in 0..d {
                out[t * d + j] = xv[t * d + j] * wv[j];
            }
        }
        Ok(self.record1(
            &[x, w],
            Tensor::new_unchecked(vec![l, d], out),
            Box::new(move |ins, _, gs| {
                let Some(g) = gs[0] else { return vec![None, None] };
                let mut dx = vec![0.0; l * d];
                let mut dw = vec![0.0; d];
                for t in 0..l {
                    for j in 0..d {
                        let gv = g.data()[t * d + j];
                        dx[t * d + j] = gv * ins[1].data()[j];
                        dw[j] += gv * ins[0].data()[t * d + j];
                    }
                }
                vec![
                    Some(Tensor::new_unchecked(vec![l, d], dx)),
                    Some(Tensor::new_unchecked(vec![d], dw)),
                ]
            }),
        ))
    }

    /// `z[t,d] = x[t,d] + b[d]`.
    pub fn add_row_bcast(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (l, d) = self.row_bcast_shapes("add_row_bcast", x, b)?;
        let xv = self.val(x).data();
        let bv = self.val(b).data();
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            for j in 0..d {
                out[t * d + j] = xv[t * d + j] + bv[j];
            }
        }
        Ok(self.record1(
            &[x, b],
            Tensor::new_unchecked(vec![l, d], out),
            Box::new(move |_, _, gs| {
                let Some(g) = gs[0] else { return vec![None, None] };
                let mut db = vec![0.0; d];
                for t in 0..l {
                    for j in 0..d {
                        db[j] += g.data()[t * d + j];
                    }
                }
                vec![Some(g.clone()), Some(Tensor::new_unchecked(vec![d], db))]
            }),
        ))
    }

    /// Per-token linear map broadcast across scan channels:
    /// `out[t,d,n] = sum_i w[n,i] * x[t,i]` — the selective-scan way of
    /// generating per-step `B`/`C` operands (`d` indexes scan channels, and
    /// the token feature width equals the channel count, `i == d` range).
    pub fn bcast_token_linear(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        let xs = self.val(x).shape();
        let ws = self.val(w).shape();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(PdssError::ShapeMismatch(format!(
                "bcast_token_linear wants x [L,D], w [N,D]; got {xs:?}, {ws:?}"
            )));
        }
        let (l, d) = (xs[0], xs[1]);
        let n = ws[0];
        let xv = self.val(x).data();
        let wv = self.val(w).data();
        // per-token vector b[t,:] then broadcast over the d axis
        let mut out = vec![0.0; l * d * n];
        for t in 0..l {
            for nn in 0..n {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += wv[nn * d + i] * xv[t * d + i];
                }
                for dd in 0..d {
                    out[t * d * n + dd * n + nn] = acc;
                }
            }
        }
        Ok(self.record1(
            &[x, w],
            Tensor::new_unchecked(vec![l, d, n], out),
            Box::new(move |ins, _, gs| {
                let Some(g) = gs[0] else { return vec![None, None] };
                let (xv, wv) = (ins[0].data(), ins[1].data());
                let mut dx = vec![0.0; l * d];
                let mut dw = vec![0.0; n * d];
                for t in 0..l {
                    for nn in 0..n {
                        let mut gsum = 0.0;
                        for dd in 0..d {
                            gsum += g.data()[t * d * n + dd * n + nn];
                        }
                        for i in 0..d {
                            dx[t * d + i] += gsum * wv[nn * d + i];
                            dw[nn * d + i] += gsum * xv[t * d + i];
                        }
                    }
                }
                vec![
                    Some(Tensor::new_unchecked(vec![l, d], dx)),
                    Some(Tensor::new_unchecked(vec![n, d], dw)),
                ]
            }),
        ))
    }

    /// `z[t,d,n] = b[t,d,n] * u[t,d]` — the per-channel state increment
    /// direction `B_t u_t`.
    pub fn mul_state_bcast(&mut self, b: VarId, u: VarId) -> Result<VarId> {
        let bs = self.val(b).shape();
        let us = self.val(u).shape();
        if bs.len() != 3 || us.len() != 2 || bs[0] != us[0] || bs[1] != us[1] {
            return Err(PdssError::ShapeMismatch(format!(
                "mul_state_bcast wants b [L,D,N], u [L,D]; got {bs:?}, {us:?}"
            )));
        }
        let (l, d, n) = (bs[0], bs[1], bs[2]);
        let bv = self.val(b).data();
        let uv = self.val(u).data();
        let mut out = vec![0.0; l * d * n];
        for t in 0..l {
            for dd in 0..d {
                let u_td = uv[t * d + dd];
                for nn in 0..n {
                    let i = t * d * n + dd * n + nn;
                    out[i] = bv[i] * u_td;
                }
            }
        }
        Ok(self.record1(
            &[b, u],
            Tensor::new_unchecked(vec![l, d, n], out),
            Box::new(move |ins, _, gs| {
                let Some(g) = gs[0] else { return vec![None, None] };
                let (bv, uv) = (ins[0].data(), ins[1].data());
                let mut db = vec![0.0; l * d * n];
                let mut du = vec![0.0; l * d];
                for t in 0..l {
                    for dd in 0..d {
                        let u_td = uv[t * d + dd];
                        let mut acc = 0.0;
                        for nn in 0..n {
                            let i = t * d * n + dd * n + nn;
                            db[i] = g.data()[i] * u_td;
                            acc += g.data()[i] * bv[i];
                        }
                        du[t * d + dd] = acc;
                    }
                }
                vec![
                    Some(Tensor::new_unchecked(vec![l, d, n], db)),
                    Some(Tensor::new_unchecked(vec![l, d], du)),
                ]
            }),
        ))
    }

    /// Previous-state view of a trajectory: `prev[0] = h0`,
    /// `prev[t] = h_all[t-1]` — what each token's update saw.
    pub fn shift_states(&mut self, h_all: VarId, h0: VarId) -> Result<VarId> {
        let hs = self.val(h_all).shape();
        let h0s = self.val(h0).shape();
        if hs.len() != 3 || h0s != [hs[1], hs[2]] {
            return Err(PdssError::ShapeMismatch(format!(
                "shift_states wants h_all [L,D,N], h0 [D,N]; got {hs:?}, {h0s:?}"
            )));
        }
        let (l, dn) = (hs[0], hs[1] * hs[2]);
        let hv = self.val(h_all).data();
        let h0v = self.val(h0).data();
        let mut out = vec![0.0; l * dn];
        out[..dn].copy_from_slice(h0v);
        out[dn..].copy_from_slice(&hv[..(l - 1) * dn]);
        Ok(self.record1(
            &[h_all, h0],
            Tensor::new_unchecked(hs.to_vec(), out),
            Box::new(move |ins, _, gs| {
                let Some(g) = gs[0] else { return vec![None, None] };
                let mut dh = vec![0.0; ins[0].numel()];
                dh[..(l - 1) * dn].copy_from_slice(&g.data()[dn..]);
                let dh0 = g.data()[..dn].to_vec();
                vec![
                    Some(Tensor::new_unchecked(ins[0].shape().to_vec(), dh)),
                    Some(Tensor::new_unchecked(ins[1].shape().to_vec(), dh0)),
                ]
            }),
        ))
    }

    /// Per-`(t,d)` cosine between the state fibers of `x` and `y`
    /// (`[L,D,N]` each), 0 where either fiber norm is below the shared
    /// similarity guard. Gradient is 0 for guarded fibers.
    pub fn cosine_over_state(&mut self, x: VarId, y: VarId) -> Result<VarId> {
        let xs = self.val(x).shape();
        if xs.len() != 3 || self.val(y).shape() != xs {
            return Err(PdssError::ShapeMismatch(format!(
                "cosine_over_state wants matching [L,D,N]; got {:?}, {:?}",
                xs,
                self.val(y).shape()
            )));
        }
        let (l, d, n) = (xs[0], xs[1], xs[2]);
        let xv = self.val(x).data();
        let yv = self.val(y).data();
        let mut out = vec![0.0; l * d];
        for td in 0..l * d {
            out[td] = crate::ssm::cosine_state_similarity(
                &xv[td * n..(td + 1) * n],
                &yv[td * n..(td + 1) * n],
                SIM_EPS,
            );
        }
        Ok(self.record1(
            &[x, y],
            Tensor::new_unchecked(vec![l, d], out),
            Box::new(move |ins, outs, gs| {
                let Some(g) = gs[0] else { return vec![None, None] };
                let (xv, yv) = (ins[0].data(), ins[1].data());
                let mut dx = vec![0.0; l * d * n];
                let mut dy = vec![0.0; l * d * n];
                for td in 0..l * d {
                    let gv = g.data()[td];
                    if gv == 0.0 {
                        continue;
                    }
                    let xf = &xv[td * n..(td + 1) * n];
                    let yf = &yv[td * n..(td + 1) * n];
                    let nx = xf.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = yf.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nx < SIM_EPS || ny < SIM_EPS {
                        continue; // guarded fiber: constant 0, zero gradient
                    }
                    let cos = outs[0].data()[td];
                    for k in 0..n {
                        dx[td * n + k] = gv * (yf[k] / (nx * ny) - cos * xf[k] / (nx * nx));
                        dy[td * n + k] = gv * (xf[k] / (nx * ny) - cos * yf[k] / (ny * ny));
                    }
                }
                vec![
                    Some(Tensor::new_unchecked(vec![l, d, n], dx)),
                    Some(Tensor::new_unchecked(vec![l, d, n], dy)),
                ]
            }),
        ))
    }

    fn row_bcast_shapes(&self, op: &str, x: VarId, w: VarId) -> Result<(usize, usize)> {
        let xs = self.val(x).shape();
        let ws = self.val(w).shape();
        if xs.len() != 2 || ws.len() != 1 || ws[0] != xs[1] {
            return Err(PdssError::ShapeMismatch(format!(
                "{op} wants x [L,D], w [D]; got {xs:?}, {ws:?}"
            )));
        }
        Ok((xs[0], xs[1]))
    }
}

fn reverse_rows_value(t: &Tensor) -> crate::error::Result<Tensor> {
    if t.rank() == 0 {
        return Err(PdssError::ShapeMismatch(
            "reverse_rows needs rank >= 1".into(),
        ));
    }
    let rows = t.shape()[0];
    let stride: usize = t.shape()[1..].iter().product();
    let mut out = vec![0.0; t.numel()];
    for r in 0..rows {
        out[r * stride..(r + 1) * stride]
            .copy_from_slice(&t.data()[(rows - 1 - r) * stride..(rows - r) * stride]);
    }
    Ok(Tensor::new_unchecked(t.shape().to_vec(), out))
}
