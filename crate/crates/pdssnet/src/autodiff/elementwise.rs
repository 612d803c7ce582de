//! Elementwise and reduction ops.

use super::{Tape, VarId};
use crate::error::{PdssError, Result};
use crate::grid::Tensor;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PdssError::ShapeMismatch(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn add(&mut self, x: VarId, y: VarId) -> Result<VarId> {
        same_shape("add", self.val(x), self.val(y))?;
        let out = self.val(x).zip_map(self.val(y), |a, b| a + b)?;
        Ok(self.record1(
            &[x, y],
            out,
            Box::new(|_, _, gs| {
                let g = gs[0];
                vec![g.cloned(), g.cloned()]
            }),
        ))
    }

    pub fn sub(&mut self, x: VarId, y: VarId) -> Result<VarId> {
        same_shape("sub", self.val(x), self.val(y))?;
        let out = self.val(x).zip_map(self.val(y), |a, b| a - b)?;
        Ok(self.record1(
            &[x, y],
            out,
            Box::new(|_, _, gs| {
                let g = gs[0];
                vec![g.cloned(), g.map(|t| t.map(|v| -v))]
            }),
        ))
    }

    pub fn mul(&mut self, x: VarId, y: VarId) -> Result<VarId> {
        same_shape("mul", self.val(x), self.val(y))?;
        let out = self.val(x).zip_map(self.val(y), |a, b| a * b)?;
        Ok(self.record1(
            &[x, y],
            out,
            Box::new(|ins, _, gs| {
                let g = gs[0];
                vec![
                    g.map(|t| t.zip_map(ins[1], |gv, yv| gv * yv).unwrap()),
                    g.map(|t| t.zip_map(ins[0], |gv, xv| gv * xv).unwrap()),
                ]
            }),
        ))
    }

    pub fn div(&mut self, x: VarId, y: VarId) -> Result<VarId> {
        same_shape("div", self.val(x), self.val(y))?;
        let out = self.val(x).zip_map(self.val(y), |a, b| a / b)?;
        if !out.is_finite() {
            return Err(PdssError::NonFinite("div produced a non-finite value".into()));
        }
        Ok(self.record1(
            &[x, y],
            out,
            Box::new(|ins, _, gs| {
                let g = gs[0];
                vec![
                    g.map(|t| t.zip_map(ins[1], |gv, yv| gv / yv).unwrap()),
                    g.map(|t| {
                        let mut d = t.clone();
                        for ((dv, &xv), &yv) in
                            d.data_mut().iter_mut().zip(ins[0].data()).zip(ins[1].data())
                        {
                            *dv = -*dv * xv / (yv * yv);
                        }
                        d
                    }),
                ]
            }),
        ))
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        let out = self.val(x).map(|v| -v);
        self.record1(
            &[x],
            out,
            Box::new(|_, _, gs| vec![gs[0].map(|t| t.map(|v| -v))]),
        )
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let out = self.val(x).map(f64::exp);
        self.record1(
            &[x],
            out,
            Box::new(|_, outs, gs| {
                vec![gs[0].map(|g| g.zip_map(outs[0], |gv, ev| gv * ev).unwrap())]
            }),
        )
    }

    /// `ln(max(x, floor))`; zero gradient where the clamp is active.
    pub fn ln_clamped(&mut self, x: VarId, floor: f64) -> VarId {
        assert!(floor > 0.0, "ln_clamped floor must be positive");
        let out = self.val(x).map(|v| v.max(floor).ln());
        self.record1(
            &[x],
            out,
            Box::new(move |ins, _, gs| {
                vec![gs[0].map(|g| {
                    g.zip_map(ins[0], |gv, xv| if xv > floor { gv / xv } else { 0.0 })
                        .unwrap()
                })]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let out = self.val(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.record1(
            &[x],
            out,
            Box::new(|_, outs, gs| {
                vec![gs[0].map(|g| g.zip_map(outs[0], |gv, s| gv * s * (1.0 - s)).unwrap())]
            }),
        )
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = self.val(x).map(|v| v.max(0.0));
        self.record1(
            &[x],
            out,
            Box::new(|ins, _, gs| {
                vec![gs[0].map(|g| {
                    g.zip_map(ins[0], |gv, xv| if xv > 0.0 { gv } else { 0.0 }).unwrap()
                })]
            }),
        )
    }

    /// Numerically-stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, x: VarId) -> VarId {
        let out = self.val(x).map(softplus_scalar);
        self.record1(
            &[x],
            out,
            Box::new(|ins, _, gs| {
                vec![gs[0].map(|g| {
                    g.zip_map(ins[0], |gv, xv| gv / (1.0 + (-xv).exp())).unwrap()
                })]
            }),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: VarId) -> VarId {
        let out = self.val(x).map(|v| v / (1.0 + (-v).exp()));
        self.record1(
            &[x],
            out,
            Box::new(|ins, _, gs| {
                vec![gs[0].map(|g| {
                    g.zip_map(ins[0], |gv, xv| {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .unwrap()
                })]
            }),
        )
    }

    pub fn add_scalar(&mut self, x: VarId, k: f64) -> VarId {
        let out = self.val(x).map(|v| v + k);
        self.record1(&[x], out, Box::new(|_, _, gs| vec![gs[0].cloned()]))
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let out = self.val(x).map(|v| v * k);
        self.record1(
            &[x],
            out,
            Box::new(move |_, _, gs| vec![gs[0].map(|g| g.map(|v| v * k))]),
        )
    }

    /// Broadcast-add a rank-0 node to every element of `x`.
    pub fn add_scalar_var(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let sv = self.rank0_value("add_scalar_var", s)?;
        let out = self.val(x).map(|v| v + sv);
        Ok(self.record1(
            &[x, s],
            out,
            Box::new(|_, _, gs| {
                vec![
                    gs[0].cloned(),
                    gs[0].map(|g| Tensor::scalar(g.data().iter().sum())),
                ]
            }),
        ))
    }

    /// Broadcast-multiply every element of `x` by a rank-0 node.
    pub fn scale_by_scalar_var(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let sv = self.rank0_value("scale_by_scalar_var", s)?;
        let out = self.val(x).map(|v| v * sv);
        Ok(self.record1(
            &[x, s],
            out,
            Box::new(move |ins, _, gs| {
                vec![
                    gs[0].map(|g| g.map(|v| v * sv)),
                    gs[0].map(|g| {
                        Tensor::scalar(
                            g.data().iter().zip(ins[0].data()).map(|(a, b)| a * b).sum(),
                        )
                    }),
                ]
            }),
        ))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let out = Tensor::scalar(self.val(x).data().iter().sum());
        self.record1(
            &[x],
            out,
            Box::new(|ins, _, gs| {
                vec![gs[0].map(|g| {
                    let gv = g.data()[0];
                    Tensor::full(ins[0].shape(), gv)
                })]
            }),
        )
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.val(x).numel() as f64;
        let out = Tensor::scalar(self.val(x).data().iter().sum::<f64>() / n);
        self.record1(
            &[x],
            out,
            Box::new(move |ins, _, gs| {
                vec![gs[0].map(|g| {
                    let gv = g.data()[0] / n;
                    Tensor::full(ins[0].shape(), gv)
                })]
            }),
        )
    }

    /// `sum(x * w)` for a constant weight tensor `w` (not a node).
    pub fn weighted_sum(&mut self, x: VarId, w: &Tensor) -> Result<VarId> {
        same_shape("weighted_sum", self.val(x), w)?;
        let out = Tensor::scalar(
            self.val(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
        );
        let w = w.clone();
        Ok(self.record1(
            &[x],
            out,
            Box::new(move |_, _, gs| {
                vec![gs[0].map(|g| {
                    let gv = g.data()[0];
                    w.map(|wv| wv * gv)
                })]
            }),
        ))
    }

    fn rank0_value(&self, op: &str, s: VarId) -> Result<f64> {
        let t = self.val(s);
        if t.rank() != 0 {
            return Err(PdssError::ShapeMismatch(format!(
                "{op}: scalar operand must be rank-0, got {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus_scalar`] (for step-size bias initialization).
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    // x = ln(e^y - 1), stable form y + ln(1 - e^{-y})
    y + (-(-y).exp()).ln_1p()
}
