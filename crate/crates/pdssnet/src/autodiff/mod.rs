//! Minimal reverse-mode tape.
//!
//! A [`Tape`] records a DAG of tensor-valued operations as they execute.
//! Every node is a [`VarId`]; leaves are created with [`Tape::var`] and
//! interior nodes by the op methods (see [`ops`], [`nn`], [`scan_op`]).
//! Ops may have multiple outputs (the scan emits its output sequence, its
//! state trajectory, and its final state as three nodes of one record).
//!
//! [`Tape::backward`] seeds a rank-0 loss node with gradient 1 and sweeps
//! the records in reverse, calling each op's vector-Jacobian closure with
//! the recorded input values, output values, and accumulated output
//! gradients. Gradients are accumulated for *every* node; callers read the
//! ones they care about (trainable leaves) and ignore the rest. The sweep
//! is sequential and allocation order is deterministic, so gradients are
//! byte-stable run to run.

mod elementwise;
mod nn;
mod scan_op;
mod structure;

pub use scan_op::{ScanOutputsVar, ScanSpec};
pub(crate) use elementwise::{softplus_inverse, softplus_scalar};

use crate::error::{PdssError, Result};
use crate::grid::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// VJP closure: `(input values, output values, output gradients)` to
/// per-input gradient contributions (`None` = structurally zero).
/// An output gradient is `None` when nothing downstream used that output.
pub type VjpFn =
    Box<dyn Fn(&[&Tensor], &[&Tensor], &[Option<&Tensor>]) -> Vec<Option<Tensor>> + Send + Sync>;

struct OpRecord {
    inputs: Vec<VarId>,
    outputs: Vec<VarId>,
    vjp: VjpFn,
}

/// Recorded computation graph. See module docs.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<OpRecord>,
}

/// Result of a backward sweep: one optional gradient per node.
pub struct Gradients {
    g: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the swept loss w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }

    /// Gradient of `v`, materializing zeros of the given shape when no
    /// path reached it.
    pub fn get_or_zeros(&self, v: VarId, shape: &[usize]) -> Tensor {
        match self.g[v.0].as_ref() {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Create a leaf node holding `t`. Used for trainable parameters,
    /// inputs, and constants alike — gradients are computed for all of
    /// them and simply not read for constants.
    pub fn var(&mut self, t: Tensor) -> VarId {
        self.vals.push(t);
        VarId(self.vals.len() - 1)
    }

    /// Value of a node.
    pub fn val(&self, v: VarId) -> &Tensor {
        &self.vals[v.0]
    }

    /// Record one op: its already-computed outputs become new nodes and the
    /// closure computes input gradients during the backward sweep.
    pub(crate) fn record(
        &mut self,
        inputs: &[VarId],
        outputs: Vec<Tensor>,
        vjp: VjpFn,
    ) -> Vec<VarId> {
        let ids: Vec<VarId> = outputs.into_iter().map(|t| self.var(t)).collect();
        self.ops.push(OpRecord {
            inputs: inputs.to_vec(),
            outputs: ids.clone(),
            vjp,
        });
        ids
    }

    /// Single-output convenience over [`Tape::record`].
    pub(crate) fn record1(&mut self, inputs: &[VarId], output: Tensor, vjp: VjpFn) -> VarId {
        self.record(inputs, vec![output], vjp)[0]
    }

    /// Reverse sweep from a rank-0 loss node. Returns per-node gradients.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.val(loss).rank() != 0 {
            return Err(PdssError::InvalidArgument(format!(
                "backward needs a rank-0 loss node, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut g: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        g[loss.0] = Some(Tensor::scalar(1.0));
        for op in self.ops.iter().rev() {
            if op.outputs.iter().all(|o| g[o.0].is_none()) {
                continue;
            }
            let in_vals: Vec<&Tensor> = op.inputs.iter().map(|i| &self.vals[i.0]).collect();
            let out_vals: Vec<&Tensor> = op.outputs.iter().map(|o| &self.vals[o.0]).collect();
            let out_grads: Vec<Option<&Tensor>> =
                op.outputs.iter().map(|o| g[o.0].as_ref()).collect();
            let contribs = (op.vjp)(&in_vals, &out_vals, &out_grads);
            debug_assert_eq!(contribs.len(), op.inputs.len());
            for (slot, contrib) in op.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(
                    c.shape(),
                    self.vals[slot.0].shape(),
                    "gradient shape must match the node value"
                );
                match &mut g[slot.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    None => g[slot.0] = Some(c),
                }
            }
        }
        for gv in g.iter().flatten() {
            if !gv.is_finite() {
                return Err(PdssError::NonFinite(
                    "backward sweep produced a non-finite gradient".into(),
                ));
            }
        }
        Ok(Gradients { g })
    }
}
