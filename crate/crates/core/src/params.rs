//! Naming and bookkeeping glue between persistent parameter structs, their
//! tape leaves during one forward pass, and the optimizer.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// What role a persistent tensor plays. `Weight` tensors carry L2 weight
/// decay; running statistics are buffers that never receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

/// Structured enumeration of every persistent tensor in a model component.
pub trait VisitParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));
}

/// Per-layer batch statistics observed during one train-mode forward pass;
/// folded into the running averages afterwards, in recording order.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Records which tape leaf each named parameter was bound to during one
/// forward pass, so gradients can be collected by name afterwards. Also
/// accumulates the batch-norm statistics the pass observed.
#[derive(Default)]
pub struct ParamBinding {
    entries: Vec<(String, NodeId)>,
    bn_stats: Vec<BnBatchStats>,
}

impl ParamBinding {
    pub fn new() -> Self {
        ParamBinding::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: impl Into<String>, value: &Tensor) -> NodeId {
        let id = tape.leaf(value.clone());
        self.entries.push((name.into(), id));
        id
    }

    /// Registers an existing node under a name (for reused leaves).
    pub fn alias(&mut self, name: impl Into<String>, id: NodeId) {
        self.entries.push((name.into(), id));
    }

    pub fn entries(&self) -> &[(String, NodeId)] {
        &self.entries
    }

    pub fn record_bn_stats(&mut self, stats: BnBatchStats) {
        self.bn_stats.push(stats);
    }

    pub fn bn_stats(&self) -> &[BnBatchStats] {
        &self.bn_stats
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    /// Gradients keyed by parameter name after a backward pass. Disconnected
    /// parameters are absent (their gradient is zero).
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.entries {
            if let Some(g) = tape.grad(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
