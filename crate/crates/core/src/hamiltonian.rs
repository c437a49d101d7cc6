//! Reversible Hamiltonian blocks under Verlet time discretization, and the
//! full network assembly: initial convolution, units of m blocks (optionally
//! with one nonlocal block each), pooling/1x1 channel expansion between
//! units, and a classifier or dense-prediction head.

use crate::error::{PideError, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::nonlocal::{nonlocal_block_forward, BlockFamily, NonlocalBlockParams};
use crate::params::{BnBatchStats, ParamBinding, ParamKind, VisitParams};
use crate::rng::{self, Prng};
use crate::tape::{BatchNormState, Mode, NodeId, Tape};
use crate::tensor::{self, Padding, Tensor};

/// One Verlet step on a channel-partitioned state (Y, Z). The same 3x3
/// kernel is used for the convolution and its transpose within each half.
#[derive(Clone, Debug)]
pub struct HamiltonianBlock {
    pub k1: Tensor,
    pub b1: Tensor,
    pub bn1: BatchNormState,
    pub k2: Tensor,
    pub b2: Tensor,
    pub bn2: BatchNormState,
    pub h: f64,
}

impl HamiltonianBlock {
    pub fn init(half_channels: usize, h: f64, rng: &mut Prng) -> Self {
        let std = (2.0 / (9.0 * half_channels as f64)).sqrt();
        HamiltonianBlock {
            k1: rng::normal_tensor(rng, &[3, 3, half_channels, half_channels], std),
            b1: Tensor::zeros(&[half_channels]),
            bn1: BatchNormState::new(half_channels),
            k2: rng::normal_tensor(rng, &[3, 3, half_channels, half_channels], std),
            b2: Tensor::zeros(&[half_channels]),
            bn2: BatchNormState::new(half_channels),
            h,
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.bn1.mode = mode;
        self.bn2.mode = mode;
    }
}

impl VisitParams for HamiltonianBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{prefix}.k1"), ParamKind::Weight, &self.k1);
        f(&format!("{prefix}.b1"), ParamKind::Bias, &self.b1);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        f(&format!("{prefix}.k2"), ParamKind::Weight, &self.k2);
        f(&format!("{prefix}.b2"), ParamKind::Bias, &self.b2);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{prefix}.k1"), ParamKind::Weight, &mut self.k1);
        f(&format!("{prefix}.b1"), ParamKind::Bias, &mut self.b1);
        self.bn1.visit_mut(&format!("{prefix}.bn1"), f);
        f(&format!("{prefix}.k2"), ParamKind::Weight, &mut self.k2);
        f(&format!("{prefix}.b2"), ParamKind::Bias, &mut self.b2);
        self.bn2.visit_mut(&format!("{prefix}.bn2"), f);
    }
}

/// Tape-recorded Verlet step:
///   y' = y + h K1^T relu(BN(K1 z + b1))
///   z' = z - h K2^T relu(BN(K2 y' + b2))
pub fn hamiltonian_step(
    tape: &mut Tape,
    block: &HamiltonianBlock,
    binding: &mut ParamBinding,
    prefix: &str,
    y: NodeId,
    z: NodeId,
) -> Result<(NodeId, NodeId)> {
    if tape.value(y).shape() != tape.value(z).shape() {
        return Err(PideError::shape("hamiltonian_step", "y/z shape mismatch".to_string()));
    }
    let k1 = binding.bind(tape, format!("{prefix}.k1"), &block.k1);
    let b1 = binding.bind(tape, format!("{prefix}.b1"), &block.b1);
    let bn1_scale = binding.bind(tape, format!("{prefix}.bn1.scale"), &block.bn1.scale);
    let bn1_shift = binding.bind(tape, format!("{prefix}.bn1.shift"), &block.bn1.shift);
    let k2 = binding.bind(tape, format!("{prefix}.k2"), &block.k2);
    let b2 = binding.bind(tape, format!("{prefix}.b2"), &block.b2);
    let bn2_scale = binding.bind(tape, format!("{prefix}.bn2.scale"), &block.bn2.scale);
    let bn2_shift = binding.bind(tape, format!("{prefix}.bn2.shift"), &block.bn2.shift);

    let mut t = tape.conv2d(z, k1, Some(b1), Padding::Same)?;
    let (normed, stats) = tape.batchnorm(t, bn1_scale, bn1_shift, &block.bn1)?;
    if let Some((mean, var)) = stats {
        binding.record_bn_stats(BnBatchStats { name: format!("{prefix}.bn1"), mean, var });
    }
    t = tape.relu(normed);
    t = tape.conv2d_transpose(t, k1, Padding::Same)?;
    let dy = tape.scale(t, block.h);
    let y_new = tape.add(y, dy)?;

    let mut t = tape.conv2d(y_new, k2, Some(b2), Padding::Same)?;
    let (normed, stats) = tape.batchnorm(t, bn2_scale, bn2_shift, &block.bn2)?;
    if let Some((mean, var)) = stats {
        binding.record_bn_stats(BnBatchStats { name: format!("{prefix}.bn2"), mean, var });
    }
    t = tape.relu(normed);
    t = tape.conv2d_transpose(t, k2, Padding::Same)?;
    let dz = tape.scale(t, block.h);
    let z_new = tape.sub(z, dz)?;
    Ok((y_new, z_new))
}

fn half_step_raw(block: &HamiltonianBlock, which: u8, input: &Tensor) -> Tensor {
    let (k, b, bn) = match which {
        1 => (&block.k1, &block.b1, &block.bn1),
        _ => (&block.k2, &block.b2, &block.bn2),
    };
    let s = input.shape();
    let (bt, h, w, c) = (s[0], s[1], s[2], s[3]);
    let conv = tensor::conv2d_raw(input.data(), (bt, h, w, c), k.data(), (3, c), Some(b.data()), 1);
    let normed = tensor::bn_apply(
        &conv,
        c,
        bn.running_mean.data(),
        bn.running_var.data(),
        bn.scale.data(),
        bn.shift.data(),
        bn.epsilon,
    );
    let act = tensor::relu_raw(&normed);
    let out = tensor::conv2d_transpose_raw(&act, (bt, h, w, c), k.data(), (3, c), 1);
    Tensor::from_vec(s, out).unwrap()
}

/// Raw eval-mode forward step, used by the reversibility checks.
pub fn hamiltonian_step_raw(block: &HamiltonianBlock, y: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
    if block.bn1.mode == Mode::Train || block.bn2.mode == Mode::Train {
        return Err(PideError::InvalidArgument(
            "raw hamiltonian step requires eval-mode batch normalization".into(),
        ));
    }
    let f1 = half_step_raw(block, 1, z);
    let y_new = Tensor::from_vec(y.shape(), y.data().iter().zip(f1.data()).map(|(a, b)| a + block.h * b).collect())?;
    let f2 = half_step_raw(block, 2, &y_new);
    let z_new = Tensor::from_vec(z.shape(), z.data().iter().zip(f2.data()).map(|(a, b)| a - block.h * b).collect())?;
    Ok((y_new, z_new))
}

/// Algebraic inverse of the Verlet step:
///   z = z' + h K2^T relu(BN(K2 y' + b2))
///   y = y' - h K1^T relu(BN(K1 z + b1))
/// Requires eval-mode BN; train-mode batch statistics are not invertible
/// without caching them.
pub fn hamiltonian_step_inverse(block: &HamiltonianBlock, y_new: &Tensor, z_new: &Tensor) -> Result<(Tensor, Tensor)> {
    if block.bn1.mode == Mode::Train || block.bn2.mode == Mode::Train {
        return Err(PideError::InvalidArgument(
            "hamiltonian_step_inverse requires eval-mode batch normalization".into(),
        ));
    }
    let f2 = half_step_raw(block, 2, y_new);
    let z = Tensor::from_vec(
        z_new.shape(),
        z_new.data().iter().zip(f2.data()).map(|(a, b)| a + block.h * b).collect(),
    )?;
    let f1 = half_step_raw(block, 1, &z);
    let y = Tensor::from_vec(
        y_new.shape(),
        y_new.data().iter().zip(f1.data()).map(|(a, b)| a - block.h * b).collect(),
    )?;
    Ok((y, z))
}

// ── Network assembly ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classifier { classes: usize },
    Dense { classes: usize },
}

impl HeadKind {
    pub fn classes(self) -> usize {
        match self {
            HeadKind::Classifier { classes } | HeadKind::Dense { classes } => classes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NonlocalConfig {
    pub family: BlockFamily,
    pub kernel: KernelFamily,
    pub stages: usize,
    /// Subsample pool size per unit.
    pub pools: Vec<usize>,
    pub lambda: f64,
    pub s: f64,
    pub n: u32,
    pub include_constant: bool,
    /// Nonlocal block sits after this (1-based) Hamiltonian block; clamped
    /// to the unit length.
    pub after_block: usize,
}

impl NonlocalConfig {
    pub fn new(family: BlockFamily) -> Self {
        NonlocalConfig {
            family,
            kernel: family.default_kernel(),
            stages: 2,
            pools: vec![2, 2, 2],
            lambda: 0.1,
            s: 0.5,
            n: 2,
            include_constant: true,
            after_block: 2,
        }
    }

    pub fn spec(&self) -> KernelSpec {
        KernelSpec {
            family: self.kernel,
            lambda: self.lambda,
            s: self.s,
            n: self.n,
            include_constant: self.include_constant,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkConfig {
    pub units: usize,
    pub blocks_per_unit: usize,
    pub channels: Vec<usize>,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub head: HeadKind,
    pub pool_between_units: bool,
    pub step_size: f64,
    pub nonlocal: Option<NonlocalConfig>,
}

impl NetworkConfig {
    /// The benchmark-image defaults: three units, channels {32,64,112},
    /// initial convolution with 32 filters, classifier head.
    pub fn benchmark(m: usize, classes: usize) -> Self {
        NetworkConfig {
            units: 3,
            blocks_per_unit: m,
            channels: vec![32, 64, 112],
            input_channels: 3,
            input_hw: (32, 32),
            head: HeadKind::Classifier { classes },
            pool_between_units: true,
            step_size: 0.05,
            nonlocal: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.blocks_per_unit == 0 {
            return Err(PideError::Config("units and blocks_per_unit must be positive".into()));
        }
        if self.channels.len() != self.units {
            return Err(PideError::Config(format!(
                "{} channel widths for {} units",
                self.channels.len(),
                self.units
            )));
        }
        if let Some(&bad) = self.channels.iter().find(|&&c| c % 2 != 0 || c == 0) {
            return Err(PideError::Config(format!(
                "channel width {} not partitionable into halves",
                bad
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(PideError::Config("step size must be positive".into()));
        }
        if let Some(nl) = &self.nonlocal {
            if nl.pools.len() != self.units {
                return Err(PideError::Config("one nonlocal pool size per unit required".into()));
            }
            if nl.stages == 0 {
                return Err(PideError::Config("nonlocal stages must be >= 1".into()));
            }
        }
        if matches!(self.head, HeadKind::Classifier { .. }) && !self.pool_between_units {
            return Err(PideError::Config("classifier head requires inter-unit pooling".into()));
        }
        Ok(())
    }

    /// Named layer count: initial convolution + 4 convolutions per
    /// Hamiltonian block + the head; inter-unit expansions and the nonlocal
    /// blocks' 1x1 mixings are not counted, matching the naming convention
    /// that makes the m-block three-unit classifier a (12m+2)-layer network.
    pub fn layer_count(&self) -> usize {
        1 + 4 * self.blocks_per_unit * self.units + 1
    }

    /// Spatial size entering each unit (halved by pooling between units).
    pub fn unit_spatial(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = self.input_hw;
        let mut out = Vec::with_capacity(self.units);
        for u in 0..self.units {
            out.push((h, w));
            if self.pool_between_units && u + 1 < self.units {
                h /= 2;
                w /= 2;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl VisitParams for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{prefix}.w"), ParamKind::Weight, &self.weight);
        f(&format!("{prefix}.b"), ParamKind::Bias, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{prefix}.w"), ParamKind::Weight, &mut self.weight);
        f(&format!("{prefix}.b"), ParamKind::Bias, &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Unit {
    pub blocks: Vec<HamiltonianBlock>,
    pub nonlocal: Option<NonlocalBlockParams>,
    pub nonlocal_after: usize,
}

#[derive(Clone, Debug)]
pub enum Head {
    Classifier { w: Tensor, b: Tensor },
    Dense { conv: ConvLayer },
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub input_conv: ConvLayer,
    pub units: Vec<Unit>,
    pub transitions: Vec<ConvLayer>,
    pub head: Head,
}

/// Builds a network with deterministic fan-in-scaled normal initialization.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = rng::child(seed, 0x1517);
    let c0 = cfg.channels[0];
    let std0 = (2.0 / (9.0 * cfg.input_channels as f64)).sqrt();
    let input_conv = ConvLayer {
        weight: rng::normal_tensor(&mut rng, &[3, 3, cfg.input_channels, c0], std0),
        bias: Tensor::zeros(&[c0]),
    };

    let spatial = cfg.unit_spatial();
    let mut units = Vec::with_capacity(cfg.units);
    for u in 0..cfg.units {
        let c = cfg.channels[u];
        let blocks: Vec<HamiltonianBlock> = (0..cfg.blocks_per_unit)
            .map(|_| HamiltonianBlock::init(c / 2, cfg.step_size, &mut rng))
            .collect();
        let (nonlocal, after) = match &cfg.nonlocal {
            Some(nl) => {
                let (h, w) = spatial[u];
                let pool = nl.pools[u].min(h).min(w).max(1);
                let params = NonlocalBlockParams::init(
                    nl.family,
                    nl.spec(),
                    c,
                    cfg.step_size,
                    nl.stages,
                    pool,
                    false,
                    &mut rng,
                )?;
                (Some(params), nl.after_block.min(cfg.blocks_per_unit))
            }
            None => (None, 0),
        };
        units.push(Unit { blocks, nonlocal, nonlocal_after: after });
    }

    let mut transitions = Vec::new();
    for u in 0..cfg.units.saturating_sub(1) {
        let (cin, cout) = (cfg.channels[u], cfg.channels[u + 1]);
        let std = (2.0 / cin as f64).sqrt();
        transitions.push(ConvLayer {
            weight: rng::normal_tensor(&mut rng, &[1, 1, cin, cout], std),
            bias: Tensor::zeros(&[cout]),
        });
    }

    let head = match cfg.head {
        HeadKind::Classifier { classes } => {
            let (h, w) = spatial[cfg.units - 1];
            let d = (h / 2) * (w / 2) * cfg.channels[cfg.units - 1];
            let std = (1.0 / d as f64).sqrt();
            Head::Classifier {
                w: rng::normal_tensor(&mut rng, &[d, classes], std),
                b: Tensor::zeros(&[classes]),
            }
        }
        HeadKind::Dense { classes } => {
            let cin = cfg.channels[cfg.units - 1];
            let std = (2.0 / cin as f64).sqrt();
            Head::Dense {
                conv: ConvLayer {
                    weight: rng::normal_tensor(&mut rng, &[1, 1, cin, classes], std),
                    bias: Tensor::zeros(&[classes]),
                },
            }
        }
    };

    Ok(Network { cfg: cfg.clone(), input_conv, units, transitions, head })
}

impl Network {
    pub fn set_mode(&mut self, mode: Mode) {
        for unit in &mut self.units {
            for block in &mut unit.blocks {
                block.set_mode(mode);
            }
            if let Some(nl) = &mut unit.nonlocal {
                nl.set_mode(mode);
            }
        }
    }

    pub fn layer_count(&self) -> usize {
        self.cfg.layer_count()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("net", &mut |_, kind, t| {
            if kind.trainable() {
                n += t.len();
            }
        });
        n
    }

    /// Forward pass; records onto the tape and returns the logits node plus
    /// the parameter binding carrying gradients handles and observed batch
    /// statistics. The network itself is not mutated; fold the binding's
    /// statistics back with [`Network::apply_bn_updates`] when training.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, ParamBinding)> {
        let mut binding = ParamBinding::new();
        let s = tape.value(x).shape().to_vec();
        if s.len() != 4 || s[3] != self.cfg.input_channels {
            return Err(PideError::shape(
                "network forward",
                format!("{:?} (want B,H,W,{})", s, self.cfg.input_channels),
            ));
        }
        let w0 = binding.bind(tape, "input_conv.w", &self.input_conv.weight);
        let b0 = binding.bind(tape, "input_conv.b", &self.input_conv.bias);
        let mut t = tape.conv2d(x, w0, Some(b0), Padding::Same)?;

        let n_units = self.units.len();
        for u in 0..n_units {
            let unit = &self.units[u];
            for (bi, block) in unit.blocks.iter().enumerate() {
                let c = tape.value(t).shape()[3];
                let y = tape.slice_last(t, 0, c / 2)?;
                let z = tape.slice_last(t, c / 2, c)?;
                let (y2, z2) = hamiltonian_step(tape, block, &mut binding, &format!("unit{u}.block{bi}"), y, z)?;
                t = tape.concat_last(y2, z2)?;
                if let Some(nl) = &unit.nonlocal {
                    if unit.nonlocal_after == bi + 1 {
                        t = nonlocal_block_forward(tape, nl, &mut binding, &format!("unit{u}.nl"), t)?;
                    }
                }
            }
            if u + 1 < n_units {
                if self.cfg.pool_between_units {
                    t = tape.avg_pool(t, 2)?;
                }
                let tr = &self.transitions[u];
                let w = binding.bind(tape, format!("transition{u}.w"), &tr.weight);
                let b = binding.bind(tape, format!("transition{u}.b"), &tr.bias);
                t = tape.conv2d(t, w, Some(b), Padding::Same)?;
                t = tape.relu(t);
            }
        }

        let logits = match &self.head {
            Head::Classifier { w, b } => {
                t = tape.avg_pool(t, 2)?;
                let s = tape.value(t).shape().to_vec();
                let d = s[1] * s[2] * s[3];
                if d != w.shape()[0] {
                    return Err(PideError::shape(
                        "classifier head",
                        format!("flattened {} vs head {}", d, w.shape()[0]),
                    ));
                }
                let flat = tape.reshape(t, &[s[0], d])?;
                let wid = binding.bind(tape, "head.w", w);
                let bid = binding.bind(tape, "head.b", b);
                let prod = tape.matmul(flat, wid)?;
                let brow = tape.reshape(bid, &[1, tape.value(bid).len()])?;
                broadcast_add_rows(tape, prod, brow)?
            }
            Head::Dense { conv } => {
                let wid = binding.bind(tape, "head.w", &conv.weight);
                let bid = binding.bind(tape, "head.b", &conv.bias);
                tape.conv2d(t, wid, Some(bid), Padding::Same)?
            }
        };
        tape.value(logits).check_finite("logits")?;
        Ok((logits, binding))
    }

    /// Convenience eval-mode forward returning plain logits.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        self.set_mode(Mode::Eval);
        let mut tape = Tape::new();
        let xid = tape.input(x.clone())?;
        let (logits, _) = self.forward(&mut tape, xid)?;
        Ok(tape.value(logits).clone())
    }

    /// Walks every batch-normalization state with its structural name.
    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&str, &mut BatchNormState)) {
        for (u, unit) in self.units.iter_mut().enumerate() {
            for (bi, block) in unit.blocks.iter_mut().enumerate() {
                f(&format!("unit{u}.block{bi}.bn1"), &mut block.bn1);
                f(&format!("unit{u}.block{bi}.bn2"), &mut block.bn2);
            }
            if let Some(nl) = &mut unit.nonlocal {
                if let Some(bn) = &mut nl.k1.bn {
                    f(&format!("unit{u}.nl.k1.bn"), bn);
                }
                if let Some(bn) = &mut nl.k2.bn {
                    f(&format!("unit{u}.nl.k2.bn"), bn);
                }
            }
        }
    }

    /// Folds observed batch statistics into the running averages, in the
    /// order they were recorded.
    pub fn apply_bn_updates(&mut self, stats: &[BnBatchStats]) {
        use std::collections::BTreeMap;
        let mut by_name: BTreeMap<&str, Vec<&BnBatchStats>> = BTreeMap::new();
        for s in stats {
            by_name.entry(&s.name).or_default().push(s);
        }
        self.visit_bn_mut(&mut |name, state| {
            if let Some(list) = by_name.get(name) {
                for s in list {
                    state.fold_batch_stats(&s.mean, &s.var);
                }
            }
        });
    }
}

/// logits (B,k) + bias (1,k): broadcast add via concat-free trick. The bias
/// row participates in the tape so its gradient accumulates.
fn broadcast_add_rows(tape: &mut Tape, x: NodeId, bias_row: NodeId) -> Result<NodeId> {
    let s = tape.value(x).shape().to_vec();
    let b = s[0];
    // ones (B,1) @ bias (1,k) replicates the row differentiably
    let ones = tape.leaf(Tensor::filled(&[b, 1], 1.0));
    let tiled = tape.matmul(ones, bias_row)?;
    tape.add(x, tiled)
}

impl VisitParams for Network {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.input_conv.visit("input_conv", f);
        for (u, unit) in self.units.iter().enumerate() {
            for (bi, block) in unit.blocks.iter().enumerate() {
                block.visit(&format!("unit{u}.block{bi}"), f);
            }
            if let Some(nl) = &unit.nonlocal {
                nl.visit(&format!("unit{u}.nl"), f);
            }
        }
        for (u, tr) in self.transitions.iter().enumerate() {
            tr.visit(&format!("transition{u}"), f);
        }
        match &self.head {
            Head::Classifier { w, b } => {
                f("head.w", ParamKind::Weight, w);
                f("head.b", ParamKind::Bias, b);
            }
            Head::Dense { conv } => conv.visit("head", f),
        }
    }
    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.input_conv.visit_mut("input_conv", f);
        for (u, unit) in self.units.iter_mut().enumerate() {
            for (bi, block) in unit.blocks.iter_mut().enumerate() {
                block.visit_mut(&format!("unit{u}.block{bi}"), f);
            }
            if let Some(nl) = &mut unit.nonlocal {
                nl.visit_mut(&format!("unit{u}.nl"), f);
            }
        }
        for (u, tr) in self.transitions.iter_mut().enumerate() {
            tr.visit_mut(&format!("transition{u}"), f);
        }
        match &mut self.head {
            Head::Classifier { w, b } => {
                f("head.w", ParamKind::Weight, w);
                f("head.b", ParamKind::Bias, b);
            }
            Head::Dense { conv } => conv.visit_mut("head", f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_block(half: usize, h: f64, seed: u64) -> HamiltonianBlock {
        let mut rng = rng::seeded(seed);
        let mut block = HamiltonianBlock::init(half, h, &mut rng);
        // random running statistics so eval-mode BN is nontrivial
        block.bn1.running_mean = rng::normal_tensor(&mut rng, &[half], 0.3);
        block.bn1.running_var = rng::uniform_tensor(&mut rng, &[half], 0.5, 2.0);
        block.bn2.running_mean = rng::normal_tensor(&mut rng, &[half], 0.3);
        block.bn2.running_var = rng::uniform_tensor(&mut rng, &[half], 0.5, 2.0);
        block.set_mode(Mode::Eval);
        block
    }

    #[test]
    fn zero_step_and_zero_weights_are_identity() {
        let mut rng = rng::seeded(1);
        let y = rng::normal_tensor(&mut rng, &[1, 4, 4, 2], 1.0);
        let z = rng::normal_tensor(&mut rng, &[1, 4, 4, 2], 1.0);
        let mut block = random_block(2, 0.0, 2);
        let (y2, z2) = hamiltonian_step_raw(&block, &y, &z).unwrap();
        assert_eq!(y2.data(), y.data());
        assert_eq!(z2.data(), z.data());

        block.h = 0.1;
        block.k1 = Tensor::zeros(&[3, 3, 2, 2]);
        block.k2 = Tensor::zeros(&[3, 3, 2, 2]);
        let (y2, z2) = hamiltonian_step_raw(&block, &y, &z).unwrap();
        assert_eq!(y2.data(), y.data());
        assert_eq!(z2.data(), z.data());
    }

    #[test]
    fn inverse_round_trips_both_ways() {
        let mut rng = rng::seeded(3);
        for seed in 0..20 {
            let block = random_block(4, 0.05, 100 + seed);
            let y = rng::normal_tensor(&mut rng, &[2, 5, 5, 4], 1.0);
            let z = rng::normal_tensor(&mut rng, &[2, 5, 5, 4], 1.0);
            let (y2, z2) = hamiltonian_step_raw(&block, &y, &z).unwrap();
            let (yr, zr) = hamiltonian_step_inverse(&block, &y2, &z2).unwrap();
            assert!(yr.max_abs_diff(&y) < 1e-10 && zr.max_abs_diff(&z) < 1e-10);
            // forward(inverse) == identity as well
            let (yi, zi) = hamiltonian_step_inverse(&block, &y, &z).unwrap();
            let (yf, zf) = hamiltonian_step_raw(&block, &yi, &zi).unwrap();
            assert!(yf.max_abs_diff(&y) < 1e-10 && zf.max_abs_diff(&z) < 1e-10);
        }
    }

    #[test]
    fn inverse_rejects_train_mode() {
        let mut block = random_block(2, 0.05, 7);
        block.set_mode(Mode::Train);
        let y = Tensor::zeros(&[1, 3, 3, 2]);
        assert!(hamiltonian_step_inverse(&block, &y, &y).is_err());
    }

    #[test]
    fn energy_drift_scales_with_step_size() {
        let mut rng = rng::seeded(9);
        let y = rng::normal_tensor(&mut rng, &[1, 4, 4, 4], 1.0);
        let z = rng::normal_tensor(&mut rng, &[1, 4, 4, 4], 1.0);
        let energy = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().map(|v| v * v).sum::<f64>() + b.data().iter().map(|v| v * v).sum::<f64>()
        };
        let e0 = energy(&y, &z);
        let drift = |h: f64| -> f64 {
            let mut block = random_block(4, h, 11);
            block.h = h;
            let (y2, z2) = hamiltonian_step_raw(&block, &y, &z).unwrap();
            (energy(&y2, &z2) - e0).abs()
        };
        let ratio = drift(0.1) / drift(0.01);
        assert!((5.0..20.0).contains(&ratio), "drift ratio {}", ratio);
    }

    #[test]
    fn layer_count_formula() {
        for m in 1..=8 {
            let cfg = NetworkConfig::benchmark(m, 10);
            assert_eq!(cfg.layer_count(), 12 * m + 2);
        }
        assert_eq!(NetworkConfig::benchmark(6, 10).layer_count(), 74);
        assert_eq!(NetworkConfig::benchmark(2, 10).layer_count(), 26);
    }

    #[test]
    fn classifier_shape_walk() {
        let mut cfg = NetworkConfig::benchmark(1, 10);
        cfg.channels = vec![4, 6, 8];
        let mut net = build_network(&cfg, 5).unwrap();
        let mut rng = rng::seeded(6);
        let x = rng::normal_tensor(&mut rng, &[2, 32, 32, 3], 1.0);
        let logits = net.predict(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
    }

    #[test]
    fn dense_head_shape_and_default_twenty_filters() {
        let mut cfg = NetworkConfig::benchmark(1, 10);
        cfg.channels = vec![4, 6, 8];
        cfg.head = HeadKind::Dense { classes: 20 };
        cfg.pool_between_units = false;
        cfg.input_hw = (8, 12);
        let mut net = build_network(&cfg, 5).unwrap();
        let mut rng = rng::seeded(6);
        let x = rng::normal_tensor(&mut rng, &[2, 8, 12, 3], 1.0);
        let logits = net.predict(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 8, 12, 20]);
    }

    #[test]
    fn identical_inputs_give_identical_logits_and_batch_permutes() {
        let mut cfg = NetworkConfig::benchmark(1, 4);
        cfg.channels = vec![4, 6, 8];
        cfg.nonlocal = Some(NonlocalConfig::new(BlockFamily::Diffusion));
        let mut net = build_network(&cfg, 8).unwrap();
        let mut rng = rng::seeded(9);
        let a = rng::normal_tensor(&mut rng, &[1, 32, 32, 3], 1.0);
        let b = rng::normal_tensor(&mut rng, &[1, 32, 32, 3], 1.0);
        let mut ab = Vec::new();
        ab.extend_from_slice(a.data());
        ab.extend_from_slice(b.data());
        let mut ba = Vec::new();
        ba.extend_from_slice(b.data());
        ba.extend_from_slice(a.data());
        let labs = net.predict(&Tensor::from_vec(&[2, 32, 32, 3], ab).unwrap()).unwrap();
        let lbas = net.predict(&Tensor::from_vec(&[2, 32, 32, 3], ba).unwrap()).unwrap();
        let k = 4;
        for j in 0..k {
            assert!((labs.data()[j] - lbas.data()[k + j]).abs() < 1e-12);
            assert!((labs.data()[k + j] - lbas.data()[j]).abs() < 1e-12);
        }
        // identical rows give identical logits
        let mut aa = Vec::new();
        aa.extend_from_slice(a.data());
        aa.extend_from_slice(a.data());
        let laa = net.predict(&Tensor::from_vec(&[2, 32, 32, 3], aa).unwrap()).unwrap();
        for j in 0..k {
            assert!((laa.data()[j] - laa.data()[k + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_make_logits_input_independent() {
        let mut cfg = NetworkConfig::benchmark(1, 3);
        cfg.channels = vec![4, 6, 8];
        let mut net = build_network(&cfg, 10).unwrap();
        net.visit_mut("net", &mut |_, kind, t| {
            if kind == ParamKind::Weight || kind == ParamKind::Bias {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        });
        let mut rng = rng::seeded(11);
        let x1 = rng::normal_tensor(&mut rng, &[1, 32, 32, 3], 1.0);
        let x2 = rng::normal_tensor(&mut rng, &[1, 32, 32, 3], 5.0);
        let l1 = net.predict(&x1).unwrap();
        let l2 = net.predict(&x2).unwrap();
        assert_eq!(l1.data(), l2.data());
    }

    #[test]
    fn odd_channel_width_rejected() {
        let mut cfg = NetworkConfig::benchmark(1, 10);
        cfg.channels = vec![5, 6, 8];
        assert!(build_network(&cfg, 0).is_err());
    }
}
