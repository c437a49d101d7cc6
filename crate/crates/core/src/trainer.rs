//! Loss with both regularizers, SGD with momentum, the learning-rate
//! schedule, and the training loop with metrics and checkpointing hooks.

use crate::data::Dataset;
use crate::error::{PideError, Result};
use crate::hamiltonian::Network;
use crate::params::{ParamBinding, ParamKind, VisitParams};
use crate::rng;
use crate::tape::{Mode, NodeId, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct RegularizerConfig {
    /// L2 weight-decay coefficient.
    pub alpha1: f64,
    /// Smoothness-in-depth coefficient.
    pub alpha2: f64,
    /// Step size entering the smoothness difference quotient.
    pub h: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig { alpha1: 2e-4, alpha2: 1e-8, h: 0.05 }
    }
}

/// (alpha1/2) * sum of squared Frobenius norms.
pub fn reg_l2(weights: &[&Tensor], alpha1: f64) -> f64 {
    let ss: f64 = weights
        .iter()
        .map(|w| w.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    0.5 * alpha1 * ss
}

/// alpha2 * h * sum over consecutive block pairs of |(K_j - K_{j+1})/h|_F^2.
/// The caller passes the per-block weight lists in depth order.
pub fn reg_smooth(blocks: &[Vec<&Tensor>], alpha2: f64, h: f64) -> f64 {
    let mut acc = 0.0;
    for pair in blocks.windows(2) {
        for (a, b) in pair[0].iter().zip(pair[1].iter()) {
            let ss: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            acc += ss;
        }
    }
    alpha2 * acc / h
}

/// Scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub cross_entropy: f64,
    pub r1: f64,
    pub r2: f64,
    pub total: f64,
}

/// Builds the training objective on the tape:
///
///   loss = (1/2) mean-CE + R1 + R2
///
/// R1 decays every Weight-kind parameter bound in this pass (Hamiltonian and
/// nonlocal convolutions alike, plus the head); R2 penalizes differences of
/// consecutive Hamiltonian blocks within a unit and skips nonlocal blocks.
pub fn training_loss(
    tape: &mut Tape,
    net: &Network,
    binding: &ParamBinding,
    logits: NodeId,
    labels: &[usize],
    reg: &RegularizerConfig,
) -> Result<(NodeId, LossParts)> {
    shard_objective(tape, net, binding, logits, labels, reg, 1.0, true)
}

/// Objective for one batch shard: the cross-entropy term gets the shard's
/// share of the batch mean, and only one shard carries the regularizers so
/// shard contributions sum to the whole-batch objective.
#[allow(clippy::too_many_arguments)]
fn shard_objective(
    tape: &mut Tape,
    net: &Network,
    binding: &ParamBinding,
    logits: NodeId,
    labels: &[usize],
    reg: &RegularizerConfig,
    ce_weight: f64,
    include_reg: bool,
) -> Result<(NodeId, LossParts)> {
    let ce = tape.mean_ce_logits(logits, labels)?;
    let ce_val = tape.value(ce).item();
    let mut total = tape.scale(ce, 0.5 * ce_weight);

    let reg = if include_reg {
        *reg
    } else {
        RegularizerConfig { alpha1: 0.0, alpha2: 0.0, ..*reg }
    };
    let reg = &reg;
    let mut r1_val = 0.0;
    if reg.alpha1 > 0.0 {
        let mut acc: Option<NodeId> = None;
        let mut weight_names: Vec<String> = Vec::new();
        net.visit("net", &mut |name, kind, _| {
            if kind == ParamKind::Weight {
                weight_names.push(name.to_string());
            }
        });
        for name in &weight_names {
            let id = binding
                .node(name)
                .ok_or_else(|| PideError::InvalidArgument(format!("weight {name} not bound")))?;
            let ss = tape.sum_squares(id);
            acc = Some(match acc {
                Some(a) => tape.add(a, ss)?,
                None => ss,
            });
        }
        if let Some(a) = acc {
            let r1 = tape.scale(a, 0.5 * reg.alpha1);
            r1_val = tape.value(r1).item();
            total = tape.add(total, r1)?;
        }
    }

    let mut r2_val = 0.0;
    if reg.alpha2 > 0.0 && net.cfg.blocks_per_unit >= 2 {
        let mut acc: Option<NodeId> = None;
        for u in 0..net.cfg.units {
            for b in 0..net.cfg.blocks_per_unit - 1 {
                for k in ["k1", "k2"] {
                    let a_id = binding.node(&format!("unit{u}.block{b}.{k}"));
                    let b_id = binding.node(&format!("unit{u}.block{}.{k}", b + 1));
                    let (Some(a_id), Some(b_id)) = (a_id, b_id) else { continue };
                    let d = tape.sub(a_id, b_id)?;
                    let ss = tape.sum_squares(d);
                    acc = Some(match acc {
                        Some(prev) => tape.add(prev, ss)?,
                        None => ss,
                    });
                }
            }
        }
        if let Some(a) = acc {
            // alpha2 * h * |dK/h|^2 = (alpha2/h) |dK|^2
            let r2 = tape.scale(a, reg.alpha2 / reg.h);
            r2_val = tape.value(r2).item();
            total = tape.add(total, r2)?;
        }
    }

    let total_val = tape.value(total).item();
    if !total_val.is_finite() {
        return Err(PideError::Diverged(format!("loss is {total_val}")));
    }
    Ok((
        total,
        LossParts { cross_entropy: ce_val, r1: r1_val, r2: r2_val, total: total_val },
    ))
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// SGD with classical momentum: v <- mu v + g, p <- p - lr v.
#[derive(Clone, Debug)]
pub struct SgdOptimizer {
    pub momentum: f64,
    pub velocities: BTreeMap<String, Tensor>,
}

impl SgdOptimizer {
    pub fn new(momentum: f64) -> Self {
        SgdOptimizer { momentum, velocities: BTreeMap::new() }
    }

    pub fn step(&mut self, net: &mut Network, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let mu = self.momentum;
        let velocities = &mut self.velocities;
        net.visit_mut("net", &mut |name, kind, t| {
            if !kind.trainable() {
                return;
            }
            let v = velocities
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(t.shape()));
            match grads.get(name) {
                Some(g) => {
                    for ((vv, p), gg) in v.data_mut().iter_mut().zip(t.data_mut()).zip(g.data()) {
                        *vv = mu * *vv + gg;
                        *p -= lr * *vv;
                    }
                }
                None => {
                    // disconnected parameter: zero gradient, velocity decays
                    for (vv, p) in v.data_mut().iter_mut().zip(t.data_mut()) {
                        *vv *= mu;
                        *p -= lr * *vv;
                    }
                }
            }
        });
    }
}

// ── Learning-rate schedule ──────────────────────────────────────────────

/// Warmup at `warmup` for epoch 0, then `base`, divided by ten after each
/// breakpoint epoch.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub warmup: f64,
    pub base: f64,
    pub breakpoints: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { warmup: 0.01, base: 0.1, breakpoints: vec![80, 120, 160, 180] }
    }
}

impl LrSchedule {
    /// Desk-scale runs compress the breakpoints proportionally to the run
    /// length (the reference schedule spans 200 epochs).
    pub fn rescaled(total_epochs: usize) -> Self {
        let std = LrSchedule::default();
        if total_epochs >= 200 {
            return std;
        }
        let breakpoints = std
            .breakpoints
            .iter()
            .map(|&b| (((b * total_epochs) as f64 / 200.0).round() as usize).max(1))
            .collect();
        LrSchedule { breakpoints, ..std }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch == 0 {
            return self.warmup;
        }
        let drops = self.breakpoints.iter().filter(|&&b| b < epoch).count();
        self.base * 0.1f64.powi(drops as i32)
    }
}

// ── Training loop ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub reg: RegularizerConfig,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch: 100,
            seed: 0,
            reg: RegularizerConfig::default(),
            schedule: LrSchedule::default(),
            momentum: 0.9,
            flip_augment: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub optimizer: SgdOptimizer,
    pub steps: u64,
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = *logits.shape().last().unwrap();
    let mut hits = 0usize;
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn count_hits(logits: &Tensor, labels: &[usize]) -> usize {
    let k = *logits.shape().last().unwrap();
    let mut hits = 0usize;
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits
}

/// Eval-mode accuracy over a dataset; batches are distributed over worker
/// threads (integer hit counts make the reduction order-free).
pub fn evaluate(net: &mut Network, ds: &Dataset, batch: usize) -> Result<f64> {
    net.set_mode(Mode::Eval);
    if ds.is_empty() {
        return Ok(0.0);
    }
    let ranges: Vec<(usize, usize)> = (0..ds.len())
        .step_by(batch.max(1))
        .map(|at| (at, (at + batch).min(ds.len())))
        .collect();
    let net = &*net;
    let eval_range = |(lo, hi): (usize, usize)| -> Result<usize> {
        let idx: Vec<usize> = (lo..hi).collect();
        let (x, labels) = ds.batch(&idx, None);
        let mut tape = Tape::new();
        let xid = tape.input(x)?;
        let (logits, _) = net.forward(&mut tape, xid)?;
        Ok(count_hits(tape.value(logits), &labels))
    };
    let workers = crate::tensor::worker_count().min(ranges.len()).max(1);
    let hits: usize = if workers <= 1 {
        let mut acc = 0;
        for &r in &ranges {
            acc += eval_range(r)?;
        }
        acc
    } else {
        let results = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let ranges = &ranges;
                let eval_range = &eval_range;
                handles.push(scope.spawn(move || {
                    crate::tensor::run_serial(|| {
                        let mut acc = 0usize;
                        for r in ranges.iter().skip(w).step_by(workers) {
                            acc += eval_range(*r)?;
                        }
                        Ok::<usize, PideError>(acc)
                    })
                }));
            }
            handles.into_iter().map(|h| h.join().expect("eval worker")).collect::<Vec<_>>()
        });
        let mut acc = 0;
        for r in results {
            acc += r?;
        }
        acc
    };
    Ok(hits as f64 / ds.len() as f64)
}

/// Deterministic single-worker training: per-epoch shuffling, SGD with
/// momentum, per-epoch train loss/accuracy and test accuracy. Zero epochs
/// reports the untrained network's metrics.
pub fn train(net: &mut Network, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train_ds.is_empty() {
        return Err(PideError::Dataset("empty training set".into()));
    }
    let mut optimizer = SgdOptimizer::new(cfg.momentum);
    let mut history = Vec::new();
    let mut steps = 0u64;

    if cfg.epochs == 0 {
        let train_acc = evaluate(net, train_ds, cfg.batch)?;
        let test_acc = evaluate(net, test_ds, cfg.batch)?;
        history.push(EpochMetrics {
            epoch: 0,
            lr: cfg.schedule.lr_at(0),
            train_loss: f64::NAN,
            train_acc,
            test_acc,
        });
        return Ok(TrainOutcome { history, optimizer, steps });
    }

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        let mut epoch_rng = rng::child(cfg.seed, 0xe90c_0000 + epoch as u64);
        order.shuffle(&mut epoch_rng);

        net.set_mode(Mode::Train);
        let mut loss_sum = 0.0;
        let mut hit_sum = 0usize;
        let mut seen = 0usize;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let flips: Option<Vec<bool>> = if cfg.flip_augment {
                Some(chunk.iter().map(|_| epoch_rng.gen_bool(0.5)).collect())
            } else {
                None
            };
            let step = train_step(net, train_ds, chunk, flips.as_deref(), &cfg.reg)?;
            if !step.parts.total.is_finite() {
                return Err(PideError::Diverged(format!("epoch {epoch}: loss {}", step.parts.total)));
            }
            net.apply_bn_updates(&step.bn_stats);
            optimizer.step(net, &step.grads, lr);
            steps += 1;
            loss_sum += step.parts.total;
            hit_sum += step.hits;
            seen += chunk.len();
            batches += 1.0;
        }
        let test_acc = evaluate(net, test_ds, cfg.batch)?;
        history.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / batches,
            train_acc: hit_sum as f64 / seen.max(1) as f64,
            test_acc,
        });
    }
    Ok(TrainOutcome { history, optimizer, steps })
}

struct ShardOutput {
    grads: BTreeMap<String, Tensor>,
    bn_stats: Vec<crate::params::BnBatchStats>,
    parts: LossParts,
    hits: usize,
}

struct StepOutput {
    grads: BTreeMap<String, Tensor>,
    bn_stats: Vec<crate::params::BnBatchStats>,
    parts: LossParts,
    hits: usize,
}

/// One optimizer-step's worth of gradient computation. The batch is always
/// split into two fixed half-shards (batch order decides membership, never
/// the worker count), each with its own tape and shard-level BN statistics;
/// shard gradients reduce in shard order, so any thread count reproduces
/// the same numbers bit for bit.
fn train_step(
    net: &Network,
    ds: &Dataset,
    chunk: &[usize],
    flips: Option<&[bool]>,
    reg: &RegularizerConfig,
) -> Result<StepOutput> {
    let total = chunk.len();
    let half = total.div_ceil(2);
    let mut shard_bounds = vec![(0usize, half.min(total))];
    if half < total {
        shard_bounds.push((half, total));
    }

    let run_shard = |(lo, hi): (usize, usize), include_reg: bool| -> Result<ShardOutput> {
        let idx = &chunk[lo..hi];
        let shard_flips = flips.map(|f| &f[lo..hi]);
        let (x, labels) = ds.batch(idx, shard_flips);
        let mut tape = Tape::new();
        let xid = tape.input(x)?;
        let (logits, binding) = net.forward(&mut tape, xid)?;
        let ce_weight = (hi - lo) as f64 / total as f64;
        let (loss, mut parts) =
            shard_objective(&mut tape, net, &binding, logits, &labels, reg, ce_weight, include_reg)?;
        tape.backward(loss)?;
        let hits = count_hits(tape.value(logits), &labels);
        parts.cross_entropy *= ce_weight;
        Ok(ShardOutput {
            grads: binding.grads(&tape),
            bn_stats: binding.bn_stats().to_vec(),
            parts,
            hits,
        })
    };

    let outputs: Vec<ShardOutput> = if shard_bounds.len() == 1 {
        vec![run_shard(shard_bounds[0], true)?]
    } else if crate::tensor::worker_count() > 1 {
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = shard_bounds
                .iter()
                .enumerate()
                .map(|(k, &bounds)| {
                    let run_shard = &run_shard;
                    scope.spawn(move || crate::tensor::run_serial(|| run_shard(bounds, k == 0)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("shard worker")).collect::<Vec<_>>()
        });
        let mut outputs = Vec::with_capacity(results.len());
        for r in results {
            outputs.push(r?);
        }
        outputs
    } else {
        let mut outputs = Vec::with_capacity(shard_bounds.len());
        for (k, &bounds) in shard_bounds.iter().enumerate() {
            outputs.push(run_shard(bounds, k == 0)?);
        }
        outputs
    };

    // reduce in fixed shard order
    let mut iter = outputs.into_iter();
    let first = iter.next().expect("at least one shard");
    let mut grads = first.grads;
    let mut bn_stats = first.bn_stats;
    let mut parts = first.parts;
    let mut hits = first.hits;
    for shard in iter {
        for (name, g) in shard.grads {
            match grads.get_mut(&name) {
                Some(dst) => {
                    for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                None => {
                    grads.insert(name, g);
                }
            }
        }
        bn_stats.extend(shard.bn_stats);
        parts.cross_entropy += shard.parts.cross_entropy;
        parts.r1 += shard.parts.r1;
        parts.r2 += shard.parts.r2;
        parts.total += shard.parts.total;
        hits += shard.hits;
    }
    Ok(StepOutput { grads, bn_stats, parts, hits })
}

// ── Metrics files ───────────────────────────────────────────────────────

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,test_acc\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc
        ));
    }
    out
}

pub fn metrics_json(history: &[EpochMetrics]) -> String {
    serde_json::to_string_pretty(history).expect("metrics serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_longrange, SyntheticLongRangeSpec};
    use crate::hamiltonian::{build_network, NetworkConfig};

    #[test]
    fn reg_l2_values() {
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(reg_l2(&[&zero], 2e-4), 0.0);
        let ones = Tensor::filled(&[2, 2], 1.0);
        let r = reg_l2(&[&ones], 2e-4);
        assert!((r - 4e-4).abs() < 1e-18);
        // scaling weights by c scales R1 by c^2
        let scaled = ones.map(|v| 3.0 * v);
        assert!((reg_l2(&[&scaled], 2e-4) - 9.0 * r).abs() < 1e-15);
    }

    #[test]
    fn reg_smooth_values() {
        let a = Tensor::filled(&[3, 3], 0.5);
        let mut b = a.clone();
        // identical weights: zero
        assert_eq!(reg_smooth(&[vec![&a], vec![&b]], 1e-8, 0.05), 0.0);
        // single-entry difference: alpha2 * delta^2 / h
        let delta = 0.25;
        b.data_mut()[4] += delta;
        let got = reg_smooth(&[vec![&a], vec![&b]], 1e-8, 0.05);
        assert!((got - 1e-8 * delta * delta / 0.05).abs() < 1e-20);
        // single block: empty sum
        assert_eq!(reg_smooth(&[vec![&a]], 1e-8, 0.05), 0.0);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut cfg = NetworkConfig::benchmark(1, 2);
        cfg.channels = vec![2, 2, 2];
        let mut net = build_network(&cfg, 1).unwrap();
        let name = "input_conv.b";
        let before = {
            let mut v = None;
            net.visit("net", &mut |n, _, t| {
                if n == name {
                    v = Some(t.clone());
                }
            });
            v.unwrap()
        };
        let mut opt = SgdOptimizer::new(0.9);
        let g = Tensor::filled(before.shape(), 1.0);
        let mut grads = BTreeMap::new();
        grads.insert(name.to_string(), g);
        let lr = 0.1;
        opt.step(&mut net, &grads, lr);
        opt.step(&mut net, &grads, lr);
        let after = {
            let mut v = None;
            net.visit("net", &mut |n, _, t| {
                if n == name {
                    v = Some(t.clone());
                }
            });
            v.unwrap()
        };
        // two steps with constant gradient: p - lr g - lr (1.9 g)
        let want = before.data()[0] - lr * 1.0 - lr * 1.9;
        assert!((after.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn schedule_matches_reference_points() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(1), 0.1);
        assert_eq!(s.lr_at(80), 0.1);
        assert!((s.lr_at(81) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(121) - 0.001).abs() < 1e-16);
        assert!((s.lr_at(161) - 1e-4).abs() < 1e-17);
        assert!((s.lr_at(181) - 1e-5).abs() < 1e-18);
        let r = LrSchedule::rescaled(15);
        assert_eq!(r.breakpoints, vec![6, 9, 12, 14]);
    }

    #[test]
    fn uniform_logits_loss_is_half_log_k_plus_reg() {
        let mut cfg = NetworkConfig::benchmark(1, 10);
        cfg.channels = vec![2, 2, 2];
        let net = build_network(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[4, 10]));
        let binding = ParamBinding::new();
        let reg = RegularizerConfig { alpha1: 0.0, alpha2: 0.0, h: 0.05 };
        let (_, parts) = training_loss(&mut tape, &net, &binding, logits, &[0, 1, 2, 3], &reg).unwrap();
        assert!((parts.cross_entropy - 10f64.ln()).abs() < 1e-12);
        assert!((parts.total - 0.5 * 10f64.ln()).abs() < 1e-12);
        assert_eq!(parts.r1, 0.0);
        assert_eq!(parts.r2, 0.0);
    }

    #[test]
    fn overfits_one_batch_and_is_deterministic() {
        let spec = SyntheticLongRangeSpec { noise_sigma: 0.1, ..Default::default() };
        let train_ds = gen_longrange(&spec, 11, 16).unwrap();
        let test_ds = gen_longrange(&spec, 12, 8).unwrap();
        let mut cfg = NetworkConfig::benchmark(1, 2);
        cfg.channels = vec![4, 4, 4];
        cfg.input_channels = 1;

        let tc = TrainConfig {
            epochs: 3,
            batch: 16,
            seed: 5,
            schedule: LrSchedule { warmup: 0.05, base: 0.05, breakpoints: vec![] },
            ..Default::default()
        };
        let mut net1 = build_network(&cfg, 7).unwrap();
        let out1 = train(&mut net1, &train_ds, &test_ds, &tc).unwrap();
        let mut net2 = build_network(&cfg, 7).unwrap();
        let out2 = train(&mut net2, &train_ds, &test_ds, &tc).unwrap();
        for (a, b) in out1.history.iter().zip(&out2.history) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.test_acc.to_bits(), b.test_acc.to_bits());
        }
        assert_eq!(out1.steps, 3);

        // loss decreases over epochs on the single batch
        let first = out1.history.first().unwrap().train_loss;
        let last = out1.history.last().unwrap().train_loss;
        assert!(last < first, "loss {} -> {}", first, last);
    }

    #[test]
    fn zero_epochs_reports_initial_metrics() {
        let spec = SyntheticLongRangeSpec::default();
        let ds = gen_longrange(&spec, 1, 8).unwrap();
        let mut cfg = NetworkConfig::benchmark(1, 2);
        cfg.channels = vec![2, 2, 2];
        cfg.input_channels = 1;
        let mut net = build_network(&cfg, 1).unwrap();
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&mut net, &ds, &ds, &tc).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn metrics_csv_header() {
        let rows = vec![EpochMetrics { epoch: 0, lr: 0.01, train_loss: 1.0, train_acc: 0.5, test_acc: 0.4 }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("epoch,lr,train_loss,train_acc,test_acc\n"));
        assert!(csv.lines().count() == 2);
        let json = metrics_json(&rows);
        assert!(json.contains("\"test_acc\""));
    }
}
