//! Nonlocal blocks: multi-stage discretizations of integral-operator flows
//! over pixel strips. One block computes an affinity kernel once from its
//! input embeddings, then runs a fixed number of aggregate-mix-add stages,
//! each with an identity skip connection back to the block input.
//!
//! Three independent routes compute the same stage: the rearranged fast path
//! (matrix products), an un-reordered naive double loop, and the Verlet
//! matrix formulation. The latter two exist to cross-check the first.

use crate::error::{PideError, Result};
use crate::kernels::{self, AffinityMatrix, KernelFamily, KernelSpec};
use crate::params::{BnBatchStats, ParamBinding, ParamKind, VisitParams};
use crate::rng;
use crate::tape::{BatchNormState, Mode, NodeId, Tape};
use crate::tensor::{self, Tensor};

/// The four operator families a block can discretize. They differ in the
/// affinity kernel and in what each kernel entry multiplies: the diffusion
/// family aggregates differences (X_j - X_i), the fractional family the
/// flipped differences (X_i - X_j), and the potential families plain X_j.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockFamily {
    Diffusion,
    FracLap,
    InvFracLap,
    LogKernel,
}

impl BlockFamily {
    pub fn default_kernel(self) -> KernelFamily {
        match self {
            BlockFamily::Diffusion => KernelFamily::EmbeddedDot,
            BlockFamily::FracLap => KernelFamily::Fractional,
            BlockFamily::InvFracLap => KernelFamily::Riesz,
            BlockFamily::LogKernel => KernelFamily::Log,
        }
    }

    fn term(self) -> Term {
        match self {
            BlockFamily::Diffusion => Term::JMinusI,
            BlockFamily::FracLap => Term::IMinusJ,
            BlockFamily::InvFracLap | BlockFamily::LogKernel => Term::JOnly,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "diffusion" => Some(BlockFamily::Diffusion),
            "fraclap" => Some(BlockFamily::FracLap),
            "invfraclap" => Some(BlockFamily::InvFracLap),
            "log" => Some(BlockFamily::LogKernel),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockFamily::Diffusion => "diffusion",
            BlockFamily::FracLap => "fraclap",
            BlockFamily::InvFracLap => "invfraclap",
            BlockFamily::LogKernel => "log",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Term {
    JMinusI,
    IMinusJ,
    JOnly,
}

/// Stage selector: stages alternate between the two mixing convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageWeights {
    One,
    Two,
}

impl StageWeights {
    /// Stage k (1-based) uses weights ((k-1) mod 2) + 1.
    pub fn for_stage(k: usize) -> Self {
        if (k - 1) % 2 == 0 {
            StageWeights::One
        } else {
            StageWeights::Two
        }
    }
}

/// A 1x1 mixing convolution with optional BN state (absent in plain mode).
#[derive(Clone, Debug)]
pub struct MixWeights {
    pub weight: Tensor,
    pub bn: Option<BatchNormState>,
}

impl VisitParams for MixWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{prefix}.w"), ParamKind::Weight, &self.weight);
        if let Some(bn) = &self.bn {
            bn.visit(&format!("{prefix}.bn"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{prefix}.w"), ParamKind::Weight, &mut self.weight);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&format!("{prefix}.bn"), f);
        }
    }
}

impl VisitParams for BatchNormState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{prefix}.scale"), ParamKind::BnScale, &self.scale);
        f(&format!("{prefix}.shift"), ParamKind::BnShift, &self.shift);
        f(&format!("{prefix}.mean"), ParamKind::BnRunningMean, &self.running_mean);
        f(&format!("{prefix}.var"), ParamKind::BnRunningVar, &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{prefix}.scale"), ParamKind::BnScale, &mut self.scale);
        f(&format!("{prefix}.shift"), ParamKind::BnShift, &mut self.shift);
        f(&format!("{prefix}.mean"), ParamKind::BnRunningMean, &mut self.running_mean);
        f(&format!("{prefix}.var"), ParamKind::BnRunningVar, &mut self.running_var);
    }
}

/// Parameters of one nonlocal block.
#[derive(Clone, Debug)]
pub struct NonlocalBlockParams {
    pub family: BlockFamily,
    pub spec: KernelSpec,
    /// Halving embeddings, each (C, C/2).
    pub theta_w: Tensor,
    pub phi_w: Tensor,
    pub k1: MixWeights,
    pub k2: MixWeights,
    pub h: f64,
    pub stages: usize,
    pub pool: usize,
    /// Disables BN and ReLU inside the mixing convolutions for analytic tests.
    pub plain_mode: bool,
    /// Normalize with the true kernel row sums instead of the constant
    /// strip-count normalizer; required by the Verlet matrix identity.
    pub row_normalize: bool,
}

impl NonlocalBlockParams {
    pub fn init(
        family: BlockFamily,
        spec: KernelSpec,
        channels: usize,
        h: f64,
        stages: usize,
        pool: usize,
        plain_mode: bool,
        rng: &mut rng::Prng,
    ) -> Result<Self> {
        spec.validate()?;
        if channels < 2 {
            return Err(PideError::InvalidArgument("nonlocal block needs at least 2 channels".into()));
        }
        if !(h > 0.0) || stages == 0 || pool == 0 {
            return Err(PideError::InvalidArgument(format!(
                "invalid block hyperparameters h={h} stages={stages} pool={pool}"
            )));
        }
        // Embeddings reduce the channel count by half (odd C rounds down).
        let half = channels / 2;
        let std_embed = (2.0 / channels as f64).sqrt();
        let mix = |rng: &mut rng::Prng| MixWeights {
            weight: rng::normal_tensor(rng, &[channels, channels], std_embed),
            bn: if plain_mode { None } else { Some(BatchNormState::new(channels)) },
        };
        Ok(NonlocalBlockParams {
            family,
            spec,
            theta_w: rng::normal_tensor(rng, &[channels, half], std_embed),
            phi_w: rng::normal_tensor(rng, &[channels, half], std_embed),
            k1: mix(rng),
            k2: mix(rng),
            h,
            stages,
            pool,
            plain_mode,
            row_normalize: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.theta_w.shape()[0]
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for mw in [&mut self.k1, &mut self.k2] {
            if let Some(bn) = &mut mw.bn {
                bn.mode = mode;
            }
        }
    }

    fn mix(&self, which: StageWeights) -> &MixWeights {
        match which {
            StageWeights::One => &self.k1,
            StageWeights::Two => &self.k2,
        }
    }
}

impl VisitParams for NonlocalBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{prefix}.theta"), ParamKind::Weight, &self.theta_w);
        f(&format!("{prefix}.phi"), ParamKind::Weight, &self.phi_w);
        self.k1.visit(&format!("{prefix}.k1"), f);
        self.k2.visit(&format!("{prefix}.k2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{prefix}.theta"), ParamKind::Weight, &mut self.theta_w);
        f(&format!("{prefix}.phi"), ParamKind::Weight, &mut self.phi_w);
        self.k1.visit_mut(&format!("{prefix}.k1"), f);
        self.k2.visit_mut(&format!("{prefix}.k2"), f);
    }
}

/// Tape leaves for one bound block.
#[derive(Clone, Debug)]
pub struct NlBound {
    pub prefix: String,
    pub theta_w: NodeId,
    pub phi_w: NodeId,
    pub k1_w: NodeId,
    pub k1_bn: Option<(NodeId, NodeId)>,
    pub k2_w: NodeId,
    pub k2_bn: Option<(NodeId, NodeId)>,
}

impl NlBound {
    fn mix(&self, which: StageWeights) -> (NodeId, Option<(NodeId, NodeId)>) {
        match which {
            StageWeights::One => (self.k1_w, self.k1_bn),
            StageWeights::Two => (self.k2_w, self.k2_bn),
        }
    }
}

pub fn bind_block(
    params: &NonlocalBlockParams,
    tape: &mut Tape,
    binding: &mut ParamBinding,
    prefix: &str,
) -> NlBound {
    let bn_ids = |mw: &MixWeights, tape: &mut Tape, binding: &mut ParamBinding, p: &str| {
        mw.bn
            .as_ref()
            .map(|bn| {
                (
                    binding.bind(tape, format!("{p}.bn.scale"), &bn.scale),
                    binding.bind(tape, format!("{p}.bn.shift"), &bn.shift),
                )
            })
    };
    NlBound {
        prefix: prefix.to_string(),
        theta_w: binding.bind(tape, format!("{prefix}.theta"), &params.theta_w),
        phi_w: binding.bind(tape, format!("{prefix}.phi"), &params.phi_w),
        k1_w: binding.bind(tape, format!("{prefix}.k1.w"), &params.k1.weight),
        k1_bn: bn_ids(&params.k1, tape, binding, &format!("{prefix}.k1")),
        k2_w: binding.bind(tape, format!("{prefix}.k2.w"), &params.k2.weight),
        k2_bn: bn_ids(&params.k2, tape, binding, &format!("{prefix}.k2")),
    }
}

/// The kernel and normalization data shared by all stages of one block pass.
#[derive(Clone, Copy, Debug)]
pub struct OmegaNodes {
    /// (B, N, M) kernel, already row-normalized when requested.
    pub omega: NodeId,
    /// Row sums of `omega`, used by the difference terms.
    pub rowsum: NodeId,
    /// Constant multiplier applied to the aggregate: c / script-N, or just c
    /// under row normalization.
    pub factor: f64,
    pub spatial: (usize, usize),
    pub pool: usize,
}

/// Builds the affinity kernel once from the block input: embed, subsample
/// the phi side, evaluate the kernel family, then normalize.
pub fn build_omega(
    tape: &mut Tape,
    params: &NonlocalBlockParams,
    bound: &NlBound,
    x: NodeId,
) -> Result<OmegaNodes> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(PideError::shape("nonlocal_block", format!("{:?}", s)));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if c != params.channels() {
        return Err(PideError::shape("nonlocal_block", format!("{} channels vs params {}", c, params.channels())));
    }
    let strips = tape.reshape(x, &[b, h * w, c])?;
    let theta = kernels::embed_on_tape(tape, strips, bound.theta_w)?;
    let phi_full = kernels::embed_on_tape(tape, strips, bound.phi_w)?;
    let half = params.theta_w.shape()[1];
    let phi_img = tape.reshape(phi_full, &[b, h, w, half])?;
    let phi_sub = kernels::subsample_strips_on_tape(tape, phi_img, params.pool)?;
    let m = tape.value(phi_sub).shape()[1];

    let raw = kernels::affinity_on_tape(tape, theta, phi_sub, &params.spec)?;
    let constant = params.spec.operator_constant()?;
    let (omega, factor) = if params.row_normalize {
        let rs = tape.row_sum(raw)?;
        let inv = tape.reciprocal(rs);
        (tape.row_scale(raw, inv)?, constant)
    } else {
        (raw, constant / m as f64)
    };
    let rowsum = tape.row_sum(omega)?;
    Ok(OmegaNodes { omega, rowsum, factor, spatial: (h, w), pool: params.pool })
}

/// One stage: aggregate the basis through the kernel, scale, mix through the
/// selected 1x1 convolution, and add the identity skip from the block input.
///
/// `x_strips` is the block input (the skip source for every stage); `basis`
/// is what gets aggregated (the block input for stage 1, the previous stage
/// output afterwards).
pub fn nonlocal_stage(
    tape: &mut Tape,
    params: &NonlocalBlockParams,
    bound: &NlBound,
    binding: &mut ParamBinding,
    x_strips: NodeId,
    basis: NodeId,
    omega: &OmegaNodes,
    which: StageWeights,
) -> Result<NodeId> {
    let s = tape.value(basis).shape().to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let (h, w) = omega.spatial;
    if n != h * w {
        return Err(PideError::shape("nonlocal_stage", format!("{} strips vs {}x{}", n, h, w)));
    }
    let basis_sub = if omega.pool == 1 {
        basis
    } else {
        let img = tape.reshape(basis, &[b, h, w, c])?;
        kernels::subsample_strips_on_tape(tape, img, omega.pool)?
    };
    let gathered = tape.bmm(omega.omega, basis_sub)?;
    let agg = match params.family.term() {
        Term::JMinusI => {
            let own = tape.row_scale(basis, omega.rowsum)?;
            tape.sub(gathered, own)?
        }
        Term::IMinusJ => {
            let own = tape.row_scale(basis, omega.rowsum)?;
            tape.sub(own, gathered)?
        }
        Term::JOnly => gathered,
    };
    let agg = tape.scale(agg, omega.factor);
    tape.value(agg).check_finite("nonlocal aggregate")?;

    let (k_w, k_bn) = bound.mix(which);
    let flat = tape.reshape(agg, &[b * n, c])?;
    let mixed = tape.matmul(flat, k_w)?;
    let mut t = tape.reshape(mixed, &[b, n, c])?;
    if !params.plain_mode {
        let (scale_id, shift_id) = k_bn.expect("bn ids exist outside plain mode");
        let bn_state = params.mix(which).bn.as_ref().expect("bn state exists outside plain mode");
        let (normed, stats) = tape.batchnorm(t, scale_id, shift_id, bn_state)?;
        if let Some((mean, var)) = stats {
            let tag = match which {
                StageWeights::One => "k1",
                StageWeights::Two => "k2",
            };
            binding.record_bn_stats(BnBatchStats {
                name: format!("{}.{}.bn", bound.prefix, tag),
                mean,
                var,
            });
        }
        t = tape.relu(normed);
    }
    let update = tape.scale(t, params.h);
    tape.add(x_strips, update)
}

/// Full block forward: kernel built once, `stages` sequential stages with
/// alternating mixing weights, identity skips from the input throughout.
/// Output shape equals input shape.
pub fn nonlocal_block_forward(
    tape: &mut Tape,
    params: &NonlocalBlockParams,
    binding: &mut ParamBinding,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let s = tape.value(x).shape().to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let bound = bind_block(params, tape, binding, prefix);
    let omega = build_omega(tape, params, &bound, x)?;
    let x_strips = tape.reshape(x, &[b, h * w, c])?;
    let mut out = x_strips;
    for stage in 1..=params.stages {
        let basis = out;
        out = nonlocal_stage(tape, params, &bound, binding, x_strips, basis, &omega, StageWeights::for_stage(stage))?;
    }
    tape.reshape(out, &[b, h, w, c])
}

// ── Naive reference path ────────────────────────────────────────────────
//
// Un-reordered double loop over strip pairs, with per-pair direct distances
// and scalar 1x1 convolutions. Shares nothing with the fast path above but
// the parameter struct; serves as its oracle.

fn naive_embed(x: &Tensor, w: &Tensor) -> Tensor {
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[1];
    let mut out = vec![0.0; b * n * co];
    for bi in 0..b {
        for i in 0..n {
            for o in 0..co {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += x.data()[(bi * n + i) * c + ci] * w.data()[ci * co + o];
                }
                out[(bi * n + i) * co + o] = acc;
            }
        }
    }
    Tensor::from_vec(&[b, n, co], out).unwrap()
}

fn naive_maxpool_strips(img: &Tensor, p: usize) -> Tensor {
    let (b, h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]);
    if p == 1 {
        return img.reshaped(&[b, h * w, c]).unwrap();
    }
    let (ho, wo) = (h / p, w / p);
    let mut out = vec![f64::NEG_INFINITY; b * ho * wo * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = img.data()[((bi * h + oy * p + dy) * w + ox * p + dx) * c + ch];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((bi * ho + oy) * wo + ox) * c + ch] = best;
                }
            }
        }
    }
    Tensor::from_vec(&[b, ho * wo, c], out).unwrap()
}

fn naive_kernel_entry(spec: &KernelSpec, ti: &[f64], pj: &[f64]) -> f64 {
    match spec.family {
        KernelFamily::EmbeddedDot => {
            spec.lambda * ti.iter().zip(pj).map(|(a, b)| a * b).sum::<f64>()
        }
        KernelFamily::EmbeddedGaussian => {
            (spec.lambda * ti.iter().zip(pj).map(|(a, b)| a * b).sum::<f64>()).exp()
        }
        _ => {
            let d = ti
                .iter()
                .zip(pj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < 1e-12 {
                return 0.0;
            }
            let n = spec.n as f64;
            match spec.family {
                KernelFamily::Fractional => spec.lambda * d.powf(-(n + 2.0 * spec.s)),
                KernelFamily::Riesz => spec.lambda * d.powf(-(n - 2.0 * spec.s)),
                KernelFamily::Log => -2.0 * spec.lambda * d.ln() - kernels::EULER_GAMMA,
                _ => unreachable!(),
            }
        }
    }
}

/// Naive single stage on an image-shaped input. `x` supplies both the kernel
/// embeddings and the skip connection; `basis` is aggregated. BN runs with
/// the state's statistics without updating them.
pub fn nonlocal_stage_naive(
    params: &NonlocalBlockParams,
    x: &Tensor,
    basis: &Tensor,
    which: StageWeights,
) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let n = h * w;
    if basis.shape() != [b, n, c] {
        return Err(PideError::shape("nonlocal_stage_naive", format!("basis {:?}", basis.shape())));
    }
    let x_strips = x.reshaped(&[b, n, c])?;
    let theta = naive_embed(&x_strips, &params.theta_w);
    let phi_full = naive_embed(&x_strips, &params.phi_w);
    let half = params.theta_w.shape()[1];
    let phi_sub = naive_maxpool_strips(&phi_full.reshaped(&[b, h, w, half])?, params.pool);
    let m = phi_sub.shape()[1];
    let basis_sub = naive_maxpool_strips(&basis.reshaped(&[b, h, w, c])?, params.pool);

    let constant = params.spec.operator_constant()?;
    let mut agg = vec![0.0; b * n * c];
    for bi in 0..b {
        for i in 0..n {
            let ti = &theta.data()[(bi * n + i) * half..(bi * n + i + 1) * half];
            let mut weights = Vec::with_capacity(m);
            for j in 0..m {
                let pj = &phi_sub.data()[(bi * m + j) * half..(bi * m + j + 1) * half];
                weights.push(naive_kernel_entry(&params.spec, ti, pj));
            }
            let norm = if params.row_normalize {
                weights.iter().sum::<f64>()
            } else {
                m as f64
            };
            let out = &mut agg[(bi * n + i) * c..(bi * n + i + 1) * c];
            for (j, &wij) in weights.iter().enumerate() {
                let bj = &basis_sub.data()[(bi * m + j) * c..(bi * m + j + 1) * c];
                let b_i = &basis.data()[(bi * n + i) * c..(bi * n + i + 1) * c];
                for ch in 0..c {
                    let term = match params.family.term() {
                        Term::JMinusI => bj[ch] - b_i[ch],
                        Term::IMinusJ => b_i[ch] - bj[ch],
                        Term::JOnly => bj[ch],
                    };
                    out[ch] += (wij / norm) * term;
                }
            }
            for v in out.iter_mut() {
                *v *= constant;
            }
        }
    }

    // 1x1 mixing convolution, then BN and ReLU unless in plain mode.
    let mw = params.mix(which);
    let kw = mw.weight.data();
    let mut mixed = vec![0.0; b * n * c];
    for row in 0..b * n {
        for o in 0..c {
            let mut acc = 0.0;
            for ci in 0..c {
                acc += agg[row * c + ci] * kw[ci * c + o];
            }
            mixed[row * c + o] = acc;
        }
    }
    if !params.plain_mode {
        let bn = mw.bn.as_ref().expect("bn exists outside plain mode");
        let (mean, var) = match bn.mode {
            Mode::Train => tensor::bn_batch_stats(&mixed, c),
            Mode::Eval => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()),
        };
        for row in 0..b * n {
            for ch in 0..c {
                let v = &mut mixed[row * c + ch];
                let normed = (*v - mean[ch]) / (var[ch] + bn.epsilon).sqrt();
                *v = (bn.scale.data()[ch] * normed + bn.shift.data()[ch]).max(0.0);
            }
        }
    }
    let mut out = vec![0.0; b * n * c];
    for idx in 0..b * n * c {
        out[idx] = x_strips.data()[idx] + params.h * mixed[idx];
    }
    Tensor::from_vec(&[b, n, c], out)
}

/// Naive multi-stage block on an image, composing naive stages.
pub fn nonlocal_block_forward_naive(params: &NonlocalBlockParams, x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut basis = x.reshaped(&[b, h * w, c])?;
    for stage in 1..=params.stages {
        basis = nonlocal_stage_naive(params, x, &basis, StageWeights::for_stage(stage))?;
    }
    basis.reshaped(&[b, h, w, c])
}

// ── Verlet matrix formulation ───────────────────────────────────────────

/// Row-normalized affinity operator Omega(X): entry (j,k) is the kernel of
/// strips j and k divided by the row-j kernel sum. `negate` evaluates the
/// kernel on -X, which is how the W-side operator is defined.
pub fn omega_operator(
    strips: &Tensor,
    theta_w: &Tensor,
    phi_w: &Tensor,
    spec: &KernelSpec,
    negate: bool,
) -> Result<Tensor> {
    let input = if negate { strips.map(|v| -v) } else { strips.clone() };
    let theta = naive_embed(&input, theta_w);
    let phi = naive_embed(&input, phi_w);
    let aff: AffinityMatrix = kernels::affinity(&theta, &phi, spec)?;
    let (b, n) = (aff.values.shape()[0], aff.values.shape()[1]);
    let mut out = aff.values.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let rs: f64 = row.iter().sum();
        if rs.abs() < 1e-300 {
            return Err(PideError::InvalidArgument("omega row sum vanishes; cannot row-normalize".into()));
        }
        for v in row.iter_mut() {
            *v /= rs;
        }
    }
    Tensor::from_vec(&[b, n, n], out)
}

/// [Diff(X)]_(j,k) = X_k - X_j as a (B,N,N,C) tensor.
pub fn diff_operator(strips: &Tensor) -> Tensor {
    let (b, n, c) = (strips.shape()[0], strips.shape()[1], strips.shape()[2]);
    let mut out = vec![0.0; b * n * n * c];
    for bi in 0..b {
        for j in 0..n {
            for k in 0..n {
                for ch in 0..c {
                    out[((bi * n + j) * n + k) * c + ch] = strips.data()[(bi * n + k) * c + ch]
                        - strips.data()[(bi * n + j) * c + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[b, n, n, c], out).unwrap()
}

/// Diagonal over the first two strip axes: (B,N,N,C) -> (B,N,C).
pub fn diag12(t: &Tensor) -> Tensor {
    let (b, n, c) = (t.shape()[0], t.shape()[1], t.shape()[3]);
    let mut out = vec![0.0; b * n * c];
    for bi in 0..b {
        for j in 0..n {
            for ch in 0..c {
                out[(bi * n + j) * c + ch] = t.data()[((bi * n + j) * n + j) * c + ch];
            }
        }
    }
    Tensor::from_vec(&[b, n, c], out).unwrap()
}

fn apply_mix_raw(params: &NonlocalBlockParams, which: StageWeights, v: &Tensor) -> Tensor {
    let (b, n, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mw = params.mix(which);
    let mixed = tensor::matmul(v.data(), mw.weight.data(), b * n, c, c);
    let mut out = mixed;
    if !params.plain_mode {
        let bn = mw.bn.as_ref().expect("bn exists outside plain mode");
        let (mean, var) = match bn.mode {
            Mode::Train => tensor::bn_batch_stats(&out, c),
            Mode::Eval => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()),
        };
        out = tensor::bn_apply(&out, c, &mean, &var, bn.scale.data(), bn.shift.data(), bn.epsilon);
        out = tensor::relu_raw(&out);
    }
    Tensor::from_vec(&[b, n, c], out).unwrap()
}

/// Batched product of Omega (B,N,N) with a diff tensor (B,N,N,C), in analogy
/// to an (N,N) x (N, N*C) matrix multiplication.
fn omega_times_diff(omega: &Tensor, diff: &Tensor) -> Tensor {
    let (b, n, c) = (diff.shape()[0], diff.shape()[1], diff.shape()[3]);
    let mut out = Vec::with_capacity(b * n * n * c);
    for bi in 0..b {
        let ov = &omega.data()[bi * n * n..(bi + 1) * n * n];
        let dv = &diff.data()[bi * n * n * c..(bi + 1) * n * n * c];
        out.extend_from_slice(&tensor::matmul(ov, dv, n, n, n * c));
    }
    Tensor::from_vec(&[b, n, n, c], out).unwrap()
}

/// One Verlet step of the matrix-form system. With V = X and W = -X this
/// reproduces the two block stages: V_new equals the stage-1 output and
/// -W_new the stage-2 output, provided the block row-normalizes its kernel.
/// Defined for the diffusion family, whose flow the Diff operator encodes.
pub fn matrix_form_step(
    v: &Tensor,
    w: &Tensor,
    params: &NonlocalBlockParams,
) -> Result<(Tensor, Tensor)> {
    if params.family != BlockFamily::Diffusion {
        return Err(PideError::InvalidArgument(
            "matrix_form_step is the diffusion-family Verlet system".into(),
        ));
    }
    if v.shape() != w.shape() || v.shape().len() != 3 {
        return Err(PideError::shape("matrix_form_step", format!("{:?} vs {:?}", v.shape(), w.shape())));
    }
    let constant = params.spec.operator_constant()?;
    // V_new = V + h K1[ diag12(Omega1(V) Diff(W)) ]
    let omega1 = omega_operator(v, &params.theta_w, &params.phi_w, &params.spec, false)?;
    let d1 = diag12(&omega_times_diff(&omega1, &diff_operator(w)));
    let mixed1 = apply_mix_raw(params, StageWeights::One, &d1.map(|x| constant * x));
    let v_new = Tensor::from_vec(
        v.shape(),
        v.data().iter().zip(mixed1.data()).map(|(a, b)| a + params.h * b).collect(),
    )?;
    // W_new = W - h K2[ -diag12(Omega2(W) Diff(V_new)) ]
    let omega2 = omega_operator(w, &params.theta_w, &params.phi_w, &params.spec, true)?;
    let d2 = diag12(&omega_times_diff(&omega2, &diff_operator(&v_new)));
    let mixed2 = apply_mix_raw(params, StageWeights::Two, &d2.map(|x| -constant * x));
    let w_new = Tensor::from_vec(
        w.shape(),
        w.data().iter().zip(mixed2.data()).map(|(a, b)| a - params.h * b).collect(),
    )?;
    Ok((v_new, w_new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn test_params(family: BlockFamily, channels: usize, pool: usize, plain: bool, seed: u64) -> NonlocalBlockParams {
        let kernel = family.default_kernel();
        let spec = KernelSpec::with_defaults(kernel);
        let mut rng = rng::seeded(seed);
        NonlocalBlockParams::init(family, spec, channels, 0.05, 2, pool, plain, &mut rng).unwrap()
    }

    fn run_block(params: &NonlocalBlockParams, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let xid = tape.leaf(x.clone());
        let out = nonlocal_block_forward(&mut tape, params, &mut binding, "nl", xid).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn hand_derived_two_strip_stage() {
        // 2 strips, 1 channel, X = (0,2), omega = [[0,1],[1,0]], normalizer 2,
        // h = 1, identity mixing: stage-1 output is (1,1).
        let mut params = NonlocalBlockParams {
            family: BlockFamily::Diffusion,
            spec: KernelSpec::with_defaults(KernelFamily::EmbeddedDot),
            theta_w: Tensor::zeros(&[1, 1]),
            phi_w: Tensor::zeros(&[1, 1]),
            k1: MixWeights { weight: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(), bn: None },
            k2: MixWeights { weight: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(), bn: None },
            h: 1.0,
            stages: 1,
            pool: 1,
            plain_mode: true,
            row_normalize: false,
        };
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2, 1], vec![0.0, 2.0]).unwrap());
        let omega_val = tape.leaf(Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let rowsum = tape.row_sum(omega_val).unwrap();
        let omega = OmegaNodes { omega: omega_val, rowsum, factor: 1.0 / 2.0, spatial: (1, 2), pool: 1 };
        let bound = bind_block(&params, &mut tape, &mut binding, "nl");
        let out = nonlocal_stage(&mut tape, &params, &bound, &mut binding, x, x, &omega, StageWeights::One).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 1.0).abs() < 1e-15 && (got[1] - 1.0).abs() < 1e-15, "{:?}", got);
    }

    #[test]
    fn constant_input_is_fixed_point_for_diffusion() {
        let mut params = test_params(BlockFamily::Diffusion, 4, 1, true, 1);
        let x = Tensor::filled(&[2, 3, 3, 4], 0.7);
        let out = run_block(&params, &x);
        assert!(out.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn zero_step_size_is_identity() {
        for family in [BlockFamily::Diffusion, BlockFamily::FracLap, BlockFamily::InvFracLap, BlockFamily::LogKernel] {
            let mut params = test_params(family, 4, 1, true, 2);
            params.h = 0.0;
            let mut rng = rng::seeded(3);
            let x = rng::normal_tensor(&mut rng, &[1, 4, 4, 4], 1.0);
            let out = run_block(&params, &x);
            assert_eq!(out.data(), x.data(), "{:?}", family);
        }
    }

    #[test]
    fn zeroed_mixing_weights_cannot_impede_information() {
        // Skip connections guarantee exact identity when the mixing weights
        // vanish, BN or not, train or eval.
        for plain in [true, false] {
            let mut params = test_params(BlockFamily::Diffusion, 4, 2, plain, 4);
            params.k1.weight = Tensor::zeros(&[4, 4]);
            params.k2.weight = Tensor::zeros(&[4, 4]);
            let mut rng = rng::seeded(5);
            let x = rng::normal_tensor(&mut rng, &[2, 4, 4, 4], 1.0);
            let out = run_block(&params, &x);
            assert_eq!(out.data(), x.data(), "plain={}", plain);
            params.set_mode(Mode::Eval);
            let out = run_block(&params, &x);
            assert_eq!(out.data(), x.data(), "plain={} eval", plain);
        }
    }

    #[test]
    fn output_shape_matches_input_for_all_families_and_pools() {
        let mut rng = rng::seeded(6);
        let x = rng::normal_tensor(&mut rng, &[2, 6, 6, 4], 1.0);
        for family in [BlockFamily::Diffusion, BlockFamily::FracLap, BlockFamily::InvFracLap, BlockFamily::LogKernel] {
            for pool in [1, 2, 3] {
                let mut params = test_params(family, 4, pool, false, 7);
                let out = run_block(&params, &x);
                assert_eq!(out.shape(), x.shape());
            }
        }
    }

    #[test]
    fn two_stages_equal_manual_composition_with_shared_kernel() {
        let mut params = test_params(BlockFamily::Diffusion, 4, 2, false, 8);
        let mut rng = rng::seeded(9);
        let x = rng::normal_tensor(&mut rng, &[1, 4, 4, 4], 1.0);
        params.set_mode(Mode::Eval);
        let block_out = run_block(&params, &x);

        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let xid = tape.leaf(x.clone());
        let bound = bind_block(&params, &mut tape, &mut binding, "nl");
        let omega = build_omega(&mut tape, &params, &bound, xid).unwrap();
        let xs = tape.reshape(xid, &[1, 16, 4]).unwrap();
        let b1 = nonlocal_stage(&mut tape, &params, &bound, &mut binding, xs, xs, &omega, StageWeights::One).unwrap();
        let b2 = nonlocal_stage(&mut tape, &params, &bound, &mut binding, xs, b1, &omega, StageWeights::Two).unwrap();
        let manual = tape.value(b2).reshaped(&[1, 4, 4, 4]).unwrap();
        assert!(block_out.max_abs_diff(&manual) < 1e-12);

        // stages = 1 equals a single stage call
        params.stages = 1;
        let one = run_block(&params, &x);
        let single = tape.value(b1).reshaped(&[1, 4, 4, 4]).unwrap();
        assert!(one.max_abs_diff(&single) < 1e-12);
    }

    #[test]
    fn naive_path_matches_fast_path() {
        let mut rng = rng::seeded(10);
        for family in [BlockFamily::Diffusion, BlockFamily::FracLap, BlockFamily::InvFracLap, BlockFamily::LogKernel] {
            for pool in [1, 2] {
                let mut params = test_params(family, 8, pool, false, 11);
                params.set_mode(Mode::Eval);
                let x = rng::normal_tensor(&mut rng, &[2, 4, 4, 8], 1.0);
                let fast = run_block(&params, &x);
                let naive = nonlocal_block_forward_naive(&params, &x).unwrap();
                let diff = fast.max_abs_diff(&naive);
                assert!(diff < 1e-10, "{:?} pool {}: {}", family, pool, diff);
            }
        }
    }

    #[test]
    fn matrix_form_reproduces_both_stages() {
        let mut rng = rng::seeded(12);
        let spec = KernelSpec::with_defaults(KernelFamily::EmbeddedGaussian);
        let mut params = NonlocalBlockParams::init(
            BlockFamily::Diffusion, spec, 4, 0.05, 2, 1, false, &mut rng,
        )
        .unwrap();
        params.row_normalize = true;
        params.set_mode(Mode::Eval);
        let x = rng::normal_tensor(&mut rng, &[2, 3, 3, 4], 1.0);
        let strips = x.reshaped(&[2, 9, 4]).unwrap();

        // Omega_1(V) == Omega_2(W) elementwise for V = X, W = -X
        let o1 = omega_operator(&strips, &params.theta_w, &params.phi_w, &params.spec, false).unwrap();
        let neg = strips.map(|v| -v);
        let o2 = omega_operator(&neg, &params.theta_w, &params.phi_w, &params.spec, true).unwrap();
        assert!(o1.max_abs_diff(&o2) == 0.0);

        let (v_new, w_new) = matrix_form_step(&strips, &neg, &params).unwrap();

        // Block stages with true row normalization
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let xid = tape.leaf(x.clone());
        let bound = bind_block(&params, &mut tape, &mut binding, "nl");
        let omega = build_omega(&mut tape, &params, &bound, xid).unwrap();
        let xs = tape.reshape(xid, &[2, 9, 4]).unwrap();
        let b1 = nonlocal_stage(&mut tape, &params, &bound, &mut binding, xs, xs, &omega, StageWeights::One).unwrap();
        let b2 = nonlocal_stage(&mut tape, &params, &bound, &mut binding, xs, b1, &omega, StageWeights::Two).unwrap();

        assert!(v_new.max_abs_diff(tape.value(b1)) < 1e-12, "V_new vs B1");
        let x_new = w_new.map(|v| -v);
        assert!(x_new.max_abs_diff(tape.value(b2)) < 1e-12, "-W_new vs B2");
    }

    #[test]
    fn rows_of_row_normalized_positive_kernel_sum_to_one() {
        let mut rng = rng::seeded(13);
        let strips = rng::normal_tensor(&mut rng, &[1, 6, 4], 1.0);
        let theta = rng::normal_tensor(&mut rng, &[4, 2], 0.5);
        let phi = rng::normal_tensor(&mut rng, &[4, 2], 0.5);
        let spec = KernelSpec::with_defaults(KernelFamily::EmbeddedGaussian);
        let o = omega_operator(&strips, &theta, &phi, &spec, false).unwrap();
        for row in o.data().chunks_exact(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn block_gradient_versus_finite_differences() {
        use crate::gradcheck;
        let mut rng = rng::seeded(14);
        let params = test_params(BlockFamily::Diffusion, 4, 1, false, 15);
        let x = rng::normal_tensor(&mut rng, &[1, 3, 3, 4], 1.0);
        let inputs = vec![
            x,
            params.theta_w.clone(),
            params.phi_w.clone(),
            params.k1.weight.clone(),
            params.k2.weight.clone(),
        ];
        let report = gradcheck::check_gradients(&inputs, |tape, ids| {
            let mut p = params.clone();
            p.theta_w = tape.value(ids[1]).clone();
            // leaves are pre-created by the harness; rebuild the graph around them
            let mut nlbind = ParamBinding::new();
            let bound = NlBound {
                prefix: "nl".into(),
                theta_w: ids[1],
                phi_w: ids[2],
                k1_w: ids[3],
                k1_bn: None,
                k2_w: ids[4],
                k2_bn: None,
            };
            p.plain_mode = true;
            p.k1.bn = None;
            p.k2.bn = None;
            let omega = build_omega(tape, &p, &bound, ids[0])?;
            let xs = tape.reshape(ids[0], &[1, 9, 4])?;
            let b1 = nonlocal_stage(tape, &p, &bound, &mut nlbind, xs, xs, &omega, StageWeights::One)?;
            let b2 = nonlocal_stage(tape, &p, &bound, &mut nlbind, xs, b1, &omega, StageWeights::Two)?;
            let sq = tape.sum_squares(b2);
            Ok(tape.scale(sq, 1.0 / 36.0))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }
}
