//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded onto a [`Tape`] in execution order, so every
//! node's parents precede it and a single reverse sweep propagates adjoints.
//! Recording and backward are single-threaded per tape; heavy kernels may
//! still split row ranges internally without changing results.

use crate::error::{PideError, Result};
use crate::tensor::{self, Padding, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-normalization parameters and running statistics for one layer.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            scale: Tensor::filled(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: 0.99,
            epsilon: 1e-5,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Folds one set of observed batch statistics into the running averages.
    pub fn fold_batch_stats(&mut self, mean: &[f64], var: &[f64]) {
        let mom = self.momentum;
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = mom * *r + (1.0 - mom) * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = mom * *r + (1.0 - mom) * v;
        }
    }
}

/// Scalar transform mapping squared pairwise distances to kernel entries.
/// Entries at (squared) distance below the threshold are set to zero: the
/// principal-value integral has no diagonal contribution, so a singular
/// entry is replaced by a safe zero.
#[derive(Clone, Copy, Debug)]
pub enum KernelTransform {
    /// omega = lambda * d^(-exponent)
    Power { lambda: f64, exponent: f64 },
    /// omega = -2*lambda*ln(d) - gamma  (written on d^2 as -lambda*ln(d2) - gamma)
    Log { lambda: f64, gamma: f64 },
}

/// Squared-distance threshold below which a kernel entry counts as singular.
pub const SAFE_DIVIDE_THRESHOLD_SQ: f64 = 1e-24;

impl KernelTransform {
    pub(crate) fn apply(&self, d2: f64) -> f64 {
        if d2 < SAFE_DIVIDE_THRESHOLD_SQ {
            return 0.0;
        }
        match *self {
            KernelTransform::Power { lambda, exponent } => lambda * d2.powf(-exponent / 2.0),
            KernelTransform::Log { lambda, gamma } => -lambda * d2.ln() - gamma,
        }
    }

    fn derivative_wrt_d2(&self, d2: f64) -> f64 {
        if d2 < SAFE_DIVIDE_THRESHOLD_SQ {
            return 0.0;
        }
        match *self {
            KernelTransform::Power { lambda, exponent } => {
                lambda * (-exponent / 2.0) * d2.powf(-exponent / 2.0 - 1.0)
            }
            KernelTransform::Log { lambda, .. } => -lambda / d2,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Reciprocal(NodeId),
    MatMul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    BmmNt(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, pad: usize },
    ConvT2d { y: NodeId, w: NodeId, fwd_pad: usize },
    BatchNorm { x: NodeId, scale: NodeId, shift: NodeId, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    AvgPool { x: NodeId, p: usize },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Reshape(NodeId),
    SliceLast { x: NodeId, from: usize, to: usize },
    ConcatLast(NodeId, NodeId),
    Softmax(NodeId),
    CrossEntropyProbs { p: NodeId, labels: Vec<usize> },
    MeanCeLogits { logits: NodeId, labels: Vec<usize> },
    Sum(NodeId),
    SumSquares(NodeId),
    RowSum(NodeId),
    RowScale { x: NodeId, r: NodeId },
    PairwiseSqDist(NodeId, NodeId),
    KernelFromSqDist { d2: NodeId, transform: KernelTransform },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward() target w.r.t. this node. `None` means
    /// the node is disconnected from the loss (gradient defined as zero).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf with an input-finiteness guarantee; use for user-supplied data.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        value.check_finite("input leaf")?;
        Ok(self.leaf(value))
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).map(|v| v * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::from_vec(self.shape_of(x), tensor::relu_raw(self.value(x).data())).unwrap();
        self.push(v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn reciprocal(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| 1.0 / v);
        self.push(v, Op::Reciprocal(x))
    }

    // ── linear algebra ───────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(PideError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::from_vec(&[m, n], v).unwrap();
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Batched matmul: (B,n,k) x (B,k,m) -> (B,n,m).
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(PideError::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (bt, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let out = tensor::bmm(self.value(a).data(), self.value(b).data(), bt, n, k, m);
        let v = Tensor::from_vec(&[bt, n, m], out).unwrap();
        Ok(self.push(v, Op::Bmm(a, b)))
    }

    /// Batched matmul against a transposed right side: (B,n,c) x (B,m,c) -> (B,n,m).
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(PideError::shape("bmm_nt", format!("{:?} x {:?}", sa, sb)));
        }
        let (bt, n, c, m) = (sa[0], sa[1], sa[2], sb[1]);
        let out = tensor::bmm_nt(self.value(a).data(), self.value(b).data(), bt, n, c, m);
        let v = Tensor::from_vec(&[bt, n, m], out).unwrap();
        Ok(self.push(v, Op::BmmNt(a, b)))
    }

    // ── convolution ──────────────────────────────────────────────

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, padding: Padding) -> Result<NodeId> {
        let (sx, sw) = (self.shape_of(x).to_vec(), self.shape_of(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] {
            return Err(PideError::shape("conv2d", format!("x {:?}, w {:?}", sx, sw)));
        }
        let (k, cin, cout) = (sw[0], sw[2], sw[3]);
        if !(k == 1 || k == 3) {
            return Err(PideError::InvalidArgument(format!("conv2d kernel size {} (want 1 or 3)", k)));
        }
        if sx[3] != cin {
            return Err(PideError::shape("conv2d", format!("Cin {} vs kernel {}", sx[3], cin)));
        }
        if let Some(bid) = bias {
            if self.shape_of(bid) != [cout] {
                return Err(PideError::shape("conv2d", "bias length != Cout".to_string()));
            }
        }
        let pad = padding.pad(k);
        let (b, h, wd) = (sx[0], sx[1], sx[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(PideError::shape("conv2d", format!("{}x{} too small for k={}", h, wd, k)));
        }
        let ho = tensor::conv_out_size(h, k, pad);
        let wo = tensor::conv_out_size(wd, k, pad);
        let bias_data = bias.map(|bid| self.value(bid).data().to_vec());
        let y = tensor::conv2d_raw(
            self.value(x).data(),
            (b, h, wd, cin),
            self.value(w).data(),
            (k, cout),
            bias_data.as_deref(),
            pad,
        );
        let v = Tensor::from_vec(&[b, ho, wo, cout], y).unwrap();
        Ok(self.push(v, Op::Conv2d { x, w, bias, pad }))
    }

    /// Adjoint of `conv2d` with the same weight: maps Cout features back to Cin.
    pub fn conv2d_transpose(&mut self, y: NodeId, w: NodeId, padding: Padding) -> Result<NodeId> {
        let (sy, sw) = (self.shape_of(y).to_vec(), self.shape_of(w).to_vec());
        if sy.len() != 4 || sw.len() != 4 || sw[0] != sw[1] {
            return Err(PideError::shape("conv2d_transpose", format!("y {:?}, w {:?}", sy, sw)));
        }
        let (k, cin, cout) = (sw[0], sw[2], sw[3]);
        if sy[3] != cout {
            return Err(PideError::shape("conv2d_transpose", format!("Cout {} vs kernel {}", sy[3], cout)));
        }
        let fwd_pad = padding.pad(k);
        let (b, ho, wo) = (sy[0], sy[1], sy[2]);
        let out = tensor::conv2d_transpose_raw(
            self.value(y).data(),
            (b, ho, wo, cout),
            self.value(w).data(),
            (k, cin),
            fwd_pad,
        );
        let h = ho + k - 1 - 2 * fwd_pad;
        let wd = wo + k - 1 - 2 * fwd_pad;
        let v = Tensor::from_vec(&[b, h, wd, cin], out).unwrap();
        Ok(self.push(v, Op::ConvT2d { y, w, fwd_pad }))
    }

    // ── normalization / pooling ──────────────────────────────────

    /// Batch normalization over the channel (last) axis. Train mode uses
    /// batch statistics and returns them so the caller can fold them into
    /// the running averages; eval mode normalizes with the stored running
    /// statistics and returns `None`.
    #[allow(clippy::type_complexity)]
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        state: &BatchNormState,
    ) -> Result<(NodeId, Option<(Vec<f64>, Vec<f64>)>)> {
        let sx = self.shape_of(x).to_vec();
        let c = *sx.last().ok_or_else(|| PideError::shape("batchnorm", "scalar input"))?;
        if self.shape_of(scale) != [c] || self.shape_of(shift) != [c] || state.channels() != c {
            return Err(PideError::shape("batchnorm", format!("channels {} vs state {}", c, state.channels())));
        }
        let train = state.mode == Mode::Train;
        let (mean, var) = if train {
            tensor::bn_batch_stats(self.value(x).data(), c)
        } else {
            (state.running_mean.data().to_vec(), state.running_var.data().to_vec())
        };
        let eps = state.epsilon;
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let y = tensor::bn_apply(
            self.value(x).data(),
            c,
            &mean,
            &var,
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
        );
        let v = Tensor::from_vec(&sx, y).unwrap();
        let stats = train.then(|| (mean.clone(), var.clone()));
        let id = self.push(v, Op::BatchNorm { x, scale, shift, mean, inv_std, train });
        Ok((id, stats))
    }

    pub fn avg_pool(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let (b, h, w, c) = self.image_dims("avg_pool", x)?;
        self.pool_check(p, h, w)?;
        let y = tensor::avg_pool_raw(self.value(x).data(), (b, h, w, c), p);
        let v = Tensor::from_vec(&[b, h / p, w / p, c], y).unwrap();
        Ok(self.push(v, Op::AvgPool { x, p }))
    }

    pub fn max_pool(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let (b, h, w, c) = self.image_dims("max_pool", x)?;
        self.pool_check(p, h, w)?;
        let (y, argmax) = tensor::max_pool_raw(self.value(x).data(), (b, h, w, c), p);
        let v = Tensor::from_vec(&[b, h / p, w / p, c], y).unwrap();
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    fn pool_check(&self, p: usize, h: usize, w: usize) -> Result<()> {
        if p == 0 || p > h || p > w {
            return Err(PideError::InvalidArgument(format!("pool size {} on {}x{} map", p, h, w)));
        }
        Ok(())
    }

    fn image_dims(&self, op: &'static str, x: NodeId) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape_of(x);
        if s.len() != 4 {
            return Err(PideError::shape(op, format!("{:?} (want B,H,W,C)", s)));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ── shape plumbing ───────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Slice of the last axis, e.g. a channel partition half.
    pub fn slice_last(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        let c = *s.last().ok_or_else(|| PideError::shape("slice_last", "scalar"))?;
        if from >= to || to > c {
            return Err(PideError::shape("slice_last", format!("{}..{} of {}", from, to, c)));
        }
        let width = to - from;
        let mut out = Vec::with_capacity(self.value(x).len() / c * width);
        for row in self.value(x).data().chunks_exact(c) {
            out.extend_from_slice(&row[from..to]);
        }
        let mut ns = s.clone();
        *ns.last_mut().unwrap() = width;
        let v = Tensor::from_vec(&ns, out).unwrap();
        Ok(self.push(v, Op::SliceLast { x, from, to }))
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(PideError::shape("concat_last", format!("{:?} vs {:?}", sa, sb)));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut out = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra, rb) in self
            .value(a)
            .data()
            .chunks_exact(ca)
            .zip(self.value(b).data().chunks_exact(cb))
        {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut ns = sa.clone();
        *ns.last_mut().unwrap() = ca + cb;
        let v = Tensor::from_vec(&ns, out).unwrap();
        Ok(self.push(v, Op::ConcatLast(a, b)))
    }

    // ── heads and losses ─────────────────────────────────────────

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        let k = *s.last().ok_or_else(|| PideError::shape("softmax", "scalar"))?;
        if k == 0 {
            return Err(PideError::InvalidArgument("softmax over empty vector".into()));
        }
        self.value(x).check_finite("softmax input")?;
        let v = Tensor::from_vec(&s, tensor::softmax_rows(self.value(x).data(), k)).unwrap();
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// Mean of -ln p[label] over the batch; `p` is (B,k) probabilities or a
    /// single (k,) vector.
    pub fn cross_entropy_probs(&mut self, p: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape_of(p).to_vec();
        let (rows, k) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(PideError::shape("cross_entropy", format!("{:?}", s))),
        };
        if labels.len() != rows {
            return Err(PideError::shape("cross_entropy", "labels/batch mismatch".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(PideError::InvalidArgument(format!("class index {} out of {}", bad, k)));
        }
        let data = self.value(p).data();
        let mut acc = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            acc -= data[row * k + y].ln();
        }
        let v = Tensor::scalar(acc / rows as f64);
        Ok(self.push(v, Op::CrossEntropyProbs { p, labels: labels.to_vec() }))
    }

    /// Numerically stable mean cross-entropy straight from logits.
    pub fn mean_ce_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape_of(logits).to_vec();
        if s.len() != 2 {
            return Err(PideError::shape("mean_ce_logits", format!("{:?}", s)));
        }
        let (rows, k) = (s[0], s[1]);
        if labels.len() != rows {
            return Err(PideError::shape("mean_ce_logits", "labels/batch mismatch".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(PideError::InvalidArgument(format!("class index {} out of {}", bad, k)));
        }
        let data = self.value(logits).data();
        let mut acc = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            let z = &data[row * k..(row + 1) * k];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            acc += lse - z[y];
        }
        let v = Tensor::scalar(acc / rows as f64);
        Ok(self.push(v, Op::MeanCeLogits { logits, labels: labels.to_vec() }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.push(v, Op::SumSquares(x))
    }

    // ── nonlocal-block primitives ────────────────────────────────

    /// Row sums of a (B,N,M) stack: returns (B,N).
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 3 {
            return Err(PideError::shape("row_sum", format!("{:?}", s)));
        }
        let (b, n, m) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * n);
        for row in self.value(x).data().chunks_exact(m) {
            out.push(row.iter().sum());
        }
        let v = Tensor::from_vec(&[b, n], out).unwrap();
        Ok(self.push(v, Op::RowSum(x)))
    }

    /// Scales each strip of a (B,N,C) stack by the matching (B,N) factor.
    pub fn row_scale(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        let (sx, sr) = (self.shape_of(x).to_vec(), self.shape_of(r).to_vec());
        if sx.len() != 3 || sr.len() != 2 || sx[0] != sr[0] || sx[1] != sr[1] {
            return Err(PideError::shape("row_scale", format!("{:?} by {:?}", sx, sr)));
        }
        let c = sx[2];
        let rv = self.value(r).data();
        let mut out = Vec::with_capacity(self.value(x).len());
        for (i, row) in self.value(x).data().chunks_exact(c).enumerate() {
            let f = rv[i];
            out.extend(row.iter().map(|&v| v * f));
        }
        let v = Tensor::from_vec(&sx, out).unwrap();
        Ok(self.push(v, Op::RowScale { x, r }))
    }

    /// Pairwise squared distances between strip stacks, computed with the
    /// |x|^2 - 2xy + |y|^2 expansion and clamped at zero before any sqrt. A
    /// pre-clamp value below -1e-9 signals numerical corruption and errors.
    pub fn pairwise_sqdist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(PideError::shape("pairwise_sqdist", format!("{:?} x {:?}", sa, sb)));
        }
        let (bt, n, c, m) = (sa[0], sa[1], sa[2], sb[1]);
        let (out, worst) =
            tensor::pairwise_sqdist_batched(self.value(a).data(), self.value(b).data(), bt, n, m, c);
        if worst < -1e-9 {
            return Err(PideError::NonFinite(format!("pairwise distance expansion produced {}", worst)));
        }
        let v = Tensor::from_vec(&[bt, n, m], out).unwrap();
        Ok(self.push(v, Op::PairwiseSqDist(a, b)))
    }

    /// Applies a singular kernel transform entrywise to squared distances.
    pub fn kernel_from_sqdist(&mut self, d2: NodeId, transform: KernelTransform) -> NodeId {
        let v = self.value(d2).map(|x| transform.apply(x));
        self.push(v, Op::KernelFromSqDist { d2, transform })
    }

    // ── diagnostics for the gradient-check harness ───────────────

    /// Smallest |pre-activation| over all recorded ReLU inputs; the gradient
    /// checker resamples when this is close to a kink.
    pub fn min_abs_relu_input(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.nodes[x.0].value.data() {
                    m = m.min(v.abs());
                }
            }
        }
        m
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(PideError::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    // ── reverse sweep ────────────────────────────────────────────

    /// Propagates adjoints from a scalar loss node back to every reachable
    /// ancestor. Gradients are then available through [`Tape::grad`].
    /// Setting PIDENET_PROFILE=1 prints per-op time totals afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(PideError::InvalidArgument("backward target must be scalar".into()));
        }
        let profile = std::env::var_os("PIDENET_PROFILE").is_some();
        let mut op_times: std::collections::BTreeMap<&'static str, (f64, usize)> = Default::default();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            let (before, at) = grads.split_at_mut(i);
            if at[0].is_none() {
                continue;
            }
            // reshape gradients pass through; donate the buffer if possible
            if let Op::Reshape(x) = &self.nodes[i].op {
                if before[x.0].is_none() {
                    before[x.0] = at[0].take();
                    continue;
                }
            }
            let g = at[0].as_ref().expect("checked above");
            let node = &self.nodes[i];
            let t0 = profile.then(std::time::Instant::now);
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(&mut before[a.0], g.data(), 1.0);
                    accum(&mut before[b.0], g.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    accum(&mut before[a.0], g.data(), 1.0);
                    accum(&mut before[b.0], g.data(), -1.0);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.data().iter().zip(self.nodes[b.0].value.data()).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = g.data().iter().zip(self.nodes[a.0].value.data()).map(|(g, v)| g * v).collect();
                    accum_owned(&mut before[a.0], da);
                    accum_owned(&mut before[b.0], db);
                }
                Op::Scale(x, s) => accum(&mut before[x.0], g.data(), *s),
                Op::Relu(x) => {
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accum_owned(&mut before[x.0], dx);
                }
                Op::Exp(x) => {
                    let dx: Vec<f64> = g.data().iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    accum_owned(&mut before[x.0], dx);
                }
                Op::Reciprocal(x) => {
                    let dx: Vec<f64> = g.data().iter().zip(node.value.data()).map(|(g, y)| -g * y * y).collect();
                    accum_owned(&mut before[x.0], dx);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let da = tensor::matmul_nt(g.data(), self.nodes[b.0].value.data(), m, n, k);
                    let db = tensor::matmul_tn(self.nodes[a.0].value.data(), g.data(), m, k, n);
                    accum_owned(&mut before[a.0], da);
                    accum_owned(&mut before[b.0], db);
                }
                Op::Bmm(a, b) => {
                    let (sa, sb) = (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
                    let (bt, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let da = tensor::bmm_nt(g.data(), bv, bt, n, m, k);
                    let db = tensor::bmm_tn(av, g.data(), bt, n, k, m);
                    accum_owned(&mut before[a.0], da);
                    accum_owned(&mut before[b.0], db);
                }
                Op::BmmNt(a, b) => {
                    let (sa, sb) = (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
                    let (bt, n, c, m) = (sa[0], sa[1], sa[2], sb[1]);
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let da = tensor::bmm(g.data(), bv, bt, n, m, c);
                    let db = tensor::bmm_tn(g.data(), av, bt, n, m, c);
                    accum_owned(&mut before[a.0], da);
                    accum_owned(&mut before[b.0], db);
                }
                Op::Conv2d { x, w, bias, pad } => {
                    let sx = self.nodes[x.0].value.shape().to_vec();
                    let sw = self.nodes[w.0].value.shape().to_vec();
                    let sy = node.value.shape().to_vec();
                    let (k, cin, cout) = (sw[0], sw[2], sw[3]);
                    let dx = tensor::conv2d_dx(
                        g.data(),
                        (sy[0], sy[1], sy[2], cout),
                        self.nodes[w.0].value.data(),
                        (k, cin),
                        (sx[1], sx[2]),
                        *pad,
                    );
                    let dw = tensor::conv2d_dw(
                        self.nodes[x.0].value.data(),
                        (sx[0], sx[1], sx[2], cin),
                        g.data(),
                        (k, cout),
                        *pad,
                    );
                    accum_owned(&mut before[x.0], dx);
                    accum_owned(&mut before[w.0], dw);
                    if let Some(bid) = bias {
                        let mut db = vec![0.0; cout];
                        for row in g.data().chunks_exact(cout) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        accum_owned(&mut before[bid.0], db);
                    }
                }
                Op::ConvT2d { y, w, fwd_pad } => {
                    // out = conv(y, adj(w)); <convT(y,w), G> = <y, conv(G,w)>
                    let sw = self.nodes[w.0].value.shape().to_vec();
                    let sg = node.value.shape().to_vec(); // (B,H,W,Cin)
                    let (k, cin, cout) = (sw[0], sw[2], sw[3]);
                    let dy = tensor::conv2d_raw(
                        g.data(),
                        (sg[0], sg[1], sg[2], cin),
                        self.nodes[w.0].value.data(),
                        (k, cout),
                        None,
                        *fwd_pad,
                    );
                    let dw = tensor::conv2d_dw(
                        g.data(),
                        (sg[0], sg[1], sg[2], cin),
                        self.nodes[y.0].value.data(),
                        (k, cout),
                        *fwd_pad,
                    );
                    accum_owned(&mut before[y.0], dy);
                    accum_owned(&mut before[w.0], dw);
                }
                Op::BatchNorm { x, scale, shift, mean, inv_std, train } => {
                    let c = mean.len();
                    let xv = self.nodes[x.0].value.data();
                    let sv = self.nodes[scale.0].value.data();
                    let rows = xv.len() / c;
                    let rn = rows as f64;
                    // dscale / dshift are shared between modes
                    let mut dscale = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    for (xr, gr) in xv.chunks_exact(c).zip(g.data().chunks_exact(c)) {
                        for ch in 0..c {
                            let xhat = (xr[ch] - mean[ch]) * inv_std[ch];
                            dscale[ch] += gr[ch] * xhat;
                            dshift[ch] += gr[ch];
                        }
                    }
                    let mut dx = vec![0.0; xv.len()];
                    if *train {
                        // sum(dxhat) and sum(dxhat * xhat) per channel
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for (xr, gr) in xv.chunks_exact(c).zip(g.data().chunks_exact(c)) {
                            for ch in 0..c {
                                let dxhat = gr[ch] * sv[ch];
                                let xhat = (xr[ch] - mean[ch]) * inv_std[ch];
                                s1[ch] += dxhat;
                                s2[ch] += dxhat * xhat;
                            }
                        }
                        for ((xr, gr), dr) in xv
                            .chunks_exact(c)
                            .zip(g.data().chunks_exact(c))
                            .zip(dx.chunks_exact_mut(c))
                        {
                            for ch in 0..c {
                                let dxhat = gr[ch] * sv[ch];
                                let xhat = (xr[ch] - mean[ch]) * inv_std[ch];
                                dr[ch] = inv_std[ch] / rn * (rn * dxhat - s1[ch] - xhat * s2[ch]);
                            }
                        }
                    } else {
                        for (gr, dr) in g.data().chunks_exact(c).zip(dx.chunks_exact_mut(c)) {
                            for ch in 0..c {
                                dr[ch] = gr[ch] * sv[ch] * inv_std[ch];
                            }
                        }
                    }
                    accum_owned(&mut before[x.0], dx);
                    accum_owned(&mut before[scale.0], dscale);
                    accum_owned(&mut before[shift.0], dshift);
                }
                Op::AvgPool { x, p } => {
                    let sx = self.nodes[x.0].value.shape().to_vec();
                    let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
                    let (ho, wo) = (h / p, w / p);
                    let inv = 1.0 / (p * p) as f64;
                    let mut dx = vec![0.0; b * h * w * c];
                    for img in 0..b {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let src = ((img * ho + oy) * wo + ox) * c;
                                for dy in 0..*p {
                                    for dxx in 0..*p {
                                        let dst = ((img * h + oy * p + dy) * w + ox * p + dxx) * c;
                                        for ch in 0..c {
                                            dx[dst + ch] += g.data()[src + ch] * inv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accum_owned(&mut before[x.0], dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src as usize] += gv;
                    }
                    accum_owned(&mut before[x.0], dx);
                }
                Op::Reshape(x) => accum(&mut before[x.0], g.data(), 1.0),
                Op::SliceLast { x, from, to } => {
                    let c = *self.nodes[x.0].value.shape().last().unwrap();
                    let width = to - from;
                    let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                    for (row, gr) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(width)) {
                        row[*from..*to].copy_from_slice(gr);
                    }
                    accum_owned(&mut before[x.0], dx);
                }
                Op::ConcatLast(a, b) => {
                    let ca = *self.nodes[a.0].value.shape().last().unwrap();
                    let cb = *self.nodes[b.0].value.shape().last().unwrap();
                    let mut da = Vec::with_capacity(self.nodes[a.0].value.len());
                    let mut db = Vec::with_capacity(self.nodes[b.0].value.len());
                    for row in g.data().chunks_exact(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    accum_owned(&mut before[a.0], da);
                    accum_owned(&mut before[b.0], db);
                }
                Op::Softmax(x) => {
                    let k = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y
                        .chunks_exact(k)
                        .zip(g.data().chunks_exact(k))
                        .zip(dx.chunks_exact_mut(k))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ch in 0..k {
                            dr[ch] = yr[ch] * (gr[ch] - dot);
                        }
                    }
                    accum_owned(&mut before[x.0], dx);
                }
                Op::CrossEntropyProbs { p, labels } => {
                    let s = self.nodes[p.0].value.shape();
                    let k = *s.last().unwrap();
                    let rows = labels.len();
                    let pv = self.nodes[p.0].value.data();
                    let gs = g.data()[0];
                    let mut dp = vec![0.0; pv.len()];
                    for (row, &y) in labels.iter().enumerate() {
                        dp[row * k + y] = -gs / (rows as f64 * pv[row * k + y]);
                    }
                    accum_owned(&mut before[p.0], dp);
                }
                Op::MeanCeLogits { logits, labels } => {
                    let s = self.nodes[logits.0].value.shape();
                    let (rows, k) = (s[0], s[1]);
                    let soft = tensor::softmax_rows(self.nodes[logits.0].value.data(), k);
                    let gs = g.data()[0] / rows as f64;
                    let mut dz = soft;
                    for (row, &y) in labels.iter().enumerate() {
                        dz[row * k + y] -= 1.0;
                    }
                    for v in dz.iter_mut() {
                        *v *= gs;
                    }
                    accum_owned(&mut before[logits.0], dz);
                }
                Op::Sum(x) => {
                    let gs = g.data()[0];
                    let dx = vec![gs; self.nodes[x.0].value.len()];
                    accum_owned(&mut before[x.0], dx);
                }
                Op::SumSquares(x) => {
                    let gs = g.data()[0];
                    let dx: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| 2.0 * gs * v).collect();
                    accum_owned(&mut before[x.0], dx);
                }
                Op::RowSum(x) => {
                    let m = *self.nodes[x.0].value.shape().last().unwrap();
                    let mut dx = Vec::with_capacity(self.nodes[x.0].value.len());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat(gv).take(m));
                    }
                    accum_owned(&mut before[x.0], dx);
                }
                Op::RowScale { x, r } => {
                    let c = *self.nodes[x.0].value.shape().last().unwrap();
                    let rv = self.nodes[r.0].value.data();
                    let xv = self.nodes[x.0].value.data();
                    let mut dx = Vec::with_capacity(xv.len());
                    let mut dr = vec![0.0; rv.len()];
                    for (i, (gr, xr)) in g.data().chunks_exact(c).zip(xv.chunks_exact(c)).enumerate() {
                        let f = rv[i];
                        dx.extend(gr.iter().map(|&gv| gv * f));
                        dr[i] = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                    }
                    accum_owned(&mut before[x.0], dx);
                    accum_owned(&mut before[r.0], dr);
                }
                Op::PairwiseSqDist(a, b) => {
                    // da_i = 2*(rowsum(g) ⊙ a - g @ b); db_j = 2*(colsum(g) ⊙ b - g^T @ a)
                    let (sa, sb) = (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
                    let (bt, n, c, m) = (sa[0], sa[1], sa[2], sb[1]);
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let mut da = tensor::bmm(g.data(), bv, bt, n, m, c);
                    let mut db = tensor::bmm_tn(g.data(), av, bt, n, m, c);
                    for (row, darow) in da.chunks_exact_mut(c).enumerate() {
                        let rs: f64 = g.data()[row * m..(row + 1) * m].iter().sum();
                        let arow = &av[row * c..(row + 1) * c];
                        for (dv, &avv) in darow.iter_mut().zip(arow) {
                            *dv = 2.0 * (rs * avv - *dv);
                        }
                    }
                    for item in 0..bt {
                        let gi = &g.data()[item * n * m..(item + 1) * n * m];
                        let mut cs = vec![0.0; m];
                        for row in 0..n {
                            for (j, csv) in cs.iter_mut().enumerate() {
                                *csv += gi[row * m + j];
                            }
                        }
                        for j in 0..m {
                            let brow = &bv[(item * m + j) * c..(item * m + j + 1) * c];
                            let dbrow = &mut db[(item * m + j) * c..(item * m + j + 1) * c];
                            for (dv, &bvv) in dbrow.iter_mut().zip(brow) {
                                *dv = 2.0 * (cs[j] * bvv - *dv);
                            }
                        }
                    }
                    accum_owned(&mut before[a.0], da);
                    accum_owned(&mut before[b.0], db);
                }
                Op::KernelFromSqDist { d2, transform } => {
                    let dv = self.nodes[d2.0].value.data();
                    let dd: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(dv)
                        .map(|(g, &d)| g * transform.derivative_wrt_d2(d))
                        .collect();
                    accum_owned(&mut before[d2.0], dd);
                }
            }
            if let Some(t0) = t0 {
                let entry = op_times.entry(op_name(&node.op)).or_insert((0.0, 0));
                entry.0 += t0.elapsed().as_secs_f64();
                entry.1 += 1;
            }
        }
        if profile {
            let mut rows: Vec<_> = op_times.into_iter().collect();
            rows.sort_by(|a, b| b.1 .0.partial_cmp(&a.1 .0).unwrap());
            for (name, (secs, count)) in rows {
                eprintln!("[backward] {name:20} {:8.2} ms  ({count} ops)", secs * 1e3);
            }
        }
        // Gradients mirror the shape of the value they belong to.
        for (i, slot) in grads.iter_mut().enumerate() {
            if let Some(t) = slot {
                t.set_shape_unchecked(self.nodes[i].value.shape());
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "Leaf",
        Op::Add(..) => "Add",
        Op::Sub(..) => "Sub",
        Op::Mul(..) => "Mul",
        Op::Scale(..) => "Scale",
        Op::Relu(..) => "Relu",
        Op::Exp(..) => "Exp",
        Op::Reciprocal(..) => "Reciprocal",
        Op::MatMul(..) => "MatMul",
        Op::Bmm(..) => "Bmm",
        Op::BmmNt(..) => "BmmNt",
        Op::Conv2d { .. } => "Conv2d",
        Op::ConvT2d { .. } => "ConvT2d",
        Op::BatchNorm { .. } => "BatchNorm",
        Op::AvgPool { .. } => "AvgPool",
        Op::MaxPool { .. } => "MaxPool",
        Op::Reshape(..) => "Reshape",
        Op::SliceLast { .. } => "SliceLast",
        Op::ConcatLast(..) => "ConcatLast",
        Op::Softmax(..) => "Softmax",
        Op::CrossEntropyProbs { .. } => "CrossEntropyProbs",
        Op::MeanCeLogits { .. } => "MeanCeLogits",
        Op::Sum(..) => "Sum",
        Op::SumSquares(..) => "SumSquares",
        Op::RowSum(..) => "RowSum",
        Op::RowScale { .. } => "RowScale",
        Op::PairwiseSqDist(..) => "PairwiseSqDist",
        Op::KernelFromSqDist { .. } => "KernelFromSqDist",
    }
}

fn accum(slot: &mut Option<Tensor>, delta: &[f64], factor: f64) {
    match slot {
        Some(t) => {
            for (dst, &d) in t.data_mut().iter_mut().zip(delta) {
                *dst += factor * d;
            }
        }
        None => {
            // Shape is reattached by the owner; gradients are stored flat and
            // only ever combined with same-shaped values.
            let data: Vec<f64> = delta.iter().map(|&d| factor * d).collect();
            *slot = Some(Tensor::from_vec(&[data.len()], data).unwrap());
        }
    }
}

/// Accumulation that can donate its freshly computed buffer.
fn accum_owned(slot: &mut Option<Tensor>, delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (dst, &d) in t.data_mut().iter_mut().zip(&delta) {
                *dst += d;
            }
        }
        None => {
            let n = delta.len();
            *slot = Some(Tensor::from_vec(&[n], delta).unwrap());
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // d/dx x^2 at x=3 is 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_ce_closed_form() {
        // cross_entropy(softmax([ln 1, ln 3]), class 1) = -ln(3/4)
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let p = tape.softmax(z).unwrap();
        let ce = tape.cross_entropy_probs(p, &[1]).unwrap();
        assert!((tape.value(ce).item() - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((tape.value(ce).item() - 0.2876821).abs() < 1e-7);

        // gradient wrt logits equals p - onehot
        tape.backward(ce).unwrap();
        let gz = tape.grad(z).unwrap().data().to_vec();
        let pv = tape.value(p).data().to_vec();
        assert!((gz[0] - pv[0]).abs() < 1e-12);
        assert!((gz[1] - (pv[1] - 1.0)).abs() < 1e-12);

        // fused path agrees
        let mut tape2 = Tape::new();
        let z2 = tape2.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let ce2 = tape2.mean_ce_logits(z2, &[1]).unwrap();
        assert!((tape2.value(ce2).item() - 0.2876821).abs() < 1e-7);
        tape2.backward(ce2).unwrap();
        for (a, b) in tape2.grad(z2).unwrap().data().iter().zip(&gz) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_label_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap());
        assert!(tape.cross_entropy_probs(p, &[2]).is_err());
    }

    #[test]
    fn conv_zero_input_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4, 2]));
        let w = tape.leaf(Tensor::from_vec(&[3, 3, 2, 3], (0..54).map(|i| i as f64).collect()).unwrap());
        let y = tape.conv2d(x, w, None, Padding::Same).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_transpose_is_adjoint() {
        use crate::rng;
        let mut rng = rng::seeded(11);
        for &k in &[1usize, 3] {
            for &padding in &[Padding::Same, Padding::None] {
                let (h, w, cin, cout) = (5, 4, 3, 2);
                let x = rng::normal_tensor(&mut rng, &[2, h, w, cin], 1.0);
                let kw = rng::normal_tensor(&mut rng, &[k, k, cin, cout], 1.0);
                let mut tape = Tape::new();
                let xi = tape.leaf(x.clone());
                let wi = tape.leaf(kw.clone());
                let yi = tape.conv2d(xi, wi, None, padding).unwrap();
                let y = rng::normal_tensor(&mut rng, tape.value(yi).shape(), 1.0);
                let yid = tape.leaf(y.clone());
                let xti = tape.conv2d_transpose(yid, wi, padding).unwrap();
                // <conv(x,w), y> == <x, convT(y,w)>
                let lhs: f64 = tape.value(yi).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let rhs: f64 = tape.value(xti).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                assert!(
                    (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
                    "adjoint identity failed for k={} pad={:?}: {} vs {}",
                    k,
                    padding,
                    lhs,
                    rhs
                );
            }
        }
    }

    #[test]
    fn one_by_one_transpose_is_channel_matrix_transpose() {
        use crate::rng;
        let mut rng = rng::seeded(3);
        let y = rng::normal_tensor(&mut rng, &[1, 2, 2, 3], 1.0);
        let w = rng::normal_tensor(&mut rng, &[1, 1, 2, 3], 1.0);
        let mut tape = Tape::new();
        let yi = tape.leaf(y.clone());
        let wi = tape.leaf(w.clone());
        let out = tape.conv2d_transpose(yi, wi, Padding::Same).unwrap();
        // manual: out[p, cin] = sum_cout y[p, cout] * w[cin, cout]
        for p in 0..4 {
            for ci in 0..2 {
                let mut want = 0.0;
                for co in 0..3 {
                    want += y.data()[p * 3 + co] * w.data()[ci * 3 + co];
                }
                assert!((tape.value(out).data()[p * 2 + ci] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_transpose_zero() {
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::filled(&[1, 3, 3, 2], 1.5));
        let w = tape.leaf(Tensor::zeros(&[3, 3, 4, 2]));
        let out = tape.conv2d_transpose(y, w, Padding::Same).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disconnected_parameter_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::scalar(5.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(unused).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
