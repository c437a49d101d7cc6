//! Dense row-major f64 tensors plus the raw numeric kernels everything else
//! is built from. Layout convention is batch-major, channel-last: images are
//! `(B, H, W, C)` and pixel-strip views are `(B, H*W, C)`.

use crate::error::{PideError, Result};
use std::sync::{Arc, OnceLock};

/// Values share their storage on clone and copy lazily on write, so shape
/// reinterpretation and tape bookkeeping never duplicate buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]) }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; n]) }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(PideError::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// In-place shape replacement; element count must already match.
    pub(crate) fn set_shape_unchecked(&mut self, shape: &[usize]) {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
    }

    /// Same data, new shape; shares the storage. Element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(PideError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(PideError::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }
}

// ── Worker pool sizing ──────────────────────────────────────────────────

/// Worker count, capped by the `PIDENET_THREADS` environment variable.
/// Results are bitwise identical for any worker count: parallel sections
/// only ever split disjoint output rows and keep per-row summation order.
pub fn worker_count() -> usize {
    static WORKERS: OnceLock<usize> = OnceLock::new();
    *WORKERS.get_or_init(|| {
        let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        match std::env::var("PIDENET_THREADS") {
            Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(avail).min(64),
            Err(_) => avail,
        }
    })
}

thread_local! {
    static FORCE_SERIAL: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Runs `f` with intra-op parallelism disabled on this thread. Callers that
/// parallelize at a coarser grain (batch shards) use this to avoid
/// oversubscribing the cores; results are unchanged either way.
pub fn run_serial<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SERIAL.with(|s| {
        let prev = s.get();
        s.set(true);
        let out = f();
        s.set(prev);
        out
    })
}

/// Run `f(row0, rows_chunk)` over contiguous row chunks of `out`, possibly in
/// parallel. `row_len` is the stride of one row in `out`.
fn par_rows(out: &mut [f64], rows: usize, row_len: usize, work_per_row: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    debug_assert_eq!(out.len(), rows * row_len);
    let workers = if FORCE_SERIAL.with(|s| s.get()) { 1 } else { worker_count() };
    // Small jobs are not worth a thread spawn.
    if workers <= 1 || row_len == 0 || rows.saturating_mul(work_per_row) < 500_000 || rows < 2 {
        f(0, out);
        return;
    }
    let per = rows.div_ceil(workers.min(rows));
    std::thread::scope(|scope| {
        let f = &f;
        let mut rest = out;
        let mut row0 = 0;
        while !rest.is_empty() {
            let take = per.min(rest.len() / row_len);
            let (head, tail) = rest.split_at_mut(take * row_len);
            let start = row0;
            scope.spawn(move || f(start, head));
            row0 += take;
            rest = tail;
        }
    });
}

// ── Matrix kernels ──────────────────────────────────────────────────────

fn transpose(b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = b[i * cols + j];
        }
    }
    t
}

// Row-major accumulation kernel: crow += av * brow, vectorizes over n.
#[inline]
fn axpy_rows(chunk: &mut [f64], row0: usize, a: &[f64], b: &[f64], k: usize, n: usize) {
    for (ci, crow) in chunk.chunks_exact_mut(n).enumerate() {
        let arow = &a[(row0 + ci) * k..(row0 + ci + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

// Dot-product kernel against a transposed right factor, vectorizes over k.
#[inline]
fn dot_rows(chunk: &mut [f64], row0: usize, a: &[f64], bt: &[f64], k: usize, n: usize) {
    for (ci, crow) in chunk.chunks_exact_mut(n).enumerate() {
        let arow = &a[(row0 + ci) * k..(row0 + ci + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &bt[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv = s;
        }
    }
}

// Narrow outputs starve the accumulation kernel's inner loop; switch to the
// dot kernel (identical contraction order, so results match bitwise).
const NARROW: usize = 12;

/// c = a @ b with a: (m,k), b: (k,n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if n < NARROW && k >= NARROW {
        let bt = transpose(b, k, n);
        par_rows(&mut c, m, n, 2 * k * n, |row0, chunk| dot_rows(chunk, row0, a, &bt, k, n));
    } else {
        par_rows(&mut c, m, n, 2 * k * n, |row0, chunk| axpy_rows(chunk, row0, a, b, k, n));
    }
    c
}

/// c = a @ b^T with a: (m,k), b: (n,k).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    if k < NARROW && n >= NARROW {
        let bt = transpose(b, n, k);
        par_rows(&mut c, m, n, 2 * k * n, |row0, chunk| axpy_rows(chunk, row0, a, &bt, k, n));
    } else {
        par_rows(&mut c, m, n, 2 * k * n, |row0, chunk| dot_rows(chunk, row0, a, b, k, n));
    }
    c
}

/// Batched c_i = a_i @ b_i over a stack of (n,k) x (k,m) products; the row
/// parallelism spans the whole stack.
pub fn bmm(a: &[f64], b: &[f64], bt: usize, n: usize, k: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), bt * n * k);
    debug_assert_eq!(b.len(), bt * k * m);
    let mut c = vec![0.0; bt * n * m];
    let narrow = m < NARROW && k >= NARROW;
    let bts: Option<Vec<f64>> = narrow.then(|| {
        let mut t = vec![0.0; bt * k * m];
        for i in 0..bt {
            t[i * k * m..(i + 1) * k * m].copy_from_slice(&transpose(&b[i * k * m..(i + 1) * k * m], k, m));
        }
        t
    });
    par_rows(&mut c, bt * n, m, 2 * k * m, |row0, chunk| {
        for (ci, crow) in chunk.chunks_exact_mut(m).enumerate() {
            let row = row0 + ci;
            let item = row / n;
            let arow = &a[row * k..(row + 1) * k];
            match &bts {
                Some(t) => {
                    let bitem = &t[item * k * m..(item + 1) * k * m];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        let brow = &bitem[j * k..(j + 1) * k];
                        let mut s = 0.0;
                        for (&av, &bv) in arow.iter().zip(brow) {
                            s += av * bv;
                        }
                        *cv = s;
                    }
                }
                None => {
                    let bitem = &b[item * k * m..(item + 1) * k * m];
                    for (p, &av) in arow.iter().enumerate() {
                        if av != 0.0 {
                            let brow = &bitem[p * m..(p + 1) * m];
                            for (cv, &bv) in crow.iter_mut().zip(brow) {
                                *cv += av * bv;
                            }
                        }
                    }
                }
            }
        }
    });
    c
}

/// Batched c_i = a_i @ b_i^T over (n,c) x (m,c) stacks. Short strips switch
/// to an accumulation kernel over a transposed right factor so the inner
/// loop runs over m (same contraction order either way).
pub fn bmm_nt(a: &[f64], b: &[f64], bt: usize, n: usize, c: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), bt * n * c);
    debug_assert_eq!(b.len(), bt * m * c);
    let mut out = vec![0.0; bt * n * m];
    let narrow = c < NARROW && m >= NARROW;
    let bts: Option<Vec<f64>> = narrow.then(|| {
        let mut t = vec![0.0; bt * c * m];
        for i in 0..bt {
            t[i * c * m..(i + 1) * c * m].copy_from_slice(&transpose(&b[i * m * c..(i + 1) * m * c], m, c));
        }
        t
    });
    par_rows(&mut out, bt * n, m, 2 * c * m, |row0, chunk| {
        for (ci, crow) in chunk.chunks_exact_mut(m).enumerate() {
            let row = row0 + ci;
            let item = row / n;
            let arow = &a[row * c..(row + 1) * c];
            match &bts {
                Some(t) => {
                    let bitem = &t[item * c * m..(item + 1) * c * m];
                    for (p, &av) in arow.iter().enumerate() {
                        if av != 0.0 {
                            let brow = &bitem[p * m..(p + 1) * m];
                            for (cv, &bv) in crow.iter_mut().zip(brow) {
                                *cv += av * bv;
                            }
                        }
                    }
                }
                None => {
                    let bitem = &b[item * m * c..(item + 1) * m * c];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        let brow = &bitem[j * c..(j + 1) * c];
                        let mut s = 0.0;
                        for (&av, &bv) in arow.iter().zip(brow) {
                            s += av * bv;
                        }
                        *cv = s;
                    }
                }
            }
        }
    });
    out
}

/// Batched c_i = a_i^T @ b_i over (r,k) x (r,m) stacks -> (k,m) each.
pub fn bmm_tn(a: &[f64], b: &[f64], bt: usize, r: usize, k: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), bt * r * k);
    debug_assert_eq!(b.len(), bt * r * m);
    let mut c = vec![0.0; bt * k * m];
    par_rows(&mut c, bt * k, m, 2 * r * m, |row0, chunk| {
        for (ci, crow) in chunk.chunks_exact_mut(m).enumerate() {
            let row = row0 + ci;
            let item = row / k;
            let kk = row % k;
            let aitem = &a[item * r * k..(item + 1) * r * k];
            let bitem = &b[item * r * m..(item + 1) * r * m];
            for t in 0..r {
                let av = aitem[t * k + kk];
                if av != 0.0 {
                    let brow = &bitem[t * m..(t + 1) * m];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    });
    c
}

/// Batched squared pairwise distances via the norm expansion, clamped at
/// zero. Returns the most negative pre-clamp value for corruption checks.
pub fn pairwise_sqdist_batched(a: &[f64], b: &[f64], bt: usize, n: usize, m: usize, c: usize) -> (Vec<f64>, f64) {
    let mut d2 = bmm_nt(a, b, bt, n, c, m);
    let a2: Vec<f64> = a.chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let b2: Vec<f64> = b.chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut worst = 0.0f64;
    for (row, drow) in d2.chunks_exact_mut(m).enumerate() {
        let item = row / n;
        let an = a2[row];
        let brow = &b2[item * m..(item + 1) * m];
        for (v, &bn) in drow.iter_mut().zip(brow) {
            let d = an - 2.0 * *v + bn;
            if d < worst {
                worst = d;
            }
            *v = d.max(0.0);
        }
    }
    (d2, worst)
}

/// c = a^T @ b with a: (r,m), b: (r,n).
pub fn matmul_tn(a: &[f64], b: &[f64], r: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    let mut c = vec![0.0; m * n];
    // Small outputs fit in cache: a single streaming pass over the inputs
    // beats splitting rows (which re-reads both factors per chunk).
    if m * n <= 4096 {
        for (arow, brow) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
            for (kk, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let crow = &mut c[kk * n..(kk + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        return c;
    }
    par_rows(&mut c, m, n, 2 * r * n, |row0, chunk| {
        let rows = chunk.len() / n;
        for t in 0..r {
            let arow = &a[t * m..(t + 1) * m];
            let brow = &b[t * n..(t + 1) * n];
            for ci in 0..rows {
                let av = arow[row0 + ci];
                if av != 0.0 {
                    let crow = &mut chunk[ci * n..(ci + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    });
    c
}

// ── Convolution via im2col ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    None,
}

impl Padding {
    pub fn pad(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::None => 0,
        }
    }
}

pub fn conv_out_size(h: usize, k: usize, pad: usize) -> usize {
    h + 2 * pad + 1 - k
}

/// Unfold (B,H,W,Cin) into (B*Ho*Wo, k*k*Cin) patches with zero padding.
pub fn im2col(x: &[f64], b: usize, h: usize, w: usize, cin: usize, k: usize, pad: usize) -> Vec<f64> {
    let ho = conv_out_size(h, k, pad);
    let wo = conv_out_size(w, k, pad);
    let patch = k * k * cin;
    let mut cols = vec![0.0; b * ho * wo * patch];
    let rows_per_image = ho * wo;
    par_rows(&mut cols, b * rows_per_image, patch, patch, |row0, chunk| {
        for (ci, crow) in chunk.chunks_exact_mut(patch).enumerate() {
            let row = row0 + ci;
            let img = row / rows_per_image;
            let rem = row % rows_per_image;
            let oy = rem / wo;
            let ox = rem % wo;
            for ky in 0..k {
                let iy = (oy + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((img * h + iy as usize) * w + ix as usize) * cin;
                    let dst = (ky * k + kx) * cin;
                    crow[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    });
    cols
}

/// Scatter-add of column gradients back onto the input image (adjoint of
/// im2col). For each tap the valid output range maps to a contiguous input
/// segment, so the inner add runs over whole strided rows.
fn col2im_add(cols: &[f64], b: usize, h: usize, w: usize, cin: usize, k: usize, pad: usize, out: &mut [f64]) {
    let ho = conv_out_size(h, k, pad);
    let wo = conv_out_size(w, k, pad);
    let patch = k * k * cin;
    for img in 0..b {
        for oy in 0..ho {
            let row0 = (img * ho + oy) * wo;
            for ky in 0..k {
                let iy = (oy + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let dst_row = (img * h + iy as usize) * w;
                for kx in 0..k {
                    // valid ox: 0 <= ox + kx - pad < w
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let src0 = (row0 + ox_lo) * patch + (ky * k + kx) * cin;
                    let dst0 = (dst_row + ox_lo + kx - pad) * cin;
                    for (step, dst_chunk) in out[dst0..dst0 + (ox_hi - ox_lo) * cin]
                        .chunks_exact_mut(cin)
                        .enumerate()
                    {
                        let src = &cols[src0 + step * patch..src0 + step * patch + cin];
                        for (d, &s) in dst_chunk.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Direct 3x3 same-padding convolution: per output row, each kernel row
/// contributes window dots of length 3*Cin against a transposed kernel. No
/// patch buffer is materialized.
fn conv3x3_same_direct(
    x: &[f64],
    (b, h, w, cin): (usize, usize, usize, usize),
    kernel: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
    y: &mut [f64],
) {
    // kernel (3,3,cin,cout) -> per kernel row a (cout, 3*cin) transposed block
    let mut kt = vec![0.0; 3 * cout * 3 * cin];
    for ky in 0..3 {
        for kx in 0..3 {
            for ci in 0..cin {
                for co in 0..cout {
                    kt[(ky * cout + co) * 3 * cin + kx * cin + ci] =
                        kernel[((ky * 3 + kx) * cin + ci) * cout + co];
                }
            }
        }
    }
    let kt = &kt;
    par_rows(y, b * h, w * cout, 2 * 9 * cin * cout * w, |row0, chunk| {
        for (ri, out_row) in chunk.chunks_exact_mut(w * cout).enumerate() {
            let row = row0 + ri;
            let img = row / h;
            let oy = row % h;
            if let Some(bias) = bias {
                for oc in out_row.chunks_exact_mut(cout) {
                    oc.copy_from_slice(bias);
                }
            }
            for ky in 0..3usize {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let in_row = &x[((img * h) + iy as usize) * w * cin..][..w * cin];
                let ktrow = &kt[ky * cout * 3 * cin..][..cout * 3 * cin];
                for ox in 0..w {
                    // window covers ix in [ox-1, ox+1]
                    let (win_lo, k_off) = if ox == 0 { (0usize, cin) } else { ((ox - 1) * cin, 0) };
                    let win_hi = ((ox + 2).min(w)) * cin;
                    let window = &in_row[win_lo..win_hi];
                    let dst = &mut out_row[ox * cout..(ox + 1) * cout];
                    for (co, dv) in dst.iter_mut().enumerate() {
                        let krow = &ktrow[co * 3 * cin + k_off..][..window.len()];
                        let mut s = 0.0;
                        for (&av, &kv) in window.iter().zip(krow) {
                            s += av * kv;
                        }
                        *dv += s;
                    }
                }
            }
        }
    });
}

/// conv2d on (B,H,W,Cin) with kernel (k,k,Cin,Cout). 1x1 kernels skip im2col.
pub fn conv2d_raw(
    x: &[f64],
    (b, h, w, cin): (usize, usize, usize, usize),
    kernel: &[f64],
    (k, cout): (usize, usize),
    bias: Option<&[f64]>,
    pad: usize,
) -> Vec<f64> {
    if k == 3 && pad == 1 {
        let mut y = vec![0.0; b * h * w * cout];
        conv3x3_same_direct(x, (b, h, w, cin), kernel, cout, bias, &mut y);
        return y;
    }
    let ho = conv_out_size(h, k, pad);
    let wo = conv_out_size(w, k, pad);
    let mut y = if k == 1 && pad == 0 {
        matmul(x, kernel, b * h * w, cin, cout)
    } else {
        let cols = im2col(x, b, h, w, cin, k, pad);
        matmul(&cols, kernel, b * ho * wo, k * k * cin, cout)
    };
    if let Some(bias) = bias {
        for row in y.chunks_exact_mut(cout) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
    }
    y
}

/// Gradient of conv2d w.r.t. the kernel: cols(x)^T @ dy, shape (k,k,Cin,Cout).
pub fn conv2d_dw(
    x: &[f64],
    (b, h, w, cin): (usize, usize, usize, usize),
    dy: &[f64],
    (k, cout): (usize, usize),
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_size(h, k, pad);
    let wo = conv_out_size(w, k, pad);
    if k == 1 && pad == 0 {
        matmul_tn(x, dy, b * h * w, cin, cout)
    } else {
        let cols = im2col(x, b, h, w, cin, k, pad);
        matmul_tn(&cols, dy, b * ho * wo, k * k * cin, cout)
    }
}

/// Gradient of conv2d w.r.t. the input: exactly the transposed convolution
/// of the output gradient with the same kernel.
pub fn conv2d_dx(
    dy: &[f64],
    (b, ho, wo, cout): (usize, usize, usize, usize),
    kernel: &[f64],
    (k, cin): (usize, usize),
    (h, w): (usize, usize),
    pad: usize,
) -> Vec<f64> {
    debug_assert_eq!(conv_out_size(h, k, pad), ho);
    debug_assert_eq!(conv_out_size(w, k, pad), wo);
    conv2d_transpose_raw(dy, (b, ho, wo, cout), kernel, (k, cin), pad)
}

/// Scatter-based input gradient; retained as the reference adjoint route for
/// the property tests.
pub fn conv2d_dx_scatter(
    dy: &[f64],
    (b, ho, wo, cout): (usize, usize, usize, usize),
    kernel: &[f64],
    (k, cin): (usize, usize),
    (h, w): (usize, usize),
    pad: usize,
) -> Vec<f64> {
    if k == 1 && pad == 0 {
        return matmul_nt(dy, kernel, b * ho * wo, cout, cin);
    }
    let dcols = matmul_nt(dy, kernel, b * ho * wo, cout, k * k * cin);
    let mut dx = vec![0.0; b * h * w * cin];
    col2im_add(&dcols, b, h, w, cin, k, pad, &mut dx);
    dx
}

/// Kernel for the adjoint convolution: spatial flip plus channel swap,
/// (k,k,Cin,Cout) -> (k,k,Cout,Cin).
pub fn adjoint_kernel(kernel: &[f64], k: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut adj = vec![0.0; k * k * cin * cout];
    for ky in 0..k {
        for kx in 0..k {
            for ci in 0..cin {
                for co in 0..cout {
                    let src = ((ky * k + kx) * cin + ci) * cout + co;
                    let dst = (((k - 1 - ky) * k + (k - 1 - kx)) * cout + co) * cin + ci;
                    adj[dst] = kernel[src];
                }
            }
        }
    }
    adj
}

/// Transposed convolution: the exact adjoint of `conv2d_raw` with the same
/// kernel and padding, mapping (B,Ho,Wo,Cout) back to (B,H,W,Cin).
pub fn conv2d_transpose_raw(
    y: &[f64],
    (b, ho, wo, cout): (usize, usize, usize, usize),
    kernel: &[f64],
    (k, cin): (usize, usize),
    fwd_pad: usize,
) -> Vec<f64> {
    let adj = adjoint_kernel(kernel, k, cin, cout);
    conv2d_raw(y, (b, ho, wo, cout), &adj, (k, cin), None, k - 1 - fwd_pad)
}

// ── Pooling ─────────────────────────────────────────────────────────────

/// Average pool with floor semantics: trailing rows/cols that do not fill a
/// full p-by-p patch are dropped.
pub fn avg_pool_raw(x: &[f64], (b, h, w, c): (usize, usize, usize, usize), p: usize) -> Vec<f64> {
    let ho = h / p;
    let wo = w / p;
    let inv = 1.0 / (p * p) as f64;
    let mut y = vec![0.0; b * ho * wo * c];
    for img in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = ((img * ho + oy) * wo + ox) * c;
                for dy in 0..p {
                    for dx in 0..p {
                        let src = ((img * h + oy * p + dy) * w + ox * p + dx) * c;
                        for ch in 0..c {
                            y[dst + ch] += x[src + ch];
                        }
                    }
                }
                for ch in 0..c {
                    y[dst + ch] *= inv;
                }
            }
        }
    }
    y
}

/// Max pool returning values plus flat argmax indices (first max wins ties).
pub fn max_pool_raw(
    x: &[f64],
    (b, h, w, c): (usize, usize, usize, usize),
    p: usize,
) -> (Vec<f64>, Vec<u32>) {
    let ho = h / p;
    let wo = w / p;
    let mut y = vec![0.0; b * ho * wo * c];
    let mut arg = vec![0u32; b * ho * wo * c];
    for img in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = ((img * ho + oy) * wo + ox) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..p {
                        for dx in 0..p {
                            let src = ((img * h + oy * p + dy) * w + ox * p + dx) * c + ch;
                            if x[src] > best {
                                best = x[src];
                                best_at = src;
                            }
                        }
                    }
                    y[dst + ch] = best;
                    arg[dst + ch] = best_at as u32;
                }
            }
        }
    }
    (y, arg)
}

// ── Pointwise and reductions ────────────────────────────────────────────

pub fn relu_raw(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Row-wise softmax over the last dimension, shift-invariant by construction.
pub fn softmax_rows(x: &[f64], row_len: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(row_len).zip(y.chunks_exact_mut(row_len)) {
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            *yv = (xv - m).exp();
            z += *yv;
        }
        for yv in yr.iter_mut() {
            *yv /= z;
        }
    }
    y
}

/// Batch-normalization statistics over all axes except the channel (last).
/// Returns per-channel (mean, biased variance).
pub fn bn_batch_stats(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *vv += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64;
    }
    (mean, var)
}

/// y = scale * (x - mean)/sqrt(var + eps) + shift, channel-last.
pub fn bn_apply(
    x: &[f64],
    c: usize,
    mean: &[f64],
    var: &[f64],
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> Vec<f64> {
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(c).zip(y.chunks_exact_mut(c)) {
        for ch in 0..c {
            yr[ch] = scale[ch] * (xr[ch] - mean[ch]) * inv_std[ch] + shift[ch];
        }
    }
    y
}

/// Pairwise squared distances between row sets via the expansion
/// |x-y|^2 = |x|^2 - 2 x.y + |y|^2, clamped at zero before any sqrt.
/// a: (n, c), b: (m, c) -> (n, m). Returns the most negative pre-clamp value
/// alongside so callers can detect numerical corruption.
pub fn pairwise_sqdist_raw(a: &[f64], b: &[f64], n: usize, m: usize, c: usize) -> (Vec<f64>, f64) {
    let mut d2 = matmul_nt(a, b, n, c, m);
    let a2: Vec<f64> = a.chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let b2: Vec<f64> = b.chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut worst = 0.0f64;
    for i in 0..n {
        let row = &mut d2[i * m..(i + 1) * m];
        for (j, v) in row.iter_mut().enumerate() {
            let d = a2[i] - 2.0 * *v + b2[j];
            if d < worst {
                worst = d;
            }
            *v = d.max(0.0);
        }
    }
    (d2, worst)
}


#[cfg(test)]
mod conv_route_tests {
    use super::*;
    use crate::rng;

    #[test]
    fn direct_conv_matches_im2col_route() {
        let mut r = rng::seeded(31);
        for &(b, h, w, cin, cout) in &[(2usize, 5usize, 7usize, 3usize, 4usize), (1, 1, 1, 2, 3), (1, 4, 2, 1, 1), (3, 8, 8, 4, 4)] {
            let x = rng::normal_tensor(&mut r, &[b * h * w * cin], 1.0);
            let kw = rng::normal_tensor(&mut r, &[9 * cin * cout], 1.0);
            let bias = rng::normal_tensor(&mut r, &[cout], 1.0);
            let direct = conv2d_raw(x.data(), (b, h, w, cin), kw.data(), (3, cout), Some(bias.data()), 1);
            let cols = im2col(x.data(), b, h, w, cin, 3, 1);
            let mut viacols = matmul(&cols, kw.data(), b * h * w, 9 * cin, cout);
            for row in viacols.chunks_exact_mut(cout) {
                for (v, &bv) in row.iter_mut().zip(bias.data()) {
                    *v += bv;
                }
            }
            for (a, bv) in direct.iter().zip(&viacols) {
                assert!((a - bv).abs() < 1e-12, "mismatch {} vs {}", a, bv);
            }
        }
    }

    #[test]
    fn dx_routes_agree() {
        let mut r = rng::seeded(32);
        for &(k, pad) in &[(3usize, 1usize), (3, 0), (1, 0)] {
            let (b, h, w, cin, cout) = (2, 6, 5, 3, 2);
            let ho = conv_out_size(h, k, pad);
            let wo = conv_out_size(w, k, pad);
            let dy = rng::normal_tensor(&mut r, &[b * ho * wo * cout], 1.0);
            let kw = rng::normal_tensor(&mut r, &[k * k * cin * cout], 1.0);
            let fast = conv2d_dx(dy.data(), (b, ho, wo, cout), kw.data(), (k, cin), (h, w), pad);
            let scatter = conv2d_dx_scatter(dy.data(), (b, ho, wo, cout), kw.data(), (k, cin), (h, w), pad);
            for (a, bv) in fast.iter().zip(&scatter) {
                assert!((a - bv).abs() < 1e-12, "k={} pad={}", k, pad);
            }
        }
    }

    #[test]
    fn batched_kernels_match_per_item() {
        let mut r = rng::seeded(33);
        let (bt, n, k, m) = (3, 7, 5, 13);
        let a = rng::normal_tensor(&mut r, &[bt * n * k], 1.0);
        let b = rng::normal_tensor(&mut r, &[bt * k * m], 1.0);
        let all = bmm(a.data(), b.data(), bt, n, k, m);
        for i in 0..bt {
            let single = matmul(&a.data()[i * n * k..(i + 1) * n * k], &b.data()[i * k * m..(i + 1) * k * m], n, k, m);
            for (x, y) in all[i * n * m..(i + 1) * n * m].iter().zip(&single) {
                assert!((x - y).abs() < 1e-13);
            }
        }
        let c = 4;
        let bb = rng::normal_tensor(&mut r, &[bt * m * c], 1.0);
        let aa = rng::normal_tensor(&mut r, &[bt * n * c], 1.0);
        let all = bmm_nt(aa.data(), bb.data(), bt, n, c, m);
        for i in 0..bt {
            let single = matmul_nt(&aa.data()[i * n * c..(i + 1) * n * c], &bb.data()[i * m * c..(i + 1) * m * c], n, c, m);
            for (x, y) in all[i * n * m..(i + 1) * n * m].iter().zip(&single) {
                assert!((x - y).abs() < 1e-13);
            }
        }
        let all = bmm_tn(a.data(), a.data(), bt, n, k, k);
        for i in 0..bt {
            let single = matmul_tn(&a.data()[i * n * k..(i + 1) * n * k], &a.data()[i * n * k..(i + 1) * n * k], n, k, k);
            for (x, y) in all[i * k * k..(i + 1) * k * k].iter().zip(&single) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }
}
