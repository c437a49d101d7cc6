//! Spectral stability analysis of nonlocal mixing weights and the
//! FLOP/parameter cost model.
//!
//! The eigenvalue solver is in-repo (elimination Hessenberg reduction plus
//! Francis double-shift QR with deflation); sizes here never exceed the
//! widest mixing matrix, so a dependency-free solver is enough.

use crate::error::{PideError, Result};
use crate::hamiltonian::{HeadKind, Network, NetworkConfig};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;
use num_complex::Complex64;
use serde::Serialize;

// ── Eigenvalues ─────────────────────────────────────────────────────────

/// Stabilized elimination reduction to upper Hessenberg form (similarity
/// transform; the sub-subdiagonal scratch left behind is ignored by `hqr`).
fn hessenberg(a: &mut [f64], n: usize) {
    for m in 1..n.saturating_sub(1) {
        let mut x = 0.0f64;
        let mut piv = m;
        for j in m..n {
            if a[j * n + m - 1].abs() > x.abs() {
                x = a[j * n + m - 1];
                piv = j;
            }
        }
        if piv != m {
            for j in (m - 1)..n {
                a.swap(piv * n + j, m * n + j);
            }
            for j in 0..n {
                a.swap(j * n + piv, j * n + m);
            }
        }
        if x != 0.0 {
            for i in (m + 1)..n {
                let mut y = a[i * n + m - 1];
                if y != 0.0 {
                    y /= x;
                    a[i * n + m - 1] = y;
                    for j in m..n {
                        a[i * n + j] -= y * a[m * n + j];
                    }
                    for j in 0..n {
                        a[j * n + m] += y * a[j * n + i];
                    }
                }
            }
        }
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix; returns the
/// eigenvalues. Exceptional shifts fire every ten stalled sweeps and the
/// total sweep count is capped at 500 n.
fn hqr(a: &mut [f64], n: usize) -> Result<Vec<Complex64>> {
    let idx = |i: usize, j: usize| i * n + j;
    let mut eig = vec![Complex64::new(0.0, 0.0); n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[idx(i, j)].abs();
        }
    }
    if anorm == 0.0 {
        return Ok(eig);
    }
    let budget = 500 * n;
    let mut sweeps = 0usize;
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            // look for a single small subdiagonal element
            let mut l = 0isize;
            for cand in (1..=nn).rev() {
                let s = a[idx((cand - 1) as usize, (cand - 1) as usize)].abs()
                    + a[idx(cand as usize, cand as usize)].abs();
                let s = if s == 0.0 { anorm } else { s };
                if a[idx(cand as usize, (cand - 1) as usize)].abs() + s == s {
                    a[idx(cand as usize, (cand - 1) as usize)] = 0.0;
                    l = cand;
                    break;
                }
            }
            let x = a[idx(nn as usize, nn as usize)];
            if l == nn {
                eig[nn as usize] = Complex64::new(x + t, 0.0);
                nn -= 1;
                break;
            }
            let y = a[idx((nn - 1) as usize, (nn - 1) as usize)];
            let w = a[idx(nn as usize, (nn - 1) as usize)] * a[idx((nn - 1) as usize, nn as usize)];
            if l == nn - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                let x = x + t;
                if q >= 0.0 {
                    z = p + z.copysign(p);
                    let first = x + z;
                    let second = if z != 0.0 { x - w / z } else { first };
                    eig[(nn - 1) as usize] = Complex64::new(first, 0.0);
                    eig[nn as usize] = Complex64::new(second, 0.0);
                } else {
                    eig[(nn - 1) as usize] = Complex64::new(x + p, z);
                    eig[nn as usize] = Complex64::new(x + p, -z);
                }
                nn -= 2;
                break;
            }
            sweeps += 1;
            if sweeps > budget {
                return Err(PideError::EigenNoConvergence(sweeps));
            }
            let (mut x, mut y, mut w) = (x, y, w);
            if its > 0 && its % 10 == 0 {
                // exceptional shift
                t += x;
                for i in 0..=nn {
                    a[idx(i as usize, i as usize)] -= x;
                }
                let s = a[idx(nn as usize, (nn - 1) as usize)].abs()
                    + a[idx((nn - 1) as usize, (nn - 2) as usize)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;

            let (mut p, mut q, mut r);
            let mut m = nn - 2;
            loop {
                let z = a[idx(m as usize, m as usize)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[idx((m + 1) as usize, m as usize)] + a[idx(m as usize, (m + 1) as usize)];
                q = a[idx((m + 1) as usize, (m + 1) as usize)] - z - rr - ss;
                r = a[idx((m + 2) as usize, (m + 1) as usize)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[idx(m as usize, (m - 1) as usize)].abs() * (q.abs() + r.abs());
                let v = p.abs()
                    * (a[idx((m - 1) as usize, (m - 1) as usize)].abs()
                        + z.abs()
                        + a[idx((m + 1) as usize, (m + 1) as usize)].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in (m + 2)..=nn {
                a[idx(i as usize, (i - 2) as usize)] = 0.0;
                if i != m + 2 {
                    a[idx(i as usize, (i - 3) as usize)] = 0.0;
                }
            }
            for k in m..nn {
                if k != m {
                    p = a[idx(k as usize, (k - 1) as usize)];
                    q = a[idx((k + 1) as usize, (k - 1) as usize)];
                    r = if k != nn - 1 { a[idx((k + 2) as usize, (k - 1) as usize)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = (p * p + q * q + r * r).sqrt().copysign(p);
                if s == 0.0 {
                    continue;
                }
                if k == m {
                    if l != m {
                        a[idx(k as usize, (k - 1) as usize)] = -a[idx(k as usize, (k - 1) as usize)];
                    }
                } else {
                    a[idx(k as usize, (k - 1) as usize)] = -s * x;
                }
                p += s;
                x = p / s;
                y = q / s;
                let z = r / s;
                q /= p;
                r /= p;
                for j in (k as usize)..=(nn as usize) {
                    let mut pp = a[idx(k as usize, j)] + q * a[idx((k + 1) as usize, j)];
                    if k != nn - 1 {
                        pp += r * a[idx((k + 2) as usize, j)];
                        a[idx((k + 2) as usize, j)] -= pp * z;
                    }
                    a[idx((k + 1) as usize, j)] -= pp * y;
                    a[idx(k as usize, j)] -= pp * x;
                }
                let mmin = nn.min(k + 3);
                for i in (l as usize)..=(mmin as usize) {
                    let mut pp = x * a[idx(i, k as usize)] + y * a[idx(i, (k + 1) as usize)];
                    if k != nn - 1 {
                        pp += z * a[idx(i, (k + 2) as usize)];
                        a[idx(i, (k + 2) as usize)] -= pp * r;
                    }
                    a[idx(i, (k + 1) as usize)] -= pp * q;
                    a[idx(i, k as usize)] -= pp;
                }
            }
        }
    }
    Ok(eig)
}

/// Eigenvalues of a square real matrix, unordered.
pub fn eigen(matrix: &Tensor) -> Result<Vec<Complex64>> {
    let s = matrix.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(PideError::shape("eigen", format!("{:?}", s)));
    }
    matrix.check_finite("eigen input")?;
    let n = s[0];
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut a = matrix.data().to_vec();
    hessenberg(&mut a, n);
    hqr(&mut a, n)
}

/// Cyclic Jacobi eigenvalues for a symmetric matrix; used for the symmetric
/// parts, where all eigenvalues are real.
pub fn eigen_symmetric(matrix: &Tensor) -> Result<Vec<f64>> {
    let s = matrix.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(PideError::shape("eigen_symmetric", format!("{:?}", s)));
    }
    let n = s[0];
    let mut a = matrix.data().to_vec();
    for sweep in 0.. {
        if sweep > 100 {
            return Err(PideError::EigenNoConvergence(sweep));
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + matrix.max_abs()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i * n + i]).collect())
}

/// K = (K + K^T)/2 + (K - K^T)/2; returns (symmetric, antisymmetric).
pub fn symmetric_split(k: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = k.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(PideError::shape("symmetric_split", format!("{:?}", s)));
    }
    let n = s[0];
    let mut sym = vec![0.0; n * n];
    let mut asym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = k.data()[i * n + j];
            let b = k.data()[j * n + i];
            sym[i * n + j] = 0.5 * (a + b);
            asym[i * n + j] = 0.5 * (a - b);
        }
    }
    Ok((Tensor::from_vec(&[n, n], sym)?, Tensor::from_vec(&[n, n], asym)?))
}

/// Max |x^T K x - x^T K_s x| over random unit-norm samples; the quadratic
/// form only sees the symmetric part.
pub fn quadratic_form_check(k: &Tensor, samples: usize, rng: &mut Prng) -> Result<f64> {
    let (ks, _) = symmetric_split(k)?;
    let n = k.shape()[0];
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut x = rng::normal_tensor(rng, &[n], 1.0);
        let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for v in x.data_mut() {
            *v /= norm;
        }
        let quad = |m: &Tensor| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                let mut row = 0.0;
                for j in 0..n {
                    row += m.data()[i * n + j] * x.data()[j];
                }
                acc += x.data()[i] * row;
            }
            acc
        };
        worst = worst.max((quad(k) - quad(&ks)).abs());
    }
    Ok(worst)
}

// ── Spectral report over a network's nonlocal mixing weights ────────────

#[derive(Clone, Debug, Serialize)]
pub struct WeightSpectrum {
    pub name: String,
    pub size: usize,
    pub eigenvalues: Vec<(f64, f64)>,
    pub frac_positive_real: f64,
    pub sym_eigenvalues: Vec<f64>,
    pub frac_positive_sym: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralReport {
    pub entries: Vec<WeightSpectrum>,
    pub note: Option<String>,
}

fn analyze_square(name: &str, w: &Tensor) -> Result<WeightSpectrum> {
    let eigs = eigen(w)?;
    let n = w.shape()[0];
    let pos = eigs.iter().filter(|e| e.re > 0.0).count();
    let (ks, _) = symmetric_split(w)?;
    let sym = eigen_symmetric(&ks)?;
    let pos_sym = sym.iter().filter(|&&v| v > 0.0).count();
    Ok(WeightSpectrum {
        name: name.to_string(),
        size: n,
        eigenvalues: eigs.iter().map(|e| (e.re, e.im)).collect(),
        frac_positive_real: pos as f64 / n as f64,
        sym_eigenvalues: sym,
        frac_positive_sym: pos_sym as f64 / n as f64,
    })
}

/// Eigen-analysis of the two 1x1 mixing matrices of every nonlocal block.
/// Networks without nonlocal blocks get an empty report with a note.
pub fn spectral_report(net: &Network) -> Result<SpectralReport> {
    let mut entries = Vec::new();
    for (u, unit) in net.units.iter().enumerate() {
        if let Some(nl) = &unit.nonlocal {
            entries.push(analyze_square(&format!("unit{u}.nl.k1"), &nl.k1.weight)?);
            entries.push(analyze_square(&format!("unit{u}.nl.k2"), &nl.k2.weight)?);
        }
    }
    let note = if entries.is_empty() {
        Some("network has no nonlocal blocks; nothing to analyze".to_string())
    } else {
        None
    };
    Ok(SpectralReport { entries, note })
}

// ── FLOP and parameter cost model ───────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct LayerCost {
    pub name: String,
    /// Multiply-adds count as one; BN/activation/pooling one op per element.
    pub flops: f64,
    pub params: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_flops: f64,
    pub total_params: u64,
    /// Pool-size-dependent kernel work: affinity build plus per-stage
    /// aggregations, all proportional to the subsampled strip count.
    pub nonlocal_kernel_flops: f64,
    pub layer_count: usize,
    pub input_hw: (usize, usize),
}

/// Static cost model for a configuration on a given input size. Counts one
/// multiply-add as one FLOP, per image (batch-independent).
pub fn flop_estimate(cfg: &NetworkConfig, input_hw: (usize, usize)) -> Result<CostReport> {
    let mut cfg = cfg.clone();
    cfg.input_hw = input_hw;
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut kernel_flops = 0.0;
    let spatial = cfg.unit_spatial();
    let (h0, w0) = input_hw;

    let conv = |h: usize, w: usize, k: usize, cin: usize, cout: usize| -> f64 {
        (h * w * k * k * cin * cout) as f64
    };

    layers.push(LayerCost {
        name: "input_conv".into(),
        flops: conv(h0, w0, 3, cfg.input_channels, cfg.channels[0]) + (h0 * w0 * cfg.channels[0]) as f64,
        params: (9 * cfg.input_channels * cfg.channels[0] + cfg.channels[0]) as u64,
    });

    for u in 0..cfg.units {
        let (h, w) = spatial[u];
        let c = cfg.channels[u];
        let half = c / 2;
        let hw = (h * w) as f64;
        for b in 0..cfg.blocks_per_unit {
            // two conv + two transposed conv on half channels, plus bias,
            // BN, ReLU, and the Verlet adds
            let convs = 4.0 * conv(h, w, 3, half, half);
            let pointwise = 6.0 * hw * half as f64 + 2.0 * hw * half as f64;
            layers.push(LayerCost {
                name: format!("unit{u}.block{b}"),
                flops: convs + pointwise,
                params: (2 * (9 * half * half) + 2 * half + 4 * half) as u64,
            });
        }
        if let Some(nl) = &cfg.nonlocal {
            let pool = nl.pools[u].min(h).min(w).max(1);
            let n = h * w;
            let m = (h / pool) * (w / pool);
            let cp = c / 2;
            let embed = 2.0 * (n * c * cp) as f64;
            let build = (n * m * cp) as f64;
            let aggregate = nl.stages as f64 * (n * m * c) as f64;
            let mix = nl.stages as f64 * ((n * c * c) as f64 + 3.0 * (n * c) as f64);
            kernel_flops += build + aggregate;
            layers.push(LayerCost {
                name: format!("unit{u}.nl"),
                flops: embed + build + aggregate + mix,
                params: (2 * c * cp + nl.stages.min(2) * (c * c + 2 * c)) as u64,
            });
        }
        if u + 1 < cfg.units {
            let (hn, wn) = spatial[u + 1];
            let cn = cfg.channels[u + 1];
            let pool_cost = if cfg.pool_between_units { hw * c as f64 } else { 0.0 };
            layers.push(LayerCost {
                name: format!("transition{u}"),
                flops: pool_cost + conv(hn, wn, 1, c, cn) + (hn * wn * cn) as f64,
                params: (c * cn + cn) as u64,
            });
        }
    }

    let (hl, wl) = spatial[cfg.units - 1];
    let cl = cfg.channels[cfg.units - 1];
    match cfg.head {
        HeadKind::Classifier { classes } => {
            let d = (hl / 2) * (wl / 2) * cl;
            layers.push(LayerCost {
                name: "head".into(),
                flops: (hl * wl * cl) as f64 + (d * classes) as f64 + classes as f64,
                params: (d * classes + classes) as u64,
            });
        }
        HeadKind::Dense { classes } => {
            layers.push(LayerCost {
                name: "head".into(),
                flops: conv(hl, wl, 1, cl, classes) + (hl * wl * classes) as f64,
                params: (cl * classes + classes) as u64,
            });
        }
    }

    let total_flops = layers.iter().map(|l| l.flops).sum();
    let total_params = layers.iter().map(|l| l.params).sum();
    Ok(CostReport {
        layers,
        total_flops,
        total_params,
        nonlocal_kernel_flops: kernel_flops,
        layer_count: cfg.layer_count(),
        input_hw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::NonlocalConfig;
    use crate::nonlocal::BlockFamily;

    fn tensor2(n: usize, vals: &[f64]) -> Tensor {
        Tensor::from_vec(&[n, n], vals.to_vec()).unwrap()
    }

    fn sorted_re(mut e: Vec<Complex64>) -> Vec<Complex64> {
        e.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));
        e
    }

    #[test]
    fn eigen_identity_and_rotation() {
        let eye = Tensor::from_vec(&[4, 4], {
            let mut v = vec![0.0; 16];
            for i in 0..4 {
                v[i * 4 + i] = 1.0;
            }
            v
        })
        .unwrap();
        let e = eigen(&eye).unwrap();
        assert!(e.iter().all(|z| (z.re - 1.0).abs() < 1e-12 && z.im.abs() < 1e-12));

        // rotation generator [[0,1],[-1,0]] has eigenvalues ±i
        let e = sorted_re(eigen(&tensor2(2, &[0.0, 1.0, -1.0, 0.0])).unwrap());
        assert!(e[0].re.abs() < 1e-12 && (e[0].im.abs() - 1.0).abs() < 1e-12);
        assert!((e[0].im + e[1].im).abs() < 1e-12);
    }

    #[test]
    fn eigen_2x2_and_3x3_against_characteristic_roots() {
        // [[2,1],[1,2]] -> 1, 3
        let e = sorted_re(eigen(&tensor2(2, &[2.0, 1.0, 1.0, 2.0])).unwrap());
        assert!((e[0].re - 1.0).abs() < 1e-10 && (e[1].re - 3.0).abs() < 1e-10);
        // companion of (x-1)(x-2)(x-3) = x^3 - 6x^2 + 11x - 6
        let c = tensor2(3, &[6.0, -11.0, 6.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let e = sorted_re(eigen(&c).unwrap());
        for (got, want) in e.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got.re - want).abs() < 1e-8 && got.im.abs() < 1e-10, "{:?}", e);
        }
    }

    #[test]
    fn eigen_sum_matches_trace_and_sym_is_real() {
        let mut rng = rng::seeded(20);
        for &n in &[3usize, 5, 16, 47, 112] {
            let m = rng::normal_tensor(&mut rng, &[n, n], 1.0);
            let e = eigen(&m).unwrap();
            let sum_re: f64 = e.iter().map(|z| z.re).sum();
            let sum_im: f64 = e.iter().map(|z| z.im).sum();
            let trace: f64 = (0..n).map(|i| m.data()[i * n + i]).sum();
            assert!((sum_re - trace).abs() < 1e-8 * (1.0 + trace.abs()) * n as f64, "n={}", n);
            assert!(sum_im.abs() < 1e-8, "n={}", n);

            let (ks, kas) = symmetric_split(&m).unwrap();
            // split reconstructs to machine precision; Kas is exactly
            // antisymmetric and Ks exactly symmetric
            for i in 0..n {
                for j in 0..n {
                    let v = m.data()[i * n + j];
                    let back = ks.data()[i * n + j] + kas.data()[i * n + j];
                    let scale = v.abs().max(ks.data()[i * n + j].abs()).max(1e-300);
                    assert!((back - v).abs() <= 4.0 * f64::EPSILON * scale);
                    assert_eq!(kas.data()[i * n + j], -kas.data()[j * n + i]);
                    assert_eq!(ks.data()[i * n + j], ks.data()[j * n + i]);
                }
            }
            // general solver on the symmetric part returns (near-)reals
            let esym = eigen(&ks).unwrap();
            assert!(esym.iter().all(|z| z.im.abs() < 1e-10), "n={}", n);
            // jacobi agrees with hqr on the symmetric part
            let mut a: Vec<f64> = esym.iter().map(|z| z.re).collect();
            let mut b = eigen_symmetric(&ks).unwrap();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-7, "n={} {} vs {}", n, x, y);
            }
        }
    }

    #[test]
    fn quadratic_form_blind_to_antisymmetric_part() {
        let mut rng = rng::seeded(21);
        let m = rng::normal_tensor(&mut rng, &[12, 12], 1.0);
        let dev = quadratic_form_check(&m, 50, &mut rng).unwrap();
        assert!(dev < 1e-10, "deviation {}", dev);

        // fully antisymmetric matrix: x^T K x == 0
        let (_, kas) = symmetric_split(&m).unwrap();
        let n = 12;
        for _ in 0..10 {
            let x = rng::normal_tensor(&mut rng, &[n], 1.0);
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += x.data()[i] * kas.data()[i * n + j] * x.data()[j];
                }
            }
            assert!(acc.abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_symmetric_fraction_near_half() {
        let mut positive = 0usize;
        let mut total = 0usize;
        for seed in 0..20 {
            let mut rng = rng::seeded(300 + seed);
            let m = rng::normal_tensor(&mut rng, &[64, 64], 1.0);
            let (ks, _) = symmetric_split(&m).unwrap();
            let e = eigen_symmetric(&ks).unwrap();
            positive += e.iter().filter(|&&v| v > 0.0).count();
            total += e.len();
        }
        let frac = positive as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.1, "fraction {}", frac);
    }

    #[test]
    fn flop_model_matches_hand_computation() {
        // Hamiltonian-74 on 32x32: the convolution terms dominate and land
        // near the reported order of magnitude
        let cfg = NetworkConfig::benchmark(6, 10);
        let report = flop_estimate(&cfg, (32, 32)).unwrap();
        let rel = (report.total_flops - 159.6e6).abs() / 159.6e6;
        assert!(rel < 0.15, "total {} rel {}", report.total_flops, rel);
        assert_eq!(report.layer_count, 74);
        // parameter count near 0.50M
        let rel_p = (report.total_params as f64 - 0.50e6).abs() / 0.50e6;
        assert!(rel_p < 0.10, "params {}", report.total_params);

        let mut with_nl = cfg.clone();
        with_nl.nonlocal = Some(NonlocalConfig::new(BlockFamily::Diffusion));
        let r2 = flop_estimate(&with_nl, (32, 32)).unwrap();
        let rel_p = (r2.total_params as f64 - 0.56e6).abs() / 0.56e6;
        assert!(rel_p < 0.10, "params {}", r2.total_params);
        assert!(r2.total_flops > report.total_flops);
    }

    #[test]
    fn kernel_flops_scale_inverse_square_in_pool() {
        let mut cfg = NetworkConfig::benchmark(6, 10);
        let mut nl = NonlocalConfig::new(BlockFamily::Diffusion);
        nl.pools = vec![1, 1, 1];
        cfg.nonlocal = Some(nl);
        let r1 = flop_estimate(&cfg, (32, 32)).unwrap();
        cfg.nonlocal.as_mut().unwrap().pools = vec![2, 2, 2];
        let r2 = flop_estimate(&cfg, (32, 32)).unwrap();
        assert_eq!(r1.nonlocal_kernel_flops, 4.0 * r2.nonlocal_kernel_flops);
    }

    #[test]
    fn totals_equal_sum_of_parts() {
        let mut cfg = NetworkConfig::benchmark(2, 10);
        cfg.nonlocal = Some(NonlocalConfig::new(BlockFamily::FracLap));
        let r = flop_estimate(&cfg, (32, 32)).unwrap();
        let sum: f64 = r.layers.iter().map(|l| l.flops).sum();
        let sump: u64 = r.layers.iter().map(|l| l.params).sum();
        assert_eq!(sum, r.total_flops);
        assert_eq!(sump, r.total_params);
    }

    #[test]
    fn pool_sweep_monotone_toward_baseline() {
        // SM-style sweep on a 96x96 input
        let mut baseline = NetworkConfig::benchmark(6, 10);
        baseline.input_hw = (96, 96);
        let base = flop_estimate(&baseline, (96, 96)).unwrap().total_flops;
        let mut last = f64::INFINITY;
        for pool in [1usize, 2, 4, 6, 8, 12] {
            let mut cfg = baseline.clone();
            let mut nl = NonlocalConfig::new(BlockFamily::Diffusion);
            nl.pools = vec![pool; 3];
            cfg.nonlocal = Some(nl);
            let total = flop_estimate(&cfg, (96, 96)).unwrap().total_flops;
            assert!(total < last, "pool {} total {}", pool, total);
            assert!(total > base);
            last = total;
        }
    }
}
