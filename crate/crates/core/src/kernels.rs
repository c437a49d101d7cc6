//! Pairwise affinities between pixel strips for every operator family,
//! together with the Gamma function and the operator constants they need.
//!
//! A pixel strip is the C-vector of channel values at one spatial position;
//! images (B,H,W,C) are viewed as strip stacks (B,H*W,C) at zero cost.

use crate::error::{PideError, Result};
use crate::tape::{KernelTransform, NodeId, Tape};
use crate::tensor::{self, Tensor};

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.5772156649015329;

// Lanczos approximation, g = 7, 9 coefficients.
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
];

/// Gamma function on the reals, Lanczos with reflection below 1/2.
/// Relative error is well under 1e-12 on [0.5, 20].
pub fn gamma_fn(x: f64) -> Result<f64> {
    if x <= 0.0 && x == x.floor() {
        return Err(PideError::GammaPole(x));
    }
    if x < 0.5 {
        // Reflection: Γ(x) Γ(1-x) = π / sin(πx)
        let s = (std::f64::consts::PI * x).sin();
        return Ok(std::f64::consts::PI / (s * gamma_fn(1.0 - x)?));
    }
    let z = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    Ok((2.0 * std::f64::consts::PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * acc)
}

/// The five affinity families. Embedded dot and Gaussian come from the
/// attention literature; the remaining three are the singular kernels of the
/// fractional Laplacian, the Riesz potential, and its logarithmic limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    EmbeddedDot,
    EmbeddedGaussian,
    /// |x-y|^-(n+2s), 0 < s < 1
    Fractional,
    /// |x-y|^-(n-2s), 0 < s < n/2
    Riesz,
    /// -2 ln|x-y| - gamma, the s = n/2 limit
    Log,
}

#[derive(Clone, Copy, Debug)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lambda: f64,
    pub s: f64,
    pub n: u32,
    pub include_constant: bool,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lambda: f64, s: f64, n: u32) -> Result<Self> {
        let spec = KernelSpec { family, lambda, s, n, include_constant: true };
        spec.validate()?;
        Ok(spec)
    }

    /// Defaults: lambda 0.1, s 1/2, n 2.
    pub fn with_defaults(family: KernelFamily) -> Self {
        KernelSpec { family, lambda: 0.1, s: 0.5, n: 2, include_constant: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(PideError::InvalidArgument(format!("lambda {} must be positive", self.lambda)));
        }
        if self.n < 1 {
            return Err(PideError::InvalidArgument("dimensional constant n must be >= 1".into()));
        }
        let half_n = self.n as f64 / 2.0;
        match self.family {
            KernelFamily::Fractional if !(self.s > 0.0 && self.s < 1.0) => Err(
                PideError::InvalidArgument(format!("fractional family needs 0 < s < 1, got {}", self.s)),
            ),
            KernelFamily::Riesz if !(self.s > 0.0 && self.s < half_n) => Err(PideError::InvalidArgument(
                format!("riesz family needs 0 < s < n/2, got s={} n={}", self.s, self.n),
            )),
            _ => Ok(()),
        }
    }

    /// Closed-form operator constant in front of the integral: c_{n,s} for
    /// the fractional family, c_{n,-s} for riesz, c_n for log, 1 otherwise.
    pub fn operator_constant(&self) -> Result<f64> {
        if !self.include_constant {
            return Ok(1.0);
        }
        operator_constant(self.n, self.s, self.family)
    }

    fn transform(&self) -> Option<KernelTransform> {
        let n = self.n as f64;
        match self.family {
            KernelFamily::Fractional => Some(KernelTransform::Power { lambda: self.lambda, exponent: n + 2.0 * self.s }),
            KernelFamily::Riesz => Some(KernelTransform::Power { lambda: self.lambda, exponent: n - 2.0 * self.s }),
            KernelFamily::Log => Some(KernelTransform::Log { lambda: self.lambda, gamma: EULER_GAMMA }),
            _ => None,
        }
    }
}

/// c_{n,s} = 4^s Γ(n/2+s) / (π^{n/2} |Γ(-s)|)     (fractional)
/// c_{n,-s} = Γ(n/2-s) / (4^s π^{n/2} Γ(s))        (riesz)
/// c_n = 1 / ((4π)^{n/2} Γ(n/2))                   (log)
pub fn operator_constant(n: u32, s: f64, family: KernelFamily) -> Result<f64> {
    let nf = n as f64;
    let pi = std::f64::consts::PI;
    match family {
        KernelFamily::EmbeddedDot | KernelFamily::EmbeddedGaussian => Ok(1.0),
        KernelFamily::Fractional => {
            if !(s > 0.0 && s < 1.0) {
                return Err(PideError::InvalidArgument(format!("c_(n,s) needs 0 < s < 1, got {}", s)));
            }
            Ok(4f64.powf(s) * gamma_fn(nf / 2.0 + s)? / (pi.powf(nf / 2.0) * gamma_fn(-s)?.abs()))
        }
        KernelFamily::Riesz => {
            if !(s > 0.0 && s < nf / 2.0) {
                // s >= n/2 fails to define a tempered distribution
                return Err(PideError::InvalidArgument(format!("c_(n,-s) needs 0 < s < n/2, got {}", s)));
            }
            Ok(gamma_fn(nf / 2.0 - s)? / (4f64.powf(s) * pi.powf(nf / 2.0) * gamma_fn(s)?))
        }
        KernelFamily::Log => Ok(1.0 / ((4.0 * pi).powf(nf / 2.0) * gamma_fn(nf / 2.0)?)),
    }
}

/// Materialized affinity matrix for one batch of strip stacks, plus the
/// normalizing factor to divide aggregates by.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    /// (B, N, M) kernel entries.
    pub values: Tensor,
    /// The normalizer script-N: the number of strips the sum runs over.
    pub normalizer: f64,
}

/// Kernel entries for strip stacks theta (B,N,C') and phi (B,M,C'). Pure
/// function of its inputs; the tape variant below is used inside blocks.
pub fn affinity(theta: &Tensor, phi: &Tensor, spec: &KernelSpec) -> Result<AffinityMatrix> {
    spec.validate()?;
    let (st, sp) = (theta.shape(), phi.shape());
    if st.len() != 3 || sp.len() != 3 || st[0] != sp[0] || st[2] != sp[2] {
        return Err(PideError::shape("affinity", format!("{:?} x {:?}", st, sp)));
    }
    let (b, n, c, m) = (st[0], st[1], st[2], sp[1]);
    let out = match spec.family {
        KernelFamily::EmbeddedDot => {
            let mut dots = tensor::bmm_nt(theta.data(), phi.data(), b, n, c, m);
            dots.iter_mut().for_each(|d| *d *= spec.lambda);
            dots
        }
        KernelFamily::EmbeddedGaussian => {
            let mut dots = tensor::bmm_nt(theta.data(), phi.data(), b, n, c, m);
            dots.iter_mut().for_each(|d| *d = (spec.lambda * *d).exp());
            dots
        }
        _ => {
            let (mut d2, worst) = tensor::pairwise_sqdist_batched(theta.data(), phi.data(), b, n, m, c);
            if worst < -1e-9 {
                return Err(PideError::NonFinite(format!("distance expansion produced {}", worst)));
            }
            let tr = spec.transform().expect("singular family has a transform");
            d2.iter_mut().for_each(|d| *d = tr.apply(*d));
            d2
        }
    };
    let values = Tensor::from_vec(&[b, n, m], out)?;
    values.check_finite("affinity matrix")?;
    Ok(AffinityMatrix { values, normalizer: m as f64 })
}

/// Tape-recorded affinity between embedded strip stacks; gradients flow back
/// into both embeddings.
pub fn affinity_on_tape(tape: &mut Tape, theta: NodeId, phi: NodeId, spec: &KernelSpec) -> Result<NodeId> {
    spec.validate()?;
    match spec.family {
        KernelFamily::EmbeddedDot => {
            let dots = tape.bmm_nt(theta, phi)?;
            Ok(tape.scale(dots, spec.lambda))
        }
        KernelFamily::EmbeddedGaussian => {
            let dots = tape.bmm_nt(theta, phi)?;
            let scaled = tape.scale(dots, spec.lambda);
            Ok(tape.exp(scaled))
        }
        _ => {
            let d2 = tape.pairwise_sqdist(theta, phi)?;
            Ok(tape.kernel_from_sqdist(d2, spec.transform().expect("singular family")))
        }
    }
}

/// 1x1 convolutional embedding on strips: (B,N,C) x (C,C') -> (B,N,C').
/// Halving embeddings use C' = C/2 (odd C rounds down).
pub fn embed_on_tape(tape: &mut Tape, strips: NodeId, weight: NodeId) -> Result<NodeId> {
    let s = tape.value(strips).shape().to_vec();
    let sw = tape.value(weight).shape().to_vec();
    if s.len() != 3 || sw.len() != 2 || s[2] != sw[0] {
        return Err(PideError::shape("embed", format!("{:?} x {:?}", s, sw)));
    }
    let flat = tape.reshape(strips, &[s[0] * s[1], s[2]])?;
    let out = tape.matmul(flat, weight)?;
    tape.reshape(out, &[s[0], s[1], sw[1]])
}

/// Raw (non-tape) embedding used by reference paths.
pub fn embed_raw(strips: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let s = strips.shape();
    let sw = weight.shape();
    if s.len() != 3 || sw.len() != 2 || s[2] != sw[0] {
        return Err(PideError::shape("embed", format!("{:?} x {:?}", s, sw)));
    }
    let out = tensor::matmul(strips.data(), weight.data(), s[0] * s[1], s[2], sw[1]);
    Tensor::from_vec(&[s[0], s[1], sw[1]], out)
}

/// Max-pool p-by-p patches of (B,H,W,C) and flatten to subsampled strips
/// (B, (H/p)*(W/p), C). p = 1 is the identity.
pub fn subsample_strips_on_tape(tape: &mut Tape, x: NodeId, p: usize) -> Result<NodeId> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(PideError::shape("subsample_strips", format!("{:?}", s)));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if p == 1 {
        return tape.reshape(x, &[b, h * w, c]);
    }
    let pooled = tape.max_pool(x, p)?;
    tape.reshape(pooled, &[b, (h / p) * (w / p), c])
}

pub fn subsample_strips_raw(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(PideError::shape("subsample_strips", format!("{:?}", s)));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if p == 0 || p > h || p > w {
        return Err(PideError::InvalidArgument(format!("pool size {} on {}x{} map", p, h, w)));
    }
    if p == 1 {
        return x.reshaped(&[b, h * w, c]);
    }
    let (y, _) = tensor::max_pool_raw(x.data(), (b, h, w, c), p);
    Tensor::from_vec(&[b, (h / p) * (w / p), c], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const SQRT_PI: f64 = 1.7724538509055159;

    #[test]
    fn gamma_known_values() {
        assert!((gamma_fn(2.0).unwrap() - 1.0).abs() < 1e-13);
        assert!((gamma_fn(0.5).unwrap() - SQRT_PI).abs() < 1e-12);
        // Reflection: Γ(-1/2) = -2√π
        assert!((gamma_fn(-0.5).unwrap() + 2.0 * SQRT_PI).abs() < 1e-11);
        // factorials up the range
        let mut fact = 1.0;
        for k in 1..18u32 {
            assert!(
                (gamma_fn(k as f64).unwrap() - fact).abs() / fact < 1e-12,
                "Γ({}) off",
                k
            );
            fact *= k as f64;
        }
        assert!(gamma_fn(0.0).is_err());
        assert!(gamma_fn(-3.0).is_err());
    }

    #[test]
    fn operator_constants_closed_form() {
        // c_{2,1/2}: 4^(1/2) Γ(3/2) / (π |Γ(-1/2)|) = 2·(√π/2)/(π·2√π) = 1/(2π)
        let c = operator_constant(2, 0.5, KernelFamily::Fractional).unwrap();
        assert!((c - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-10);
        // c_{2,-1/2}: Γ(1/2) / (2 π Γ(1/2)) = 1/(2π)
        let c = operator_constant(2, 0.5, KernelFamily::Riesz).unwrap();
        assert!((c - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-10);
        assert!((EULER_GAMMA - 0.5772156649).abs() < 1e-9);
        // inadmissible riesz range
        assert!(operator_constant(2, 1.0, KernelFamily::Riesz).is_err());
        assert!(operator_constant(2, 1.5, KernelFamily::Fractional).is_err());
    }

    #[test]
    fn dot_family_orthogonal_rows() {
        let theta = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let phi = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let spec = KernelSpec { lambda: 1.0, ..KernelSpec::with_defaults(KernelFamily::EmbeddedDot) };
        let aff = affinity(&theta, &phi, &spec).unwrap();
        assert_eq!(aff.values.data(), &[1.0, 0.0]);
        assert_eq!(aff.normalizer, 1.0);
    }

    #[test]
    fn safe_divide_on_coincident_strips() {
        let theta = Tensor::from_vec(&[1, 2, 2], vec![0.3, -0.7, 1.0, 2.0]).unwrap();
        let phi = theta.clone();
        for family in [KernelFamily::Fractional, KernelFamily::Riesz, KernelFamily::Log] {
            let spec = KernelSpec::with_defaults(family);
            let aff = affinity(&theta, &phi, &spec).unwrap();
            // diagonal entries hit zero distance and are replaced with 0
            assert_eq!(aff.values.data()[0], 0.0, "{:?}", family);
            assert_eq!(aff.values.data()[3], 0.0, "{:?}", family);
            assert!(aff.values.data()[1] != 0.0);
        }
    }

    #[test]
    fn log_kernel_at_unit_distance() {
        // distance exactly 1: entry is -gamma regardless of lambda
        let theta = Tensor::from_vec(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        let phi = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        for lambda in [0.1, 1.0, 3.7] {
            let spec = KernelSpec { lambda, ..KernelSpec::with_defaults(KernelFamily::Log) };
            let aff = affinity(&theta, &phi, &spec).unwrap();
            assert!((aff.values.data()[0] + EULER_GAMMA).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_family_strictly_positive_and_symmetric_config() {
        let mut rng = rng::seeded(42);
        let x = rng::normal_tensor(&mut rng, &[2, 6, 3], 1.0);
        let spec = KernelSpec::with_defaults(KernelFamily::EmbeddedGaussian);
        let aff = affinity(&x, &x, &spec).unwrap();
        assert!(aff.values.data().iter().all(|&v| v > 0.0));
        // shared input + shared embedding: matrix is symmetric per batch item
        let v = aff.values.data();
        for b in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    let a = v[b * 36 + i * 6 + j];
                    let bt = v[b * 36 + j * 6 + i];
                    assert!((a - bt).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn expansion_matches_direct_distances() {
        let mut rng = rng::seeded(9);
        for _ in 0..20 {
            let theta = rng::uniform_tensor(&mut rng, &[1, 5, 4], -10.0, 10.0);
            let phi = rng::uniform_tensor(&mut rng, &[1, 3, 4], -10.0, 10.0);
            let spec = KernelSpec::with_defaults(KernelFamily::Fractional);
            let aff = affinity(&theta, &phi, &spec).unwrap();
            for i in 0..5 {
                for j in 0..3 {
                    let mut d2 = 0.0;
                    for c in 0..4 {
                        let d = theta.data()[i * 4 + c] - phi.data()[j * 4 + c];
                        d2 += d * d;
                    }
                    let direct = if d2.sqrt() < 1e-12 { 0.0 } else { spec.lambda * d2.sqrt().powf(-3.0) };
                    let got = aff.values.data()[i * 3 + j];
                    let rel = (direct - got).abs() / direct.abs().max(1e-300);
                    assert!(rel < 1e-9, "rel {} at ({},{})", rel, i, j);
                }
            }
        }
    }

    #[test]
    fn subsample_geometry() {
        // 6x6 input with p=2 gives 9 strips; constant image stays constant
        let x = Tensor::filled(&[1, 6, 6, 3], 2.5);
        let s = subsample_strips_raw(&x, 2).unwrap();
        assert_eq!(s.shape(), &[1, 9, 3]);
        assert!(s.data().iter().all(|&v| v == 2.5));
        let id = subsample_strips_raw(&x, 1).unwrap();
        assert_eq!(id.shape(), &[1, 36, 3]);
        assert_eq!(id.data(), x.data());
        assert!(subsample_strips_raw(&x, 7).is_err());
    }
}
