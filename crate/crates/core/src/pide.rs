//! Continuous-side validators: forward-Euler simulation of the nonlocal
//! diffusion flow with its decay properties, and a direct-quadrature check
//! of the fractional Laplacian's Fourier symbol on periodic grids.

use crate::error::{PideError, Result};
use crate::kernels::{operator_constant, KernelFamily};

/// Real field on a periodic grid (1-D or 2-D).
#[derive(Clone, Debug)]
pub struct GridField {
    pub values: Vec<f64>,
    pub dims: Vec<usize>,
    pub spacing: f64,
}

impl GridField {
    pub fn new_1d(values: Vec<f64>, spacing: f64) -> Result<Self> {
        if values.is_empty() || !values.iter().all(|v| v.is_finite()) || !(spacing > 0.0) {
            return Err(PideError::InvalidArgument("grid field needs finite values and positive spacing".into()));
        }
        let dims = vec![values.len()];
        Ok(GridField { values, dims, spacing })
    }

    pub fn new_2d(values: Vec<f64>, (ny, nx): (usize, usize), spacing: f64) -> Result<Self> {
        if values.len() != ny * nx || !values.iter().all(|v| v.is_finite()) || !(spacing > 0.0) {
            return Err(PideError::InvalidArgument("grid field shape/values invalid".into()));
        }
        Ok(GridField { values, dims: vec![ny, nx], spacing })
    }

    /// Unit-interval periodic sample of sin(2 pi xi x) on n points.
    pub fn sine_1d(n: usize, xi: usize) -> Self {
        let spacing = 1.0 / n as f64;
        let values = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * xi as f64 * i as f64 * spacing).sin())
            .collect();
        GridField { values, dims: vec![n], spacing }
    }
}

/// Result of a diffusion simulation: per-step L2 norms, variances, means.
#[derive(Clone, Debug)]
pub struct DiffusionTrajectory {
    pub states: Vec<Vec<f64>>,
    pub l2: Vec<f64>,
    pub variance: Vec<f64>,
    pub mean: Vec<f64>,
    /// Set when dt exceeded the sufficient stability bound 1/(max row sum);
    /// decay is then not guaranteed.
    pub dt_above_bound: bool,
}

fn l2_norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn mean_var(u: &[f64]) -> (f64, f64) {
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Forward-Euler integration of du_i/dt = sum_j w_ij (u_j - u_i) for a
/// symmetric nonnegative kernel matrix. The pairwise update form makes the
/// mean conserved up to the final summation rounding; under the step bound
/// dt < 1/(max_i sum_j w_ij) the L2 norm and variance are nonincreasing.
pub fn simulate_diffusion(
    u0: &[f64],
    omega: &[f64],
    n: usize,
    dt: f64,
    steps: usize,
) -> Result<DiffusionTrajectory> {
    if u0.len() != n || omega.len() != n * n {
        return Err(PideError::shape("simulate_diffusion", format!("{} points, {} kernel entries", u0.len(), omega.len())));
    }
    if !(dt > 0.0) {
        return Err(PideError::InvalidArgument("dt must be positive".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (omega[i * n + j] - omega[j * n + i]).abs() > 1e-12 {
                return Err(PideError::InvalidArgument(format!("kernel not symmetric at ({i},{j})")));
            }
        }
    }
    if omega.iter().any(|&w| w < 0.0) {
        return Err(PideError::InvalidArgument("kernel must be nonnegative".into()));
    }
    let max_row_sum = (0..n)
        .map(|i| omega[i * n..(i + 1) * n].iter().sum::<f64>())
        .fold(0.0f64, f64::max);
    let dt_above_bound = max_row_sum > 0.0 && dt >= 1.0 / max_row_sum;

    let mut u = u0.to_vec();
    let mut states = Vec::with_capacity(steps + 1);
    let mut l2 = Vec::with_capacity(steps + 1);
    let mut variance = Vec::with_capacity(steps + 1);
    let mut mean = Vec::with_capacity(steps + 1);
    let record = |u: &[f64], states: &mut Vec<Vec<f64>>, l2: &mut Vec<f64>, variance: &mut Vec<f64>, mean: &mut Vec<f64>| {
        states.push(u.to_vec());
        l2.push(l2_norm(u));
        let (m, v) = mean_var(u);
        mean.push(m);
        variance.push(v);
    };
    record(&u, &mut states, &mut l2, &mut variance, &mut mean);

    let mut du = vec![0.0; n];
    for _ in 0..steps {
        du.iter_mut().for_each(|v| *v = 0.0);
        // Each unordered pair contributes antisymmetrically, so the update
        // sums to zero pairwise under kernel symmetry.
        for i in 0..n {
            for j in (i + 1)..n {
                let w = omega[i * n + j];
                if w != 0.0 {
                    let flow = w * (u[j] - u[i]);
                    du[i] += flow;
                    du[j] -= flow;
                }
            }
        }
        for (uv, &d) in u.iter_mut().zip(&du) {
            *uv += dt * d;
        }
        record(&u, &mut states, &mut l2, &mut variance, &mut mean);
    }
    Ok(DiffusionTrajectory { states, l2, variance, mean, dt_above_bound })
}

/// Sufficient forward-Euler step bound for guaranteed decay.
pub fn diffusion_step_bound(omega: &[f64], n: usize) -> f64 {
    let max_row_sum = (0..n)
        .map(|i| omega[i * n..(i + 1) * n].iter().sum::<f64>())
        .fold(0.0f64, f64::max);
    if max_row_sum > 0.0 {
        1.0 / max_row_sum
    } else {
        f64::INFINITY
    }
}

/// Direct quadrature of the fractional Laplacian on a periodic grid:
///
///   (-Δ)^s u(x) ≈ c_{n,s} Σ_{0<|k|<=R} (u(x) - u(x+k dx)) / |k dx|^{n+2s} dx^n
///
/// The window radius R is measured in grid points and may exceed the grid
/// size: offsets wrap around, which sums over periodic images and captures
/// the slowly decaying kernel tail that a single period misses.
pub fn fractional_laplacian_apply(u: &GridField, s: f64, radius: usize) -> Result<GridField> {
    if !(s > 0.0 && s < 1.0) {
        return Err(PideError::InvalidArgument(format!("fractional order s={} outside (0,1)", s)));
    }
    if radius == 0 {
        return Err(PideError::InvalidArgument("quadrature radius must be positive".into()));
    }
    match u.dims.len() {
        1 => {
            let n = u.dims[0];
            let c = operator_constant(1, s, KernelFamily::Fractional)?;
            let dx = u.spacing;
            let mut out = vec![0.0; n];
            for k in 1..=radius {
                let w = 1.0 / (k as f64 * dx).powf(1.0 + 2.0 * s);
                for i in 0..n {
                    let fwd = u.values[(i + k) % n];
                    let bwd = u.values[(i + n - (k % n)) % n];
                    out[i] += (2.0 * u.values[i] - fwd - bwd) * w;
                }
            }
            for v in out.iter_mut() {
                *v *= c * dx;
            }
            Ok(GridField { values: out, dims: u.dims.clone(), spacing: dx })
        }
        2 => {
            let (ny, nx) = (u.dims[0], u.dims[1]);
            let c = operator_constant(2, s, KernelFamily::Fractional)?;
            let dx = u.spacing;
            let r = radius as isize;
            let mut out = vec![0.0; ny * nx];
            for ky in -r..=r {
                for kx in -r..=r {
                    if ky == 0 && kx == 0 {
                        continue;
                    }
                    let d = ((ky * ky + kx * kx) as f64).sqrt() * dx;
                    let w = 1.0 / d.powf(2.0 + 2.0 * s);
                    for y in 0..ny {
                        let sy = ((y as isize + ky).rem_euclid(ny as isize)) as usize;
                        for x in 0..nx {
                            let sx = ((x as isize + kx).rem_euclid(nx as isize)) as usize;
                            out[y * nx + x] += (u.values[y * nx + x] - u.values[sy * nx + sx]) * w;
                        }
                    }
                }
            }
            for v in out.iter_mut() {
                *v *= c * dx * dx;
            }
            Ok(GridField { values: out, dims: u.dims.clone(), spacing: dx })
        }
        _ => Err(PideError::InvalidArgument("grid fields are 1-D or 2-D".into())),
    }
}

/// Measures the amplification of a single Fourier mode: the ratio of the
/// operator output to the input at the input's extremum.
pub fn measure_symbol(n: usize, xi: usize, s: f64, radius: usize) -> Result<(f64, f64)> {
    let u = GridField::sine_1d(n, xi);
    let out = fractional_laplacian_apply(&u, s, radius)?;
    let (mut best, mut at) = (0.0f64, 0usize);
    for (i, &v) in u.values.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            at = i;
        }
    }
    let measured = out.values[at] / u.values[at];
    let exact = (2.0 * std::f64::consts::PI * xi as f64).powf(2.0 * s);
    Ok((measured, exact))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_symmetric_kernel(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let v: f64 = rng.gen_range(0.0..1.0);
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
        w
    }

    #[test]
    fn constant_field_is_stationary() {
        let n = 8;
        let w = random_symmetric_kernel(n, 1);
        let u0 = vec![3.25; n];
        let dt = 0.5 * diffusion_step_bound(&w, n);
        let traj = simulate_diffusion(&u0, &w, n, dt, 50).unwrap();
        for state in &traj.states {
            assert_eq!(state, &u0);
        }
    }

    #[test]
    fn two_point_closed_form() {
        // (u1 - u2)(t) = (u1 - u2)(0) * (1 - 2 w dt)^steps
        let w = 0.37;
        let omega = vec![0.0, w, w, 0.0];
        let u0 = vec![1.0, -0.5];
        let dt = 0.8 / (2.0 * w); // below the bound 1/w? row sum = w, bound = 1/w
        let steps = 60;
        let traj = simulate_diffusion(&u0, &omega, 2, dt, steps).unwrap();
        let mut expect = u0[0] - u0[1];
        for _ in 0..steps {
            expect *= 1.0 - 2.0 * w * dt;
        }
        let got = traj.states[steps][0] - traj.states[steps][1];
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
    }

    #[test]
    fn l2_and_variance_decay_mean_conserved() {
        for seed in 0..10 {
            let n = 16;
            let w = random_symmetric_kernel(n, 100 + seed);
            let mut rng = rng::seeded(seed);
            let u0: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dt = 0.95 * diffusion_step_bound(&w, n);
            let traj = simulate_diffusion(&u0, &w, n, dt, 200).unwrap();
            assert!(!traj.dt_above_bound);
            for t in 1..traj.l2.len() {
                assert!(traj.l2[t] <= traj.l2[t - 1] + 1e-13, "l2 grew at {}", t);
                assert!(traj.variance[t] <= traj.variance[t - 1] + 1e-13, "var grew at {}", t);
            }
            let drift = (traj.mean.last().unwrap() - traj.mean[0]).abs();
            assert!(drift < 1e-12, "mean drift {}", drift);
        }
    }

    #[test]
    fn above_bound_is_flagged() {
        let w = random_symmetric_kernel(6, 7);
        let dt = 2.0 * diffusion_step_bound(&w, 6);
        let traj = simulate_diffusion(&vec![1.0, 0.0, 0.5, -1.0, 2.0, 0.3], &w, 6, dt, 5).unwrap();
        assert!(traj.dt_above_bound);
    }

    #[test]
    fn asymmetric_kernel_rejected() {
        let omega = vec![0.0, 1.0, 0.5, 0.0];
        assert!(simulate_diffusion(&[1.0, 2.0], &omega, 2, 0.1, 3).is_err());
    }

    #[test]
    fn fractional_laplacian_of_constant_vanishes() {
        let u = GridField::new_1d(vec![4.2; 64], 1.0 / 64.0).unwrap();
        let out = fractional_laplacian_apply(&u, 0.5, 20 * 64).unwrap();
        assert!(out.values.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn fractional_laplacian_is_linear() {
        let n = 48;
        let mut rng = rng::seeded(5);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ca, cb) = (1.7, -0.3);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| ca * x + cb * y).collect();
        let dx = 1.0 / n as f64;
        let s = 0.4;
        let r = 4 * n;
        let fa = fractional_laplacian_apply(&GridField::new_1d(a, dx).unwrap(), s, r).unwrap();
        let fb = fractional_laplacian_apply(&GridField::new_1d(b, dx).unwrap(), s, r).unwrap();
        let fmix = fractional_laplacian_apply(&GridField::new_1d(mix, dx).unwrap(), s, r).unwrap();
        for i in 0..n {
            let lin = ca * fa.values[i] + cb * fb.values[i];
            assert!((lin - fmix.values[i]).abs() < 1e-10 * lin.abs().max(1.0));
        }
    }

    #[test]
    fn symbol_within_tolerance_and_refines() {
        for &s in &[0.25, 0.5, 0.75] {
            for &xi in &[1usize, 2] {
                let (m512, exact) = measure_symbol(512, xi, s, 20 * 512).unwrap();
                let (m128, _) = measure_symbol(128, xi, s, 20 * 128).unwrap();
                let e512 = (m512 - exact).abs() / exact;
                let e128 = (m128 - exact).abs() / exact;
                assert!(e512 < 0.15, "s={} xi={}: err {}", s, xi, e512);
                assert!(e512 < e128, "s={} xi={}: {} !< {}", s, xi, e512, e128);
            }
        }
    }

    #[test]
    fn near_one_order_tracks_discrete_laplacian() {
        // cosine similarity with the 3-point (-Δ) stencil at s = 0.95
        let n = 512;
        let dx = 1.0 / n as f64;
        let x: Vec<f64> = (0..n).map(|i| i as f64 * dx).collect();
        let u: Vec<f64> = x
            .iter()
            .map(|&t| {
                (2.0 * std::f64::consts::PI * t).sin()
                    + 0.5 * (4.0 * std::f64::consts::PI * t).cos()
                    + 0.25 * (6.0 * std::f64::consts::PI * t + 0.3).sin()
            })
            .collect();
        let frac = fractional_laplacian_apply(&GridField::new_1d(u.clone(), dx).unwrap(), 0.95, 20 * n).unwrap();
        let lap3: Vec<f64> = (0..n)
            .map(|i| (2.0 * u[i] - u[(i + 1) % n] - u[(i + n - 1) % n]) / (dx * dx))
            .collect();
        let dot: f64 = frac.values.iter().zip(&lap3).map(|(a, b)| a * b).sum();
        let cos = dot / (l2_norm(&frac.values) * l2_norm(&lap3));
        assert!(cos > 0.99, "cosine {}", cos);
    }

    #[test]
    fn two_d_constant_vanishes_and_linear_smoke() {
        let u = GridField::new_2d(vec![1.5; 8 * 8], (8, 8), 1.0 / 8.0).unwrap();
        let out = fractional_laplacian_apply(&u, 0.5, 8).unwrap();
        assert!(out.values.iter().all(|&v| v.abs() < 1e-12));
    }
}
