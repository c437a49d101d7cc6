// Micro-timing of the hot kernels at experiment shapes (batch 100).
use pidenet::tensor::*;
use pidenet::rng;
use std::time::Instant;

fn timeit(name: &str, flops: f64, mut f: impl FnMut() -> f64) {
    // warmup
    let mut sink = f();
    let t0 = Instant::now();
    let mut reps = 0;
    while t0.elapsed().as_secs_f64() < 0.4 {
        sink += f();
        reps += 1;
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{name:36} {:8.2} ms  {:6.2} GF/s   (sink {sink:.1})", per * 1e3, flops / per / 1e9);
}

fn main() {
    let mut r = rng::seeded(0);
    let x = rng::normal_tensor(&mut r, &[100 * 32 * 32 * 4], 1.0);
    let w = rng::normal_tensor(&mut r, &[3 * 3 * 4 * 4], 1.0);
    let dims = (100, 32, 32, 4);

    timeit("im2col U1", 0.0, || {
        let c = im2col(x.data(), 100, 32, 32, 4, 3, 1);
        c[0]
    });
    let cols = im2col(x.data(), 100, 32, 32, 4, 3, 1);
    timeit("conv fwd matmul (102400,36,4)", 2.0 * 102400.0 * 36.0 * 4.0, || {
        let c = matmul(&cols, w.data(), 102400, 36, 4);
        c[0]
    });
    timeit("conv dw matmul_tn (102400;36,4)", 2.0 * 102400.0 * 36.0 * 4.0, || {
        let c = matmul_tn(&cols, x.data(), 102400, 36, 4);
        c[0]
    });
    timeit("conv dx matmul_nt (102400,4;36)", 2.0 * 102400.0 * 36.0 * 4.0, || {
        let c = matmul_nt(x.data(), w.data(), 102400, 4, 36);
        c[0]
    });
    timeit("conv2d_raw full", 2.0 * 102400.0 * 36.0 * 4.0, || {
        let c = conv2d_raw(x.data(), dims, w.data(), (3, 4), None, 1);
        c[0]
    });
    timeit("conv2d_dx full", 2.0 * 102400.0 * 36.0 * 4.0, || {
        let c = conv2d_dx(x.data(), dims, w.data(), (3, 4), (32, 32), 1);
        c[0]
    });

    // nonlocal shapes
    let theta = rng::normal_tensor(&mut r, &[100 * 1024 * 4], 1.0);
    let phi = rng::normal_tensor(&mut r, &[100 * 64 * 4], 1.0);
    timeit("sqdist (100,1024,64,c4)", 2.0 * 100.0 * 1024.0 * 64.0 * 4.0, || {
        let (d, _) = pairwise_sqdist_batched(theta.data(), phi.data(), 100, 1024, 64, 4);
        d[0]
    });
    let omega = rng::normal_tensor(&mut r, &[100 * 1024 * 64], 1.0);
    let basis = rng::normal_tensor(&mut r, &[100 * 64 * 8], 1.0);
    timeit("agg bmm (100,1024,64,8)", 2.0 * 100.0 * 1024.0 * 64.0 * 8.0, || {
        let c = bmm(omega.data(), basis.data(), 100, 1024, 64, 8);
        c[0]
    });
    let gk = rng::normal_tensor(&mut r, &[100 * 1024 * 8], 1.0);
    timeit("bmm_nt dOmega (100,1024,8,64)", 2.0 * 100.0 * 1024.0 * 64.0 * 8.0, || {
        let c = bmm_nt(gk.data(), basis.data(), 100, 1024, 8, 64);
        c[0]
    });
    timeit("bmm_tn dBasis (100;1024,64,8)", 2.0 * 100.0 * 1024.0 * 64.0 * 8.0, || {
        let c = bmm_tn(omega.data(), gk.data(), 100, 1024, 64, 8);
        c[0]
    });
    // strips matmul theta embed: (102400, 8)x(8,4)
    let xs = rng::normal_tensor(&mut r, &[102400 * 8], 1.0);
    let we = rng::normal_tensor(&mut r, &[8 * 4], 1.0);
    timeit("embed matmul (102400,8,4)", 2.0 * 102400.0 * 32.0, || {
        let c = matmul(xs.data(), we.data(), 102400, 8, 4);
        c[0]
    });
    // K mix matmul (102400, 8)x(8,8)
    let wk = rng::normal_tensor(&mut r, &[64], 1.0);
    timeit("mix matmul (102400,8,8)", 2.0 * 102400.0 * 64.0, || {
        let c = matmul(xs.data(), wk.data(), 102400, 8, 8);
        c[0]
    });
}
