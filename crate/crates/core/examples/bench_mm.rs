use pidenet::tensor::matmul;
use std::time::Instant;

fn main() {
    // typical conv-im2col shapes at desk scale
    for &(m, k, n) in &[(25600usize, 36usize, 8usize), (102400, 36, 8), (1024, 4, 64), (25600, 72, 8), (2048, 512, 64)] {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let t0 = Instant::now();
        let mut reps = 0;
        let mut sink = 0.0;
        while t0.elapsed().as_secs_f64() < 0.5 {
            let c = matmul(&a, &b, m, k, n);
            sink += c[0];
            reps += 1;
        }
        let el = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n) as f64 * reps as f64) / el / 1e9;
        println!("m={m} k={k} n={n}: {:.2} GFLOP/s ({} reps, sink {:.2})", gflops, reps, sink);
    }
}
