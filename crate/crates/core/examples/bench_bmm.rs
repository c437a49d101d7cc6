use pidenet::rng;
use std::time::Instant;

fn variant_match(a: &[f64], bts: &[f64], bt: usize, n: usize, c: usize, m: usize, out: &mut [f64]) {
    for row in 0..bt * n {
        let item = row / n;
        let arow = &a[row * c..(row + 1) * c];
        let crow = &mut out[row * m..(row + 1) * m];
        let bitem = &bts[item * c * m..(item + 1) * c * m];
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

fn main() {
    let mut r = rng::seeded(0);
    let (bt, n, c, m) = (100usize, 1024usize, 8usize, 64usize);
    let a = rng::normal_tensor(&mut r, &[bt * n * c], 1.0);
    let b = rng::normal_tensor(&mut r, &[bt * m * c], 1.0);
    let flops = 2.0 * (bt * n * c * m) as f64;

    // library call
    let t0 = Instant::now();
    let mut reps = 0;
    let mut sink = 0.0;
    while t0.elapsed().as_secs_f64() < 0.5 {
        let out = pidenet::tensor::bmm_nt(a.data(), b.data(), bt, n, c, m);
        sink += out[1];
        reps += 1;
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("library bmm_nt      {:7.2} ms {:5.2} GF/s (sink {sink:.2})", per * 1e3, flops / per / 1e9);

    // manual monomorphic
    let mut bts = vec![0.0; bt * c * m];
    for i in 0..bt {
        for j in 0..m {
            for ch in 0..c {
                bts[i * c * m + ch * m + j] = b.data()[i * m * c + j * c + ch];
            }
        }
    }
    let mut out = vec![0.0; bt * n * m];
    let t0 = Instant::now();
    let mut reps = 0;
    while t0.elapsed().as_secs_f64() < 0.5 {
        out.iter_mut().for_each(|v| *v = 0.0);
        variant_match(a.data(), &bts, bt, n, c, m, &mut out);
        sink += out[1];
        reps += 1;
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("manual single-thread {:7.2} ms {:5.2} GF/s (sink {sink:.2})", per * 1e3, flops / per / 1e9);
}
