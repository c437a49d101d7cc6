use pidenet::config::RunConfig;
use pidenet::data;
use pidenet::hamiltonian::build_network;
use pidenet::trainer;
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.apply_text("channels = 8,12,16\nm = 2\npool = 4\nepochs = 1\n").unwrap();
    let spec = data::SyntheticLongRangeSpec { noise_sigma: cfg.noise, ..Default::default() };
    let train = data::gen_longrange(&spec, 0, 500).unwrap();
    let test = data::gen_longrange(&spec, 1, 100).unwrap();
    let mut net = build_network(&cfg.network_config().unwrap(), 0).unwrap();
    let t0 = Instant::now();
    let out = trainer::train(&mut net, &train, &test, &cfg.train_config()).unwrap();
    let el = t0.elapsed().as_secs_f64();
    println!("1 epoch on 500 imgs (batch 100, 5 steps + eval): {:.2}s  -> est {:.1}s / 5000-img epoch", el, el * 10.0);
    println!("final acc {:.3}", out.history.last().unwrap().test_acc);
}
