use pidenet::config::RunConfig;
use pidenet::data;
use pidenet::hamiltonian::build_network;
use pidenet::tape::{Mode, Tape};
use pidenet::trainer::{training_loss, SgdOptimizer};
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.apply_text("channels = 8,12,16\nm = 2\npool = 4\n").unwrap();
    let spec = data::SyntheticLongRangeSpec { noise_sigma: cfg.noise, ..Default::default() };
    let train = data::gen_longrange(&spec, 0, 100).unwrap();
    let mut net = build_network(&cfg.network_config().unwrap(), 0).unwrap();
    net.set_mode(Mode::Train);
    let idx: Vec<usize> = (0..100).collect();
    let mut opt = SgdOptimizer::new(0.9);
    let reg = cfg.train_config().reg;

    for round in 0..3 {
        let t0 = Instant::now();
        let (x, labels) = train.batch(&idx, None);
        let t_batch = t0.elapsed();

        let t0 = Instant::now();
        let mut tape = Tape::new();
        let xid = tape.input(x).unwrap();
        let (logits, binding) = net.forward(&mut tape, xid).unwrap();
        let t_fwd = t0.elapsed();

        let t0 = Instant::now();
        let (loss, _) = training_loss(&mut tape, &net, &binding, logits, &labels, &reg).unwrap();
        let t_loss = t0.elapsed();

        let t0 = Instant::now();
        tape.backward(loss).unwrap();
        let t_bwd = t0.elapsed();

        let t0 = Instant::now();
        let grads = binding.grads(&tape);
        opt.step(&mut net, &grads, 0.05);
        let t_opt = t0.elapsed();

        println!(
            "round {round}: batch {:5.1}ms fwd {:6.1}ms loss {:5.1}ms bwd {:6.1}ms opt {:5.1}ms  (nodes {})",
            t_batch.as_secs_f64() * 1e3,
            t_fwd.as_secs_f64() * 1e3,
            t_loss.as_secs_f64() * 1e3,
            t_bwd.as_secs_f64() * 1e3,
            t_opt.as_secs_f64() * 1e3,
            tape.len(),
        );
    }
}
