//! Experiment CLI: train/eval/analyze/profile plus the continuous-side
//! validators under `pide-lab`. Configuration comes from a `key = value`
//! file with flag overrides; every run echoes its effective configuration.
//! The `PIDENET_THREADS` environment variable caps worker threads.

use clap::{Args, Parser, Subcommand};
use pidenet::checkpoint::{self, Checkpoint};
use pidenet::config::RunConfig;
use pidenet::data::{self, Dataset};
use pidenet::diagnostics;
use pidenet::error::{PideError, Result};
use pidenet::hamiltonian::build_network;
use pidenet::pide;
use pidenet::rng;
use pidenet::trainer;
use rand::Rng;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "pidenet", version, about = "Nonlocal Hamiltonian network engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default, Clone)]
struct ConfigArgs {
    /// Path to a key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["synthetic", "cifar10"])]
    dataset: Option<String>,
    /// Directory with CIFAR-10 binary batches
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long, value_parser = ["none", "diffusion", "fraclap", "invfraclap", "log"])]
    nonlocal: Option<String>,
    /// Stages per nonlocal block
    #[arg(long)]
    stages: Option<usize>,
    /// Subsample pool size inside nonlocal blocks
    #[arg(long)]
    pool: Option<usize>,
    /// Verlet step size
    #[arg(long)]
    h: Option<f64>,
    /// Kernel scaling factor
    #[arg(long)]
    lambda: Option<f64>,
    /// Operator order
    #[arg(long)]
    s: Option<f64>,
    /// Hamiltonian blocks per unit
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
    /// Comma-separated channel widths per unit
    #[arg(long)]
    channels: Option<String>,
    /// Noise level of the synthetic dataset
    #[arg(long)]
    noise: Option<f64>,
    /// Horizontal-flip augmentation
    #[arg(long)]
    flip: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.set("dataset", v)?;
        }
        if let Some(v) = &self.data_dir {
            cfg.set("data_dir", v)?;
        }
        if let Some(v) = &self.nonlocal {
            cfg.set("nonlocal", v)?;
        }
        if let Some(v) = self.stages {
            cfg.set("stages", &v.to_string())?;
        }
        if let Some(v) = self.pool {
            cfg.set("pool", &v.to_string())?;
        }
        if let Some(v) = self.h {
            cfg.set("h", &v.to_string())?;
        }
        if let Some(v) = self.lambda {
            cfg.set("lambda", &v.to_string())?;
        }
        if let Some(v) = self.s {
            cfg.set("s", &v.to_string())?;
        }
        if let Some(v) = self.m {
            cfg.set("m", &v.to_string())?;
        }
        if let Some(v) = self.epochs {
            cfg.set("epochs", &v.to_string())?;
        }
        if let Some(v) = self.batch {
            cfg.set("batch", &v.to_string())?;
        }
        if let Some(v) = self.seed {
            cfg.set("seed", &v.to_string())?;
        }
        if let Some(v) = &self.out {
            cfg.set("out", v)?;
        }
        if let Some(v) = &self.channels {
            cfg.set("channels", v)?;
        }
        if let Some(v) = self.noise {
            cfg.set("noise", &v.to_string())?;
        }
        if self.flip {
            cfg.set("flip", "true")?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics plus a checkpoint
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["train", "test"], default_value = "test")]
        split: String,
        #[command(flatten)]
        overrides: ConfigArgs,
    },
    /// Spectral analysis of a checkpoint's nonlocal mixing weights
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "pidenet-out")]
        out: String,
    },
    /// Static FLOP and parameter cost model for a configuration
    Profile {
        #[command(flatten)]
        overrides: ConfigArgs,
        #[arg(long, default_value_t = 32)]
        input_h: usize,
        #[arg(long, default_value_t = 32)]
        input_w: usize,
    },
    /// Continuous-side PIDE validators
    #[command(subcommand, name = "pide-lab")]
    PideLab(PideLabCommand),
}

#[derive(Subcommand)]
enum PideLabCommand {
    /// Forward-Euler nonlocal diffusion run; writes step,l2,variance
    Diffusion {
        #[arg(long, default_value_t = 16)]
        points: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Step size; defaults to 0.95 / (max row sum)
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "pidenet-out")]
        out: String,
    },
    /// Fractional-Laplacian Fourier symbol check; writes xi,measured,exact
    Symbol {
        #[arg(long, default_value_t = 512)]
        grid: usize,
        #[arg(long, default_value_t = 0.5)]
        s: f64,
        #[arg(long, default_value_t = 2)]
        xi_max: usize,
        /// Quadrature radius as a multiple of the grid size
        #[arg(long, default_value_t = 20)]
        radius_mult: usize,
        #[arg(long, default_value = "pidenet-out")]
        out: String,
    },
}

fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.as_str() {
        "cifar10" => {
            if cfg.data_dir.is_empty() {
                return Err(PideError::Config(
                    "dataset cifar10 requires data_dir (--data-dir or the data_dir key)".into(),
                ));
            }
            let mut sets = data::load_cifar10(Path::new(&cfg.data_dir))?;
            data::apply_mean_subtraction(&mut sets.train, &mut sets.test);
            Ok((sets.train, sets.test))
        }
        _ => {
            let spec = data::SyntheticLongRangeSpec { noise_sigma: cfg.noise, ..Default::default() };
            let train = data::gen_longrange(&spec, cfg.seed, cfg.train_count)?;
            let test = data::gen_longrange(&spec, cfg.seed ^ 0x7e57_7e57, cfg.test_count)?;
            Ok((train, test))
        }
    }
}

fn ensure_out(dir: &str) -> Result<PathBuf> {
    let path = PathBuf::from(dir);
    std::fs::create_dir_all(&path)?;
    Ok(path)
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = args.build()?;
    let out = ensure_out(&cfg.out)?;
    std::fs::write(out.join("config.echo"), cfg.echo())?;

    let (train_ds, test_ds) = load_datasets(&cfg)?;
    let net_cfg = cfg.network_config()?;
    let mut net = build_network(&net_cfg, cfg.seed)?;
    println!(
        "training {}-layer network ({} params, nonlocal={}) on {} ({} train / {} test)",
        net.layer_count(),
        net.param_count(),
        cfg.nonlocal,
        cfg.dataset,
        train_ds.len(),
        test_ds.len()
    );

    let outcome = trainer::train(&mut net, &train_ds, &test_ds, &cfg.train_config())?;
    for m in &outcome.history {
        println!(
            "epoch {:>3}  lr {:<8} loss {:<10.6} train_acc {:.4} test_acc {:.4}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc
        );
    }
    std::fs::write(out.join("metrics.csv"), trainer::metrics_csv(&outcome.history))?;
    std::fs::write(out.join("metrics.json"), trainer::metrics_json(&outcome.history))?;
    let mut cp = Checkpoint::from_network(&net, &cfg.echo(), outcome.steps);
    cp.push_optimizer_state(&outcome.optimizer.velocities);
    checkpoint::save(&out.join("checkpoint.pidn"), &cp)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn net_from_checkpoint(path: &Path, overrides: &ConfigArgs) -> Result<(RunConfig, pidenet::hamiltonian::Network)> {
    let cp = checkpoint::load(path)?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&cp.config)?;
    // flags may override dataset selection for evaluation
    if let Some(v) = &overrides.dataset {
        cfg.set("dataset", v)?;
    }
    if let Some(v) = &overrides.data_dir {
        cfg.set("data_dir", v)?;
    }
    if let Some(v) = overrides.seed {
        cfg.set("seed", &v.to_string())?;
    }
    let mut net = build_network(&cfg.network_config()?, cfg.seed)?;
    cp.apply_to_network(&mut net)?;
    Ok((cfg, net))
}

fn cmd_eval(checkpoint: &Path, split: &str, overrides: &ConfigArgs) -> Result<()> {
    let (cfg, mut net) = net_from_checkpoint(checkpoint, overrides)?;
    let (train_ds, test_ds) = load_datasets(&cfg)?;
    let ds = if split == "train" { &train_ds } else { &test_ds };
    let acc = trainer::evaluate(&mut net, ds, cfg.batch)?;
    println!("accuracy {} {:.4}", split, acc);
    Ok(())
}

fn spectral_csv(report: &diagnostics::SpectralReport) -> String {
    let mut out = String::from("matrix,kind,re,im\n");
    for entry in &report.entries {
        for (re, im) in &entry.eigenvalues {
            out.push_str(&format!("{},raw,{},{}\n", entry.name, re, im));
        }
        for v in &entry.sym_eigenvalues {
            out.push_str(&format!("{},symmetric,{},0\n", entry.name, v));
        }
    }
    out
}

fn cmd_analyze(checkpoint: &Path, out_dir: &str) -> Result<()> {
    let (_, net) = net_from_checkpoint(checkpoint, &ConfigArgs::default())?;
    let report = diagnostics::spectral_report(&net)?;
    let out = ensure_out(out_dir)?;
    std::fs::write(out.join("spectral.json"), serde_json::to_string_pretty(&report).unwrap())?;
    std::fs::write(out.join("spectral.csv"), spectral_csv(&report))?;
    match &report.note {
        Some(note) => println!("{note}"),
        None => {
            for e in &report.entries {
                println!(
                    "{} ({}x{}): frac positive re {:.3}, frac positive sym {:.3}",
                    e.name, e.size, e.size, e.frac_positive_real, e.frac_positive_sym
                );
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_profile(overrides: &ConfigArgs, input_hw: (usize, usize)) -> Result<()> {
    let cfg = overrides.build()?;
    let report = diagnostics::flop_estimate(&cfg.network_config()?, input_hw)?;
    println!("layer count {}", report.layer_count);
    println!(
        "total {:.1}M flops, {} params, nonlocal kernel {:.1}M flops",
        report.total_flops / 1e6,
        report.total_params,
        report.nonlocal_kernel_flops / 1e6
    );
    let out = ensure_out(&cfg.out)?;
    std::fs::write(out.join("cost.json"), serde_json::to_string_pretty(&report).unwrap())?;
    let mut csv = String::from("layer,flops,params\n");
    for l in &report.layers {
        csv.push_str(&format!("{},{},{}\n", l.name, l.flops, l.params));
    }
    std::fs::write(out.join("cost.csv"), csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_pide_diffusion(points: usize, steps: usize, dt: Option<f64>, seed: u64, out_dir: &str) -> Result<()> {
    let mut rng = rng::seeded(seed);
    let mut omega = vec![0.0; points * points];
    for i in 0..points {
        for j in 0..i {
            let v: f64 = rng.gen_range(0.0..1.0);
            omega[i * points + j] = v;
            omega[j * points + i] = v;
        }
    }
    let u0: Vec<f64> = (0..points).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bound = pide::diffusion_step_bound(&omega, points);
    let dt = dt.unwrap_or(0.95 * bound);
    let traj = pide::simulate_diffusion(&u0, &omega, points, dt, steps)?;
    if traj.dt_above_bound {
        eprintln!("warning: dt {} exceeds the stability bound {}; decay not guaranteed", dt, bound);
    }
    let mut csv = String::from("step,l2,variance\n");
    for (i, (l2, var)) in traj.l2.iter().zip(&traj.variance).enumerate() {
        csv.push_str(&format!("{},{},{}\n", i, l2, var));
    }
    let out = ensure_out(out_dir)?;
    std::fs::write(out.join("diffusion.csv"), csv)?;
    println!(
        "{} points, {} steps, dt {:.5} (bound {:.5}): l2 {:.6} -> {:.6}",
        points,
        steps,
        dt,
        bound,
        traj.l2.first().unwrap(),
        traj.l2.last().unwrap()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_pide_symbol(grid: usize, s: f64, xi_max: usize, radius_mult: usize, out_dir: &str) -> Result<()> {
    let mut csv = String::from("xi,measured_symbol,exact_symbol\n");
    for xi in 1..=xi_max {
        let (measured, exact) = pide::measure_symbol(grid, xi, s, radius_mult * grid)?;
        println!(
            "xi {}: measured {:.5} exact {:.5} (rel err {:.4})",
            xi,
            measured,
            exact,
            (measured - exact).abs() / exact
        );
        csv.push_str(&format!("{},{},{}\n", xi, measured, exact));
    }
    let out = ensure_out(out_dir)?;
    std::fs::write(out.join("symbol.csv"), csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval { checkpoint, split, overrides } => cmd_eval(checkpoint, split, overrides),
        Command::Analyze { checkpoint, out } => cmd_analyze(checkpoint, out),
        Command::Profile { overrides, input_h, input_w } => cmd_profile(overrides, (*input_h, *input_w)),
        Command::PideLab(PideLabCommand::Diffusion { points, steps, dt, seed, out }) => {
            cmd_pide_diffusion(*points, *steps, *dt, *seed, out)
        }
        Command::PideLab(PideLabCommand::Symbol { grid, s, xi_max, radius_mult, out }) => {
            cmd_pide_symbol(*grid, *s, *xi_max, *radius_mult, out)
        }
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
