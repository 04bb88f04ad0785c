use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use gatelab::autodiff::grad_check;
use gatelab::cells::CellKind;
use gatelab::experiment::{compare, run_histograms, run_perturb, run_trace, run_train};
use gatelab::persistence::{load_model, write_json, ExperimentConfig};
use gatelab::probes::ProjectionMethod;
use gatelab::training::{PhoneTask, RecallTask, TaskConfig};

#[derive(Parser)]
#[command(name = "gatelab", version, about = "Gated recurrent cell experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for model.json, metrics.csv and config.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare BPTT gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        cell: CellKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        residual: bool,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Run a probe on a trained model.
    Probe {
        #[command(subcommand)]
        probe: Probe,
    },
    /// Generate a toy dataset.
    GenData(GenData),
    /// Run every probe on two models and write the metrics side by side.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ProbeCommon {
    #[arg(long)]
    model: PathBuf,
    /// Experiment config supplying the task and probe settings.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Index of the sequence in the generated dataset.
    #[arg(long)]
    sequence: Option<usize>,
}

#[derive(Subcommand)]
enum Probe {
    Hist {
        #[command(flatten)]
        common: ProbeCommon,
        #[arg(long)]
        units: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        clip: Option<f64>,
    },
    Trace {
        #[command(flatten)]
        common: ProbeCommon,
        #[arg(long)]
        method: Option<ProjectionMethod>,
    },
    Perturb {
        #[command(flatten)]
        common: ProbeCommon,
        #[arg(long)]
        noise_pos: Option<usize>,
        #[arg(long)]
        noise_len: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        noise_seed: Option<u64>,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_parser = ["phones", "recall"])]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    num_seq: usize,
    #[arg(long, default_value_t = 100)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    #[arg(long, default_value_t = 5)]
    min_dwell: usize,
    #[arg(long, default_value_t = 15)]
    max_dwell: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_std: f64,
    #[arg(long, default_value_t = 10)]
    delay: usize,
    #[arg(long, default_value_t = 4)]
    symbols: usize,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn load_net(path: &Path) -> Result<gatelab::cells::Network> {
    Ok(load_model(path)
        .with_context(|| format!("model {}", path.display()))?
        .0)
}

fn run_probe(probe: Probe) -> Result<()> {
    let (common, mut cfg) = match &probe {
        Probe::Hist { common, .. }
        | Probe::Trace { common, .. }
        | Probe::Perturb { common, .. } => (common, load_config(&common.config)?),
    };
    let net = load_net(&common.model)?;
    let out = Some(common.out.as_path());
    match &probe {
        Probe::Hist {
            units, bins, clip, ..
        } => {
            let h = &mut cfg.probes.histogram;
            h.units_per_layer = units.unwrap_or(h.units_per_layer);
            h.bins = bins.unwrap_or(h.bins);
            h.clip = clip.unwrap_or(h.clip);
            cfg.validate()?;
            for r in run_histograms(&net, &cfg, out)? {
                println!(
                    "layer {}: {} units, {} frames, range [{}, {}]",
                    r.layer,
                    r.units.len(),
                    r.frames,
                    r.lo,
                    r.hi
                );
            }
        }
        Probe::Trace { method, .. } => {
            let t = &mut cfg.probes.trace;
            t.method = method.unwrap_or(t.method);
            t.sequence = common.sequence.unwrap_or(t.sequence);
            for p in run_trace(&net, &cfg, out)? {
                println!("layer {}: smoothness {:.6}", p.layer, p.smoothness);
            }
        }
        Probe::Perturb {
            noise_pos,
            noise_len,
            noise_std,
            epsilon,
            noise_seed,
            ..
        } => {
            let p = &mut cfg.probes.perturb;
            p.sequence = common.sequence.unwrap_or(p.sequence);
            p.noise_pos = noise_pos.unwrap_or(p.noise_pos);
            p.noise_len = noise_len.unwrap_or(p.noise_len);
            p.noise_std = noise_std.unwrap_or(p.noise_std);
            p.epsilon = epsilon.unwrap_or(p.epsilon);
            p.seed = noise_seed.unwrap_or(p.seed);
            cfg.validate()?;
            for l in run_perturb(&net, &cfg, out)?.layers {
                println!(
                    "layer {}: decay_len {} median unit decay {}",
                    l.layer,
                    l.decay_len,
                    l.median_unit_decay()
                );
            }
        }
    }
    Ok(())
}

fn gen_data(args: GenData) -> Result<()> {
    let task = match args.task.as_str() {
        "phones" => TaskConfig::Phones(PhoneTask {
            num_seq: args.num_seq,
            seq_len: args.seq_len,
            num_classes: args.classes,
            input_dim: args.input_dim,
            min_dwell: args.min_dwell,
            max_dwell: args.max_dwell,
            noise_std: args.noise_std,
            seed: args.seed,
        }),
        _ => TaskConfig::Recall(RecallTask {
            num_seq: args.num_seq,
            delay: args.delay,
            num_symbols: args.symbols,
            seed: args.seed,
        }),
    };
    let data = task.generate()?;
    write_json(&data, &args.out)?;
    let mut sidecar = args.out.clone().into_os_string();
    sidecar.push(".config.json");
    write_json(&task, PathBuf::from(sidecar))?;
    println!(
        "{} sequences, {} labeled frames",
        data.sequences.len(),
        data.labeled_frames()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let outcome = run_train(&cfg, Some(&out))?;
            if let Some(m) = outcome.final_metrics() {
                println!(
                    "epoch {}: loss {:.6} frame_acc {:.4}",
                    m.epoch, m.loss, m.frame_acc
                );
            }
        }
        Command::Gradcheck {
            cell,
            seed,
            residual,
            eps,
            tol,
        } => {
            let r = grad_check(cell, residual, seed, eps, tol)?;
            println!(
                "{} cell={} residual={} seed={} params={} max_rel_err={:.3e} worst={}",
                if r.passed { "PASS" } else { "FAIL" },
                r.cell,
                r.residual,
                r.seed,
                r.params_checked,
                r.max_rel_err,
                r.offending_param
            );
            return Ok(r.passed);
        }
        Command::Probe { probe } => run_probe(probe)?,
        Command::GenData(args) => gen_data(args)?,
        Command::Compare { a, b, config, out } => {
            let cfg = load_config(&config)?;
            let rows = compare(&load_net(&a)?, &load_net(&b)?, &cfg, Some(&out))?;
            println!("{:<24} {:>5} {:>14} {:>14}", "metric", "layer", "a", "b");
            for r in rows {
                let layer = r.layer.map_or("-".to_string(), |l| l.to_string());
                println!("{:<24} {:>5} {:>14.6} {:>14.6}", r.metric, layer, r.a, r.b);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
