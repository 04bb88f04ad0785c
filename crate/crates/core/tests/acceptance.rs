//! Acceptance criteria 1-10. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any criterion
//! other than the report-style directional one (9) fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gatelab::autodiff::grad_check;
use gatelab::cells::{
    gru_step, lazy_lstm_step_with, lstm_step, stack_forward, CellKind, CellState, LazyCandidate,
    LstmParams, Network, NetworkConfig, ParameterSet,
};
use gatelab::experiment::{run_perturb, run_trace, run_train};
use gatelab::instrumentation::StateRecorder;
use gatelab::numeric::{Matrix, Vector};
use gatelab::persistence::{ExperimentConfig, ProbeConfig};
use gatelab::probes::{perturbation_probe, PerturbSpec};
use gatelab::reference::{self, RefNetwork};
use gatelab::training::{PhoneTask, TaskConfig, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vector {
    Vector::from_vec((0..n).map(|_| rng.random_range(-r..r)).collect())
}

/// Network with every parameter drawn from U(-r, r).
fn random_net(cfg: NetworkConfig, rng: &mut ChaCha8Rng, r: f64) -> Network {
    let mut net = Network::zeros(cfg).unwrap();
    for (_, _, s) in net.tensors_mut() {
        for v in s.iter_mut() {
            *v = rng.random_range(-r..r);
        }
    }
    net
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut worst_at, mut failures, mut runs) = (0.0f64, String::new(), 0, 0);
    for cell in [CellKind::Lstm, CellKind::Gru, CellKind::LazyLstm] {
        for residual in [false, true] {
            for seed in 0..5 {
                let r = grad_check(cell, residual, seed, 1e-5, 1e-5).unwrap();
                runs += 1;
                failures += usize::from(!r.passed);
                if r.max_rel_err > worst {
                    worst = r.max_rel_err;
                    worst_at = format!(
                        "{cell} residual={residual} seed={seed} {}",
                        r.offending_param
                    );
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && worst <= 1e-5 && elapsed <= Duration::from_secs(60),
        format!(
            "{runs} configs, max_rel_err {worst:.2e} ({worst_at}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Criteria 2 and 3 share the random GRU runs.
struct GruRuns {
    violations: usize,
    steps: usize,
    max_abs: f64,
    gate_mismatches: usize,
}

fn gru_random_runs() -> GruRuns {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (h, d) = (8, 4);
    let mut runs = GruRuns {
        violations: 0,
        steps: 0,
        max_abs: 0.0,
        gate_mismatches: 0,
    };
    for _ in 0..100 {
        let net = random_net(NetworkConfig::new(CellKind::Gru, 1, d, h, 2), &mut rng, 1.0);
        let ParameterSet::Gru(p) = &net.layers[0] else {
            unreachable!()
        };
        let mut state = CellState {
            c: random_vec(&mut rng, h, 1.0),
            m: Vector::zeros(h),
        };
        for _ in 0..1000 {
            let x = random_vec(&mut rng, d, 1.0);
            let (next, gates) = gru_step(p, &state, &x).unwrap();
            runs.steps += 1;
            for k in 0..h {
                let c = next.c[k];
                runs.max_abs = runs.max_abs.max(c.abs());
                runs.violations += usize::from(!(c > -1.0 && c < 1.0));
                runs.gate_mismatches +=
                    usize::from(gates.f[k].to_bits() != (1.0 - gates.i[k]).to_bits());
            }
            state = next;
        }
    }
    runs
}

fn gru_boundedness(runs: &GruRuns) -> Outcome {
    outcome(
        runs.violations == 0,
        format!(
            "{} steps x 8 units, {} violations, max |c| {:.6}",
            runs.steps, runs.violations, runs.max_abs
        ),
    )
}

fn gru_gate_identity(runs: &GruRuns) -> Outcome {
    // Also every gate recorded by a stacked forward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut recorded = 0;
    let mut mismatches = runs.gate_mismatches;
    for seed in 0..5 {
        let net = Network::init(NetworkConfig::new(CellKind::Gru, 3, 5, 7, 3), seed).unwrap();
        let seq: Vec<Vector> = (0..40).map(|_| random_vec(&mut rng, 5, 2.0)).collect();
        let mut rec = StateRecorder::full(seed);
        stack_forward(&net, &seq, Some(&mut rec)).unwrap();
        for trace in rec.traces() {
            for step in &trace.steps {
                for (i, f) in step.gates.i.iter().zip(step.gates.f.iter()) {
                    recorded += 1;
                    mismatches += usize::from(f.to_bits() != (1.0 - i).to_bits());
                }
            }
        }
    }
    outcome(
        mismatches == 0,
        format!(
            "{} gate pairs checked, {mismatches} mismatches",
            runs.steps * 8 + recorded
        ),
    )
}

/// Zero weights; forget and input biases at 10 saturate both gates open and
/// the candidate bias pushes `tanh(3)` into the cell every frame.
fn lstm_unbounded_witness() -> Outcome {
    let (d, h) = (3, 4);
    let mut p = LstmParams::zeros(d, h);
    p.b_f = Vector::filled(h, 10.0);
    p.b_i = Vector::filled(h, 10.0);
    p.b_c = Vector::filled(h, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut state = CellState::zeros(h);
    let mut crossed = None;
    for t in 1..=200 {
        let (next, _) = lstm_step(&p, &state, &random_vec(&mut rng, d, 1.0)).unwrap();
        state = next;
        if crossed.is_none() && state.c.iter().any(|c| c.abs() > 10.0) {
            crossed = Some(t);
        }
    }
    let max_c = state.c.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    match crossed {
        Some(t) => outcome(
            true,
            format!("|c| > 10 at step {t}; |c| = {max_c:.2} after 200 steps"),
        ),
        None => outcome(false, format!("|c| stayed <= 10; final {max_c:.2}")),
    }
}

fn one_step_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for kind in [CellKind::Lstm, CellKind::Gru, CellKind::LazyLstm] {
        for case in 0..50 {
            let (d, h) = (rng.random_range(1..7), rng.random_range(1..9));
            let net = random_net(NetworkConfig::new(kind, 1, d, h, 2), &mut rng, 1.5);
            let reference = RefNetwork::<f64>::from_network(&net);
            let rp = &reference.layers[0];
            let x = random_vec(&mut rng, d, 2.0);
            let prev = CellState {
                c: random_vec(&mut rng, h, 3.0),
                m: random_vec(&mut rng, h, 1.0),
            };
            let (c, m) = (prev.c.as_slice(), prev.m.as_slice());
            let (got, want) = match (&net.layers[0], kind) {
                (ParameterSet::Lstm(p), CellKind::Lstm) => (
                    lstm_step(p, &prev, &x).unwrap(),
                    reference::lstm_step(rp, c, m, x.as_slice()),
                ),
                (ParameterSet::Gru(p), CellKind::Gru) => (
                    gru_step(p, &prev, &x).unwrap(),
                    reference::gru_step(rp, c, x.as_slice()),
                ),
                (ParameterSet::Lstm(p), CellKind::LazyLstm) => {
                    let cand = if case % 2 == 0 {
                        LazyCandidate::Current
                    } else {
                        LazyCandidate::Previous
                    };
                    (
                        lazy_lstm_step_with(p, &prev, &x, cand).unwrap(),
                        reference::lazy_lstm_step(rp, c, m, x.as_slice(), cand),
                    )
                }
                _ => unreachable!(),
            };
            let (state, gates) = got;
            let pairs = [
                (state.c.as_slice(), &want.c),
                (state.m.as_slice(), &want.m),
                (gates.i.as_slice(), &want.i),
                (gates.f.as_slice(), &want.f),
                (gates.o.as_slice(), &want.o),
            ];
            for (a, b) in pairs {
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((x - y).abs());
                }
            }
            cases += 1;
        }
    }
    outcome(
        worst <= 1e-12,
        format!("{cases} cases, max abs diff {worst:.2e}"),
    )
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut frames = 0;
    let mut exact = true;
    let h = 6;
    for kind in [CellKind::Lstm, CellKind::Gru, CellKind::LazyLstm] {
        for layers in [1, 3] {
            let cfg = NetworkConfig::new(kind, layers, h, h, h).with_residual(true);
            let mut net = Network::zeros(cfg).unwrap();
            net.output.weight = Matrix::identity(h);
            for len in [1, 17, 60] {
                let seq: Vec<Vector> = (0..len).map(|_| random_vec(&mut rng, h, 5.0)).collect();
                let out = stack_forward(&net, &seq, None).unwrap();
                for (y, x) in out.logits.iter().zip(&seq) {
                    exact &= y
                        .iter()
                        .zip(x.iter())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    frames += 1;
                }
            }
        }
    }
    outcome(
        exact,
        format!("{frames} frames over 3 cells x {{1,3}} layers, bit-exact: {exact}"),
    )
}

fn perturbation_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pre_max = 0.0f64;
    for kind in [CellKind::Lstm, CellKind::Gru, CellKind::LazyLstm] {
        for seed in 0..3 {
            let net = Network::init(NetworkConfig::new(kind, 2, 4, 6, 3), seed).unwrap();
            let seq: Vec<Vector> = (0..50).map(|_| random_vec(&mut rng, 4, 1.0)).collect();
            let r = perturbation_probe(&net, &seq, &PerturbSpec::new(15, 8, 1.0, seed)).unwrap();
            for l in &r.layers {
                pre_max = pre_max.max(l.pre_insertion_max);
            }
        }
    }

    // Gate parameters zero (every gate 0.5); only W_cx is nonzero so the
    // noise reaches the cell at all.
    let (d, h) = (4, 5);
    let mut net = Network::zeros(NetworkConfig::new(CellKind::Lstm, 1, d, h, 2)).unwrap();
    let ParameterSet::Lstm(p) = &mut net.layers[0] else {
        unreachable!()
    };
    p.w_cx = Matrix::from_fn(h, d, |i, j| 0.4 * ((i * d + j) as f64).sin());
    let seq: Vec<Vector> = (0..60).map(|_| random_vec(&mut rng, d, 1.0)).collect();
    let r = perturbation_probe(&net, &seq, &PerturbSpec::new(10, 5, 1.0, 11)).unwrap();
    let layer = &r.layers[0];
    let (mut ratios, mut worst) = (0, 0.0f64);
    for row in &layer.delta {
        for w in row.windows(2).take_while(|w| w[1] > 1e-6) {
            worst = worst.max((w[1] / w[0] - 0.5).abs());
            ratios += 1;
        }
    }
    let pre_zero = pre_max == 0.0 && layer.pre_insertion_max == 0.0;
    outcome(
        pre_zero && ratios >= 20 && worst <= 1e-9,
        format!("pre-insertion max |dc| {pre_max}, {ratios} decay ratios, max |ratio - 0.5| {worst:.2e}"),
    )
}

fn phones(seed: u64, input_dim: usize) -> PhoneTask {
    PhoneTask {
        num_seq: 32,
        seq_len: 100,
        num_classes: 8,
        input_dim,
        min_dwell: 10,
        max_dwell: 30,
        noise_std: 0.1,
        seed,
    }
}

fn experiment(
    kind: CellKind,
    layers: usize,
    residual: bool,
    seed: u64,
    epochs: usize,
) -> ExperimentConfig {
    ExperimentConfig {
        network: NetworkConfig::new(kind, layers, 16, 32, 8).with_residual(residual),
        train: TrainConfig {
            lr: 0.5,
            clip_norm: 5.0,
            epochs,
            batch_size: 4,
            seed,
            init_seed: seed,
            task: TaskConfig::Phones(phones(seed, 16)),
        },
        probes: ProbeConfig::default(),
    }
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/gru_phones_metrics.csv")
}

fn parse_metrics(text: &str) -> Vec<[f64; 3]> {
    text.lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect()
}

fn trainability() -> Outcome {
    let cfg = experiment(CellKind::Gru, 1, false, 0, 30);
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let outcome_ = run_train(&cfg, Some(dir.path())).unwrap();
    let elapsed = start.elapsed();
    let acc = outcome_.final_metrics().unwrap().frame_acc;
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let golden = std::fs::read_to_string(golden_path()).expect("golden metrics file");
    let (got, want) = (parse_metrics(&metrics), parse_metrics(&golden));
    let matches = got.len() == want.len()
        && got.iter().zip(&want).all(|(a, b)| {
            a.iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs() <= 1e-9 * y.abs().max(1.0))
        });
    outcome(
        acc > 0.9 && matches && elapsed <= Duration::from_secs(300),
        format!(
            "frame_acc {acc:.4} after 30 epochs in {:.1}s; golden metrics match: {matches}",
            elapsed.as_secs_f64()
        ),
    )
}

fn final_loss(cfg: &ExperimentConfig) -> f64 {
    run_train(cfg, None).unwrap().final_metrics().unwrap().loss
}

/// Majority over 5 seeds for each directional claim; per-seed outcomes go
/// into the detail string.
fn directional() -> Outcome {
    let seeds = 0..5u64;
    let mut claims: Vec<(&str, Vec<bool>, Vec<String>)> = Vec::new();
    let (mut smooth, mut decay, mut smooth_v, mut decay_v) = (vec![], vec![], vec![], vec![]);
    let (mut lazy, mut lazy_v) = (vec![], vec![]);
    for seed in seeds.clone() {
        let gru_cfg = experiment(CellKind::Gru, 1, false, seed, 30);
        let lstm_cfg = experiment(CellKind::Lstm, 1, false, seed, 30);
        let gru = run_train(&gru_cfg, None).unwrap();
        let lstm = run_train(&lstm_cfg, None).unwrap();
        let sg = run_trace(&gru.network, &gru_cfg, None).unwrap()[0].smoothness;
        let sl = run_trace(&lstm.network, &lstm_cfg, None).unwrap()[0].smoothness;
        smooth.push(sg > sl);
        smooth_v.push(format!("{sg:.3}/{sl:.3}"));
        let dg = run_perturb(&gru.network, &gru_cfg, None).unwrap().layers[0].median_unit_decay();
        let dl = run_perturb(&lstm.network, &lstm_cfg, None).unwrap().layers[0].median_unit_decay();
        decay.push(dg < dl);
        decay_v.push(format!("{dg}/{dl}"));

        let lazy_cfg = experiment(CellKind::LazyLstm, 1, false, seed, 30);
        let (ll, pl) = (final_loss(&lazy_cfg), lstm.final_metrics().unwrap().loss);
        lazy.push(ll <= pl);
        lazy_v.push(format!("{ll:.3}/{pl:.3}"));
    }
    claims.push(("a smoothness gru>lstm", smooth, smooth_v));
    claims.push(("b median decay gru<lstm", decay, decay_v));
    claims.push(("c loss lazy<=lstm", lazy, lazy_v));
    for kind in [CellKind::Lstm, CellKind::Gru] {
        let (mut wins, mut vals) = (vec![], vec![]);
        for seed in seeds.clone() {
            let res = final_loss(&experiment(kind, 4, true, seed, 30));
            let plain = final_loss(&experiment(kind, 4, false, seed, 30));
            wins.push(res <= plain);
            vals.push(format!("{res:.3}/{plain:.3}"));
        }
        claims.push((
            if kind == CellKind::Lstm {
                "d lstm 4-layer loss res<=plain"
            } else {
                "d gru 4-layer loss res<=plain"
            },
            wins,
            vals,
        ));
    }
    let mut all = true;
    let mut detail = Vec::new();
    for (name, wins, vals) in &claims {
        let count = wins.iter().filter(|&&w| w).count();
        all &= count * 2 > wins.len();
        detail.push(format!("({name}: {count}/5 [{}])", vals.join(" ")));
    }
    outcome(all, detail.join(" "))
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_gatelab"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "gatelab {args:?} failed");
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiment(CellKind::Lstm, 2, true, 9, 4);
    cfg.network = NetworkConfig::new(CellKind::Lstm, 2, 16, 16, 8).with_residual(true);
    cfg.probes.histogram.units_per_layer = 10;
    let cfg_path = dir.path().join("experiment.json");
    gatelab::persistence::write_json(&cfg, &cfg_path).unwrap();
    let cfg_arg = cfg_path.to_str().unwrap();

    let run = |name: &str| -> PathBuf {
        let out = dir.path().join(name);
        let s = |p: &Path| p.to_str().unwrap().to_string();
        run_cli(&["train", "--config", cfg_arg, "--out", &s(&out)]);
        let model = s(&out.join("model.json"));
        for probe in ["hist", "trace", "perturb"] {
            run_cli(&[
                "probe",
                probe,
                "--model",
                &model,
                "--config",
                cfg_arg,
                "--out",
                &s(&out.join(probe)),
            ]);
        }
        out
    };
    let (a, b) = (run("a"), run("b"));
    let files = [
        "model.json",
        "metrics.csv",
        "config.json",
        "hist/histogram.csv",
        "hist/config.json",
        "trace/trace.csv",
        "trace/smoothness.csv",
        "perturb/perturb.csv",
        "perturb/decay.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    // The library path must agree with the CLI as well.
    let lib = run_train(&cfg, None).unwrap();
    let cli_metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let lib_matches = parse_metrics(&cli_metrics)
        .iter()
        .zip(&lib.history)
        .all(|(row, m)| row[1] == m.loss && row[2] == m.frame_acc);
    outcome(
        differing.is_empty() && lib_matches,
        format!(
            "{} files compared, differing: {differing:?}; library run matches CLI: {lib_matches}",
            files.len()
        ),
    )
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let gru = gru_random_runs();
    // Criterion 9 is report-style: its line records the per-seed outcome but
    // does not decide the exit status.
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient checks", Box::new(gradient_checks)),
        ("GRU boundedness", Box::new(|| gru_boundedness(&gru))),
        ("GRU gate identity", Box::new(|| gru_gate_identity(&gru))),
        (
            "LSTM unboundedness witness",
            Box::new(lstm_unbounded_witness),
        ),
        ("one-step oracle equivalence", Box::new(one_step_oracle)),
        ("residual identity", Box::new(residual_identity)),
        (
            "perturbation causality and decay",
            Box::new(perturbation_checks),
        ),
        ("desk-scale trainability", Box::new(trainability)),
        ("directional surrogates", Box::new(directional)),
        ("reproducibility", Box::new(reproducibility)),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let report_only = k + 1 == 9;
        failed += usize::from(!o.passed && !report_only);
        let tag = if report_only { " (report-style)" } else { "" };
        println!(
            "criterion {:>2} {} {name}{tag}: {}",
            k + 1,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
