//! Experiment runs driven by an [`ExperimentConfig`]: training with metrics
//! output, the three probes over a trained model, and a side-by-side
//! comparison of two models. Every run that writes files also writes the
//! resolved config into the same directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::{stack_forward, Network};
use crate::error::{Error, Result};
use crate::instrumentation::{StateRecorder, StateTrace};
use crate::persistence::{save_model, write_json, ExperimentConfig, ModelMetadata};
use crate::probes::{
    activation_histogram, perturbation_probe, project_trace, write_histogram_csv,
    write_projection_csv, HistogramReport, HistogramSpec, PerturbationReport, TraceProjection,
};
use crate::training::{evaluate, train_network, EpochMetrics, ToyDataset, TrainOutcome};

pub const RESOLVED_CONFIG: &str = "config.json";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(RESOLVED_CONFIG);
    write_json(cfg, &path)?;
    Ok(path)
}

pub fn write_metrics_csv(history: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["epoch", "loss", "frame_acc"])
        .map_err(|e| Error::csv(path, e))?;
    for m in history {
        w.write_record([
            m.epoch.to_string(),
            m.loss.to_string(),
            m.frame_acc.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains from scratch and, when `out` is given, writes `model.json`,
/// `metrics.csv` and the resolved config there.
pub fn run_train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = cfg.train.task.generate()?;
    let mut network = Network::init(cfg.network.clone(), cfg.train.init_seed)?;
    let history = train_network(&mut network, &data, &cfg.train)?;
    if let Some(dir) = out {
        write_resolved_config(cfg, dir)?;
        let meta = ModelMetadata {
            init_seed: Some(cfg.train.init_seed),
            shuffle_seed: Some(cfg.train.seed),
            epochs_trained: history.len(),
        };
        save_model(&network, meta, dir.join("model.json"))?;
        write_metrics_csv(&history, dir.join("metrics.csv"))?;
    }
    Ok(TrainOutcome { network, history })
}

/// Full-capture traces of every layer for each sequence in the dataset.
pub fn record_dataset(net: &Network, data: &ToyDataset) -> Result<Vec<StateTrace>> {
    let mut traces = Vec::new();
    for (k, seq) in data.sequences.iter().enumerate() {
        let mut rec = StateRecorder::full(k as u64);
        stack_forward(net, &seq.frames, Some(&mut rec))?;
        traces.extend(rec.into_traces());
    }
    Ok(traces)
}

fn probe_data(net: &Network, cfg: &ExperimentConfig) -> Result<ToyDataset> {
    let data = cfg.train.task.generate()?;
    if data.input_dim != net.config.input_dim {
        return Err(Error::DimMismatch {
            op: "task input vs model input",
            left: data.input_dim,
            right: net.config.input_dim,
        });
    }
    Ok(data)
}

fn pick_sequence(data: &ToyDataset, index: usize) -> Result<&[crate::numeric::Vector]> {
    data.sequences
        .get(index)
        .map(|s| s.frames.as_slice())
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "sequence {index} outside dataset of {}",
                data.sequences.len()
            ))
        })
}

/// Histograms for every layer over all sequences of the configured task.
pub fn run_histograms(
    net: &Network,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<HistogramReport>> {
    let data = probe_data(net, cfg)?;
    let traces = record_dataset(net, &data)?;
    let h = &cfg.probes.histogram;
    let reports = (0..net.config.layers)
        .map(|layer| {
            let spec = HistogramSpec {
                layer,
                units_per_layer: h.units_per_layer,
                bins: h.bins,
                clip: h.clip,
                cell: net.config.layer_kind(layer),
                seed: h.seed,
            };
            activation_histogram(&traces, &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        write_resolved_config(cfg, dir)?;
        write_histogram_csv(&reports, dir.join("histogram.csv"))?;
    }
    Ok(reports)
}

/// Per-layer 2-D projection of the configured sequence.
pub fn run_trace(
    net: &Network,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<TraceProjection>> {
    let data = probe_data(net, cfg)?;
    let t = &cfg.probes.trace;
    let seq = pick_sequence(&data, t.sequence)?;
    let mut rec = StateRecorder::full(t.sequence as u64);
    stack_forward(net, seq, Some(&mut rec))?;
    let projections = rec
        .traces()
        .iter()
        .map(|trace| project_trace(trace, t.method, t.seed))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        write_resolved_config(cfg, dir)?;
        write_projection_csv(
            &projections,
            dir.join("trace.csv"),
            dir.join("smoothness.csv"),
        )?;
    }
    Ok(projections)
}

pub fn run_perturb(
    net: &Network,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<PerturbationReport> {
    let data = probe_data(net, cfg)?;
    let p = &cfg.probes.perturb;
    let seq = pick_sequence(&data, p.sequence)?;
    let report = perturbation_probe(net, seq, &p.spec())?;
    if let Some(dir) = out {
        write_resolved_config(cfg, dir)?;
        report.write_csv(dir.join("perturb.csv"), dir.join("decay.csv"))?;
    }
    Ok(report)
}

/// One row of a model comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub metric: String,
    pub layer: Option<usize>,
    pub a: f64,
    pub b: f64,
}

fn layer_rows(metric: &str, a: &[f64], b: &[f64]) -> Vec<CompareRow> {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(l, (&a, &b))| CompareRow {
            metric: metric.to_string(),
            layer: Some(l),
            a,
            b,
        })
        .collect()
}

/// Largest |c| and the share of |c| values above 1, per layer.
fn cell_range(net: &Network, data: &ToyDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let traces = record_dataset(net, data)?;
    let mut max_abs = vec![0.0f64; net.config.layers];
    let mut above = vec![0usize; net.config.layers];
    let mut total = vec![0usize; net.config.layers];
    for trace in &traces {
        for c in trace.cells() {
            for &v in c.iter() {
                max_abs[trace.layer] = max_abs[trace.layer].max(v.abs());
                above[trace.layer] += usize::from(v.abs() > 1.0);
                total[trace.layer] += 1;
            }
        }
    }
    let share = above
        .iter()
        .zip(&total)
        .map(|(&a, &t)| a as f64 / t.max(1) as f64)
        .collect();
    Ok((max_abs, share))
}

/// Evaluates two models on the same task and probe settings: loss and
/// accuracy, cell range, trace smoothness and perturbation decay.
pub fn compare(
    a: &Network,
    b: &Network,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<CompareRow>> {
    let data_a = probe_data(a, cfg)?;
    let data_b = probe_data(b, cfg)?;
    let mut rows = Vec::new();
    let (la, aa) = evaluate(a, &data_a)?;
    let (lb, ab) = evaluate(b, &data_b)?;
    rows.push(CompareRow {
        metric: "loss".into(),
        layer: None,
        a: la,
        b: lb,
    });
    rows.push(CompareRow {
        metric: "frame_acc".into(),
        layer: None,
        a: aa,
        b: ab,
    });

    let (max_a, share_a) = cell_range(a, &data_a)?;
    let (max_b, share_b) = cell_range(b, &data_b)?;
    rows.extend(layer_rows("max_abs_cell", &max_a, &max_b));
    rows.extend(layer_rows("share_abs_cell_above_1", &share_a, &share_b));

    let smooth = |n: &Network| -> Result<Vec<f64>> {
        Ok(run_trace(n, cfg, None)?
            .iter()
            .map(|p| p.smoothness)
            .collect())
    };
    rows.extend(layer_rows("smoothness", &smooth(a)?, &smooth(b)?));

    let decay = |n: &Network| -> Result<(Vec<f64>, Vec<f64>)> {
        let r = run_perturb(n, cfg, None)?;
        Ok((
            r.layers.iter().map(|l| l.median_unit_decay()).collect(),
            r.layers.iter().map(|l| l.decay_len as f64).collect(),
        ))
    };
    let (med_a, len_a) = decay(a)?;
    let (med_b, len_b) = decay(b)?;
    rows.extend(layer_rows("median_unit_decay", &med_a, &med_b));
    rows.extend(layer_rows("decay_len", &len_a, &len_b));

    if let Some(dir) = out {
        write_resolved_config(cfg, dir)?;
        let path = dir.join("compare.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["metric", "layer", "a", "b"])
            .map_err(|e| Error::csv(&path, e))?;
        for r in &rows {
            let layer = r.layer.map_or(String::new(), |l| l.to_string());
            w.write_record([r.metric.clone(), layer, r.a.to_string(), r.b.to_string()])
                .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}
