//! Memory probes over recorded cell traces: activation histograms, 2-D
//! temporal trajectories with a smoothness score, and the decay of the cell
//! difference caused by inserting a noise segment into the input.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cells::{stack_forward, CellKind, Network};
use crate::error::{Error, Result};
use crate::instrumentation::{sample_units, StateRecorder, StateTrace};
use crate::numeric::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub layer: usize,
    /// Units drawn (seeded) from each trace's recorded units.
    pub units_per_layer: usize,
    pub bins: usize,
    /// LSTM values beyond `±clip` are pinned to the boundary.
    pub clip: f64,
    /// GRU cells are binned over `(-1, 1)`; other cells over `±clip`.
    pub cell: CellKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub layer: usize,
    pub lo: f64,
    pub hi: f64,
    pub clip: f64,
    pub edges: Vec<f64>,
    /// Hidden-unit index of each per-unit histogram.
    pub units: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
    pub pooled: Vec<u64>,
    /// Frames observed per unit.
    pub frames: u64,
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let v = v.clamp(lo, hi);
    let k = ((v - lo) / (hi - lo) * bins as f64).floor() as usize;
    k.min(bins - 1)
}

pub fn activation_histogram(
    traces: &[StateTrace],
    spec: &HistogramSpec,
) -> Result<HistogramReport> {
    if traces.is_empty() {
        return Err(Error::Empty("traces"));
    }
    if !(spec.clip > 0.0) || spec.bins == 0 {
        return Err(Error::InvalidConfig(
            "histogram needs clip > 0 and bins > 0".into(),
        ));
    }
    let layer_traces: Vec<&StateTrace> = traces.iter().filter(|t| t.layer == spec.layer).collect();
    let Some(first) = layer_traces.first() else {
        return Err(Error::UnknownLayer(spec.layer));
    };
    let width = first.width();
    if layer_traces
        .iter()
        .any(|t| t.width() != width || t.units != first.units)
    {
        return Err(Error::InvalidConfig(
            "traces of one layer must record the same units".into(),
        ));
    }
    let positions: Vec<usize> = if spec.units_per_layer >= width {
        (0..width).collect()
    } else {
        sample_units(spec.units_per_layer, width, spec.seed, spec.layer)
    };
    let units = positions
        .iter()
        .map(|&p| first.units.as_ref().map_or(p, |u| u[p]))
        .collect();

    let (lo, hi) = match spec.cell {
        CellKind::Gru => (-1.0, 1.0),
        _ => (-spec.clip, spec.clip),
    };
    let bins = spec.bins;
    let edges = (0..=bins)
        .map(|k| lo + (hi - lo) * k as f64 / bins as f64)
        .collect();
    let mut counts = vec![vec![0u64; bins]; positions.len()];
    let mut frames = 0u64;
    for trace in &layer_traces {
        for c in trace.cells() {
            for (row, &p) in counts.iter_mut().zip(&positions) {
                row[bin_index(c[p], lo, hi, bins)] += 1;
            }
            frames += 1;
        }
    }
    let pooled = (0..bins)
        .map(|b| counts.iter().map(|r| r[b]).sum())
        .collect();
    Ok(HistogramReport {
        layer: spec.layer,
        lo,
        hi,
        clip: spec.clip,
        edges,
        units,
        counts,
        pooled,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionMethod::Pca),
            "tsne" => Ok(ProjectionMethod::Tsne),
            other => Err(Error::InvalidConfig(format!(
                "unknown projection '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceProjection {
    pub layer: usize,
    pub method: ProjectionMethod,
    pub points: Vec<[f64; 2]>,
    /// Normalized step length of the trace in full unit space.
    pub smoothness: f64,
}

/// Largest frame count accepted by the exact t-SNE.
pub const TSNE_MAX_FRAMES: usize = 2000;

pub fn project_trace(
    trace: &StateTrace,
    method: ProjectionMethod,
    seed: u64,
) -> Result<TraceProjection> {
    if trace.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "projection needs at least 3 frames, got {}",
            trace.len()
        )));
    }
    let frames: Vec<&Vector> = trace.cells().collect();
    let points = match method {
        ProjectionMethod::Pca => pca_2d(&frames).0,
        ProjectionMethod::Tsne => {
            if frames.len() > TSNE_MAX_FRAMES {
                return Err(Error::InvalidConfig(format!(
                    "t-SNE limited to {TSNE_MAX_FRAMES} frames, got {}",
                    frames.len()
                )));
            }
            tsne_2d(&frames, TsneParams::default(), seed)
        }
    };
    Ok(TraceProjection {
        layer: trace.layer,
        method,
        points,
        smoothness: trace_smoothness(trace)?,
    })
}

/// Projection onto the top two principal components of the mean-centered
/// frame matrix, and the two leading covariance eigenvalues. Each axis is
/// oriented so that its largest-magnitude loading is positive.
pub fn pca_2d(frames: &[&Vector]) -> (Vec<[f64; 2]>, [f64; 2]) {
    let n = frames.len();
    let d = frames[0].dim();
    let mut x = DMatrix::from_fn(n, d, |i, j| frames[i][j]);
    for j in 0..d {
        let mean = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut points = vec![[0.0; 2]; n];
    let mut variances = [0.0; 2];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v = -v;
        }
        let proj = &x * v;
        for (p, val) in points.iter_mut().zip(proj.iter()) {
            p[axis] = *val;
        }
        variances[axis] = eig.eigenvalues[k].max(0.0);
    }
    (points, variances)
}

#[derive(Debug, Clone, Copy)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
        }
    }
}

/// Exact O(n²) t-SNE with early exaggeration, momentum and per-coordinate
/// gains. Perplexity is capped at `(n - 1) / 3` for short traces.
pub fn tsne_2d(frames: &[&Vector], params: TsneParams, seed: u64) -> Vec<[f64; 2]> {
    let n = frames.len();
    let dist: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            frames[i]
                .iter()
                .zip(frames[j].iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        })
        .collect();

    let perplexity = params.perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-dist[i * n + j] * beta).exp();
                p[i * n + j] = w;
                sum += w;
                weighted += w * dist[i * n + j];
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * weighted / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            let gap = entropy - target;
            if gap.abs() < 1e-5 {
                break;
            }
            if gap > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for iter in 0..params.iterations {
        let exaggeration = if iter < 250 { 12.0 } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    num[i * n + j] = 1.0 / (1.0 + d2);
                    total += num[i * n + j];
                }
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let q = (num[i * n + j] / total).max(1e-12);
                let coef = 4.0 * (exaggeration * sym[i * n + j] - q) * num[i * n + j];
                grad[0] += coef * (y[i][0] - y[j][0]);
                grad[1] += coef * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (grad[a] > 0.0) != (velocity[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                velocity[i][a] =
                    momentum * velocity[i][a] - params.learning_rate * gains[i][a] * grad[a];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let mean = y.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
    }
    y
}

/// Mean step length `‖c_{t+1} − c_t‖` over the mean distance of a frame
/// from the trace centroid. Zero for a trace whose frames are all equal.
pub fn trace_smoothness(trace: &StateTrace) -> Result<f64> {
    let frames: Vec<&Vector> = trace.cells().collect();
    smoothness_of(&frames)
}

pub fn smoothness_of(frames: &[&Vector]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "smoothness needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let n = frames.len() as f64;
    let step = frames
        .windows(2)
        .map(|w| w[1].sub(w[0]).map(|d| d.norm()))
        .sum::<Result<f64>>()?
        / (n - 1.0);
    let d = frames[0].dim();
    let centroid = Vector::from_vec(
        (0..d)
            .map(|j| frames.iter().map(|f| f[j]).sum::<f64>() / n)
            .collect(),
    );
    let spread = frames
        .iter()
        .map(|f| f.sub(&centroid).map(|d| d.norm()))
        .sum::<Result<f64>>()?
        / n;
    if spread == 0.0 {
        return Ok(0.0);
    }
    Ok(step / spread)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSegment {
    /// Frame index in the clean sequence where the noise is inserted.
    pub pos: usize,
    pub len: usize,
    pub std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub noise: NoiseSegment,
    pub epsilon: f64,
    /// Consecutive frames below `epsilon` required to call it decayed.
    pub sustain: usize,
}

impl PerturbSpec {
    pub fn new(pos: usize, len: usize, std: f64, seed: u64) -> Self {
        PerturbSpec {
            noise: NoiseSegment {
                pos,
                len,
                std,
                seed,
            },
            epsilon: 0.01,
            sustain: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPerturbation {
    pub layer: usize,
    /// Largest |Δc| over frames before the insertion point.
    pub pre_insertion_max: f64,
    /// `delta[unit][k]`: |c_noisy(pos + len + k) − c_clean(pos + k)|.
    pub delta: Vec<Vec<f64>>,
    pub unit_decay: Vec<usize>,
    /// Decay of the per-frame maximum over units.
    pub decay_len: usize,
}

impl LayerPerturbation {
    pub fn aligned_frames(&self) -> usize {
        self.delta.first().map_or(0, Vec::len)
    }

    pub fn max_delta(&self) -> Vec<f64> {
        (0..self.aligned_frames())
            .map(|k| self.delta.iter().map(|row| row[k]).fold(0.0, f64::max))
            .collect()
    }

    pub fn median_unit_decay(&self) -> f64 {
        let mut v: Vec<usize> = self.unit_decay.clone();
        v.sort_unstable();
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2] as f64,
            n => (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub spec: PerturbSpec,
    pub layers: Vec<LayerPerturbation>,
}

/// First index `k` from which the next `sustain` values (or all remaining
/// ones, near the end) stay below `epsilon`; the series length if none.
pub fn decay_length(series: &[f64], epsilon: f64, sustain: usize) -> usize {
    let n = series.len();
    (0..n)
        .find(|&k| {
            series[k..(k + sustain.max(1)).min(n)]
                .iter()
                .all(|&v| v < epsilon)
        })
        .unwrap_or(n)
}

/// Inserts the noise segment into `seq`.
pub fn insert_noise(seq: &[Vector], noise: &NoiseSegment) -> Result<Vec<Vector>> {
    if noise.pos >= seq.len() {
        return Err(Error::InvalidConfig(format!(
            "noise position {} outside sequence of {} frames",
            noise.pos,
            seq.len()
        )));
    }
    if !(noise.std >= 0.0 && noise.std.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise std {} must be >= 0",
            noise.std
        )));
    }
    let dim = seq[0].dim();
    let dist = Normal::new(0.0, noise.std).expect("validated std");
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = Vec::with_capacity(seq.len() + noise.len);
    out.extend_from_slice(&seq[..noise.pos]);
    out.extend(
        (0..noise.len).map(|_| Vector::from_vec((0..dim).map(|_| dist.sample(&mut rng)).collect())),
    );
    out.extend_from_slice(&seq[noise.pos..]);
    Ok(out)
}

/// Runs the clean and the noise-inserted sequence and compares cell states,
/// aligning clean frame `t` with noisy frame `t + len` from the insertion
/// point on.
pub fn perturbation_probe(
    net: &Network,
    seq: &[Vector],
    spec: &PerturbSpec,
) -> Result<PerturbationReport> {
    let noisy = insert_noise(seq, &spec.noise)?;
    let mut clean_rec = StateRecorder::full(0);
    let mut noisy_rec = StateRecorder::full(1);
    stack_forward(net, seq, Some(&mut clean_rec))?;
    stack_forward(net, &noisy, Some(&mut noisy_rec))?;
    let (pos, len) = (spec.noise.pos, spec.noise.len);

    let layers = clean_rec
        .traces()
        .iter()
        .zip(noisy_rec.traces())
        .map(|(clean, noisy)| {
            let abs_diff = |a: &Vector, b: &Vector| -> Vec<f64> {
                a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).collect()
            };
            let pre_insertion_max = (0..pos)
                .flat_map(|t| abs_diff(&noisy.steps[t].c, &clean.steps[t].c))
                .fold(0.0, f64::max);
            let aligned = seq.len() - pos;
            let width = clean.width();
            let mut delta = vec![Vec::with_capacity(aligned); width];
            for k in 0..aligned {
                let d = abs_diff(&noisy.steps[pos + len + k].c, &clean.steps[pos + k].c);
                for (row, v) in delta.iter_mut().zip(d) {
                    row.push(v);
                }
            }
            let unit_decay = delta
                .iter()
                .map(|row| decay_length(row, spec.epsilon, spec.sustain))
                .collect();
            let mut layer = LayerPerturbation {
                layer: clean.layer,
                pre_insertion_max,
                delta,
                unit_decay,
                decay_len: 0,
            };
            layer.decay_len = decay_length(&layer.max_delta(), spec.epsilon, spec.sustain);
            layer
        })
        .collect();
    Ok(PerturbationReport {
        spec: spec.clone(),
        layers,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

impl HistogramReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_histogram_csv(std::slice::from_ref(self), path)
    }
}

/// Rows `(layer, unit, bin_lo, bin_hi, count)` for each report; the pooled
/// histogram uses unit `pooled`.
pub fn write_histogram_csv(reports: &[HistogramReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["layer", "unit", "bin_lo", "bin_hi", "count"])
        .map_err(err)?;
    for r in reports {
        let rows = r
            .units
            .iter()
            .map(|u| u.to_string())
            .zip(&r.counts)
            .chain(std::iter::once(("pooled".to_string(), &r.pooled)));
        for (unit, counts) in rows {
            for (b, count) in counts.iter().enumerate() {
                w.write_record([
                    r.layer.to_string(),
                    unit.clone(),
                    r.edges[b].to_string(),
                    r.edges[b + 1].to_string(),
                    count.to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(layer, t, x, y)` rows for a set of projections plus the
/// `(layer, smoothness)` sidecar.
pub fn write_projection_csv(
    projections: &[TraceProjection],
    points_path: impl AsRef<Path>,
    smoothness_path: impl AsRef<Path>,
) -> Result<()> {
    let path = points_path.as_ref();
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["layer", "t", "x", "y"]).map_err(err)?;
    for p in projections {
        for (t, [x, y]) in p.points.iter().enumerate() {
            w.write_record([
                p.layer.to_string(),
                t.to_string(),
                x.to_string(),
                y.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let path = smoothness_path.as_ref();
    let mut w = csv_writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["layer", "smoothness"]).map_err(err)?;
    for p in projections {
        w.write_record([p.layer.to_string(), p.smoothness.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl PerturbationReport {
    /// `(layer, unit, t_aligned, abs_delta)` rows plus the
    /// `(layer, unit, decay_len)` sidecar.
    pub fn write_csv(
        &self,
        delta_path: impl AsRef<Path>,
        decay_path: impl AsRef<Path>,
    ) -> Result<()> {
        let path = delta_path.as_ref();
        let mut w = csv_writer(path)?;
        let err = |e| Error::csv(path, e);
        w.write_record(["layer", "unit", "t_aligned", "abs_delta"])
            .map_err(err)?;
        for l in &self.layers {
            for (u, row) in l.delta.iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    w.write_record([
                        l.layer.to_string(),
                        u.to_string(),
                        k.to_string(),
                        v.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;

        let path = decay_path.as_ref();
        let mut w = csv_writer(path)?;
        let err = |e| Error::csv(path, e);
        w.write_record(["layer", "unit", "decay_len"])
            .map_err(err)?;
        for l in &self.layers {
            for (u, d) in l.unit_decay.iter().enumerate() {
                w.write_record([l.layer.to_string(), u.to_string(), d.to_string()])
                    .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
