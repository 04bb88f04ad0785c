//! Synthetic sequence tasks and a plain SGD loop with global-norm clipping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bptt_batch, LossKind, Target};
use crate::cells::{stack_forward, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::numeric::Vector;

/// Longest phone-like dwell the generators accept, in frames.
pub const MAX_DWELL: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub frames: Vec<Vector>,
    /// Class per frame; `None` frames are ignored by the loss.
    pub labels: Vec<Target>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub sequences: Vec<Sequence>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn labeled_frames(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| s.labels.iter().filter(|l| l.is_some()).count())
            .sum()
    }
}

/// Piecewise-stationary frame classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneTask {
    pub num_seq: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub min_dwell: usize,
    pub max_dwell: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    pub seed: u64,
}

fn default_noise_std() -> f64 {
    0.3
}

/// Recall of a cued symbol after `delay` distractor frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallTask {
    pub num_seq: usize,
    pub delay: usize,
    pub num_symbols: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Phones(PhoneTask),
    Recall(RecallTask),
}

impl TaskConfig {
    pub fn generate(&self) -> Result<ToyDataset> {
        match self {
            TaskConfig::Phones(t) => gen_pseudo_phone_task(t),
            TaskConfig::Recall(t) => gen_delayed_recall(t),
        }
    }
}

/// Each sequence concatenates segments; a segment holds one class for a
/// dwell drawn uniformly from `[min_dwell, max_dwell]` (the last one is cut
/// at `seq_len`) and emits that class's fixed unit-norm mean plus Gaussian
/// noise. Consecutive segments always change class when there is more than
/// one class.
pub fn gen_pseudo_phone_task(task: &PhoneTask) -> Result<ToyDataset> {
    let PhoneTask {
        num_seq,
        seq_len,
        num_classes,
        input_dim,
        min_dwell,
        max_dwell,
        noise_std,
        seed,
    } = *task;
    if !(1 <= min_dwell && min_dwell <= max_dwell && max_dwell <= MAX_DWELL) {
        return Err(Error::InvalidConfig(format!(
            "dwell bounds must satisfy 1 <= min ({min_dwell}) <= max ({max_dwell}) <= {MAX_DWELL}"
        )));
    }
    if num_classes == 0 || input_dim == 0 || seq_len == 0 {
        return Err(Error::InvalidConfig(
            "classes, input_dim and seq_len must be positive".into(),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise_std {noise_std} must be >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vector> = (0..num_classes)
        .map(|_| {
            let v = Vector::from_vec((0..input_dim).map(|_| rng.sample(StandardNormal)).collect());
            let n = v.norm();
            v.scale(1.0 / n)
        })
        .collect();
    let noise = Normal::new(0.0, noise_std).expect("validated std");

    let mut sequences = Vec::with_capacity(num_seq);
    for _ in 0..num_seq {
        let mut frames = Vec::with_capacity(seq_len);
        let mut labels = Vec::with_capacity(seq_len);
        let mut prev: Option<usize> = None;
        while frames.len() < seq_len {
            let class = match prev {
                Some(p) if num_classes > 1 => {
                    let c = rng.random_range(0..num_classes - 1);
                    if c >= p {
                        c + 1
                    } else {
                        c
                    }
                }
                _ => rng.random_range(0..num_classes),
            };
            let dwell = rng.random_range(min_dwell..=max_dwell);
            for _ in 0..dwell.min(seq_len - frames.len()) {
                let frame: Vec<f64> = means[class]
                    .iter()
                    .map(|m| m + noise.sample(&mut rng))
                    .collect();
                frames.push(Vector::from_vec(frame));
                labels.push(Some(class));
            }
            prev = Some(class);
        }
        sequences.push(Sequence { frames, labels });
    }
    Ok(ToyDataset {
        sequences,
        num_classes,
        input_dim,
        seed,
    })
}

/// Input width of the recall task: one channel per symbol plus cue and
/// query flags.
pub fn recall_input_dim(num_symbols: usize) -> usize {
    num_symbols + 2
}

/// Builds one recall sequence: the cued symbol, the distractors, the query.
pub fn recall_sequence(symbol: usize, distractors: &[usize], num_symbols: usize) -> Sequence {
    let dim = recall_input_dim(num_symbols);
    let one_hot = |k: usize, extra: Option<usize>| {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        if let Some(e) = extra {
            v[e] = 1.0;
        }
        Vector::from_vec(v)
    };
    let mut frames = vec![one_hot(symbol, Some(num_symbols))];
    frames.extend(distractors.iter().map(|&d| one_hot(d, None)));
    frames.push(one_hot(num_symbols + 1, None));
    let mut labels = vec![None; frames.len()];
    *labels.last_mut().expect("query frame") = Some(symbol);
    Sequence { frames, labels }
}

/// Frame 0 shows the cued symbol, the next `delay` frames show uniformly
/// drawn uncued distractor symbols, and the final frame raises the query
/// flag; only the query frame is labeled (with the cued symbol).
pub fn gen_delayed_recall(task: &RecallTask) -> Result<ToyDataset> {
    let RecallTask {
        num_seq,
        delay,
        num_symbols,
        seed,
    } = *task;
    if delay > MAX_DWELL {
        return Err(Error::InvalidConfig(format!(
            "delay {delay} exceeds {MAX_DWELL}"
        )));
    }
    if num_symbols == 0 {
        return Err(Error::InvalidConfig("num_symbols must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..num_seq)
        .map(|_| {
            let symbol = rng.random_range(0..num_symbols);
            let distractors: Vec<usize> = (0..delay)
                .map(|_| rng.random_range(0..num_symbols))
                .collect();
            recall_sequence(symbol, &distractors, num_symbols)
        })
        .collect();
    Ok(ToyDataset {
        sequences,
        num_classes: num_symbols,
        input_dim: recall_input_dim(num_symbols),
        seed,
    })
}

/// Accuracy of always predicting the most frequent label.
pub fn majority_baseline(data: &ToyDataset) -> f64 {
    let mut counts = vec![0usize; data.num_classes];
    for s in &data.sequences {
        for y in s.labels.iter().flatten() {
            counts[*y] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    *counts.iter().max().expect("nonempty") as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Shuffling seed.
    pub seed: u64,
    /// Weight initialization seed.
    pub init_seed: u64,
    pub task: TaskConfig,
}

fn default_lr() -> f64 {
    0.05
}

fn default_clip() -> f64 {
    5.0
}

fn default_batch() -> usize {
    8
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr {} must be >= 0", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_norm {} must be positive",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy per labeled frame, measured after the epoch.
    pub loss: f64,
    pub frame_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<EpochMetrics> {
        self.history.last().copied()
    }
}

/// Mean loss per labeled frame and frame accuracy over a dataset.
pub fn evaluate(net: &Network, data: &ToyDataset) -> Result<(f64, f64)> {
    let parts = data
        .sequences
        .par_iter()
        .map(|s| -> Result<(f64, usize, usize)> {
            let out = stack_forward(net, &s.frames, None)?;
            let (mut loss, mut correct, mut n) = (0.0, 0, 0);
            for (z, y) in out.logits.iter().zip(&s.labels) {
                let Some(y) = *y else { continue };
                let zs = z.as_slice();
                let max = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + zs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - zs[y];
                let pred = zs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, &v)| if v > zs[best] { k } else { best });
                correct += usize::from(pred == y);
                n += 1;
            }
            Ok((loss, correct, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, correct, n) = parts
        .iter()
        .fold((0.0, 0, 0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

fn check_compatible(net: &NetworkConfig, data: &ToyDataset) -> Result<()> {
    if data.sequences.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if net.input_dim != data.input_dim {
        return Err(Error::InvalidConfig(format!(
            "network input_dim {} does not match dataset input_dim {}",
            net.input_dim, data.input_dim
        )));
    }
    if net.output_dim != data.num_classes {
        return Err(Error::InvalidConfig(format!(
            "network output_dim {} does not match {} classes",
            net.output_dim, data.num_classes
        )));
    }
    Ok(())
}

/// One SGD step: mean gradient over the batch's labeled frames, clipped to
/// global norm `clip_norm`.
fn sgd_step(net: &mut Network, batch: &[&Sequence], cfg: &TrainConfig) -> Result<f64> {
    let pairs: Vec<(&[Vector], &[Target])> = batch
        .iter()
        .map(|s| (s.frames.as_slice(), s.labels.as_slice()))
        .collect();
    let (loss, mut grads) = bptt_batch(net, &pairs, LossKind::CrossEntropy)?;
    let frames: usize = batch
        .iter()
        .map(|s| s.labels.iter().filter(|l| l.is_some()).count())
        .sum();
    if frames == 0 {
        return Ok(0.0);
    }
    grads.scale(1.0 / frames as f64);
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    if norm > cfg.clip_norm {
        grads.scale(cfg.clip_norm / norm);
    }
    for ((_, _, p), (_, g)) in net.tensors_mut().into_iter().zip(grads.tensors()) {
        for (w, d) in p.iter_mut().zip(g.data) {
            *w -= cfg.lr * d;
        }
    }
    Ok(loss / frames as f64)
}

/// Trains `net` in place on `data`; the metrics are recorded after every
/// epoch.
pub fn train_network(
    net: &mut Network,
    data: &ToyDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_compatible(&net.config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.sequences.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &data.sequences[i]).collect();
            match sgd_step(net, &batch, cfg) {
                Ok(loss) if loss.is_finite() => {}
                Ok(_) | Err(Error::NonFiniteLoss { .. }) | Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged { epoch, batch: b })
                }
                Err(e) => return Err(e),
            }
        }
        let (loss, frame_acc) = evaluate(net, data)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        history.push(EpochMetrics {
            epoch,
            loss,
            frame_acc,
        });
    }
    Ok(history)
}

/// Generates the configured task, initializes the network from
/// `cfg.init_seed` and trains it.
pub fn train(cfg: &TrainConfig, net_cfg: &NetworkConfig) -> Result<TrainOutcome> {
    let data = cfg.task.generate()?;
    let mut network = Network::init(net_cfg.clone(), cfg.init_seed)?;
    let history = train_network(&mut network, &data, cfg)?;
    Ok(TrainOutcome { network, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use std::collections::HashSet;

    fn phones(noise_std: f64, min_dwell: usize, max_dwell: usize) -> PhoneTask {
        PhoneTask {
            num_seq: 4,
            seq_len: 20,
            num_classes: 2,
            input_dim: 3,
            min_dwell,
            max_dwell,
            noise_std,
            seed: 5,
        }
    }

    fn segments(labels: &[Target]) -> usize {
        1 + labels.windows(2).filter(|w| w[0] != w[1]).count()
    }

    #[test]
    fn zero_noise_segments_are_constant() {
        let data = gen_pseudo_phone_task(&phones(0.0, 3, 7)).unwrap();
        for s in &data.sequences {
            for t in 1..s.frames.len() {
                if s.labels[t] == s.labels[t - 1] {
                    assert_eq!(s.frames[t], s.frames[t - 1]);
                }
            }
        }
    }

    #[test]
    fn fixed_dwell_forces_segmentation() {
        let data = gen_pseudo_phone_task(&phones(0.3, 5, 5)).unwrap();
        for s in &data.sequences {
            assert_eq!(s.frames.len(), 20);
            assert_eq!(segments(&s.labels), 4);
        }
    }

    #[test]
    fn phone_task_is_deterministic() {
        let a = gen_pseudo_phone_task(&phones(0.3, 2, 9)).unwrap();
        let b = gen_pseudo_phone_task(&phones(0.3, 2, 9)).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let mut other = phones(0.3, 2, 9);
        other.seed = 6;
        assert_ne!(gen_pseudo_phone_task(&other).unwrap(), a);
    }

    #[test]
    fn invalid_dwell_bounds() {
        assert!(gen_pseudo_phone_task(&phones(0.1, 0, 3)).is_err());
        assert!(gen_pseudo_phone_task(&phones(0.1, 6, 3)).is_err());
        assert!(gen_pseudo_phone_task(&phones(0.1, 3, 51)).is_err());
    }

    #[test]
    fn recall_delay_one_has_four_sequences() {
        let task = RecallTask {
            num_seq: 400,
            delay: 1,
            num_symbols: 2,
            seed: 0,
        };
        let data = gen_delayed_recall(&task).unwrap();
        let distinct: HashSet<String> = data
            .sequences
            .iter()
            .map(|s| serde_json::to_string(s).unwrap())
            .collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn recall_labels_only_on_query() {
        let task = RecallTask {
            num_seq: 10,
            delay: 3,
            num_symbols: 4,
            seed: 1,
        };
        let data = gen_delayed_recall(&task).unwrap();
        for s in &data.sequences {
            assert_eq!(s.frames.len(), 5);
            let labeled: Vec<_> = s
                .labels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_some())
                .collect();
            assert_eq!(labeled.len(), 1);
            assert_eq!(labeled[0].0, 4);
            let cued = s.frames[0].iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(s.labels[4], Some(cued));
        }
        assert!(gen_delayed_recall(&RecallTask { delay: 51, ..task }).is_err());
    }

    #[test]
    fn majority_baseline_by_enumeration() {
        // Every (symbol, distractor) combination exactly once.
        let k = 3;
        let mut sequences = Vec::new();
        for symbol in 0..k {
            for a in 0..k {
                for b in 0..k {
                    sequences.push(recall_sequence(symbol, &[a, b], k));
                }
            }
        }
        let data = ToyDataset {
            sequences,
            num_classes: k,
            input_dim: recall_input_dim(k),
            seed: 0,
        };
        assert_eq!(majority_baseline(&data), 1.0 / k as f64);
    }

    fn recall_cfg(lr: f64, clip_norm: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr,
            clip_norm,
            epochs,
            batch_size: 8,
            seed: 0,
            init_seed: 0,
            task: TaskConfig::Recall(RecallTask {
                num_seq: 32,
                delay: 2,
                num_symbols: 3,
                seed: 0,
            }),
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = recall_cfg(0.0, 5.0, 3);
        let net_cfg = NetworkConfig::new(CellKind::Lstm, 2, 5, 6, 3);
        let out = train(&cfg, &net_cfg).unwrap();
        assert_eq!(out.network, Network::init(net_cfg, 0).unwrap());
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn tiny_clip_bounds_every_step() {
        let cfg = recall_cfg(0.5, 1e-9, 1);
        let net_cfg = NetworkConfig::new(CellKind::Gru, 1, 5, 6, 3);
        let data = cfg.task.generate().unwrap();
        let mut net = Network::init(net_cfg, 0).unwrap();
        let batch: Vec<&Sequence> = data.sequences.iter().take(8).collect();
        let before: Vec<f64> = net
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.data.to_vec())
            .collect();
        sgd_step(&mut net, &batch, &cfg).unwrap();
        let after: Vec<f64> = net
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.data.to_vec())
            .collect();
        let moved = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(moved > 0.0 && moved <= 0.5 * 1e-9 * (1.0 + 1e-9), "{moved}");
    }

    #[test]
    fn first_epoch_is_finite_for_all_cells() {
        for kind in [CellKind::Lstm, CellKind::Gru, CellKind::LazyLstm] {
            let out = train(
                &recall_cfg(0.05, 5.0, 1),
                &NetworkConfig::new(kind, 2, 5, 6, 3),
            )
            .unwrap();
            assert!(out.history[0].loss.is_finite());
        }
    }

    #[test]
    fn immediate_recall_is_learned() {
        for kind in [CellKind::Lstm, CellKind::Gru, CellKind::LazyLstm] {
            let cfg = TrainConfig {
                lr: 0.5,
                epochs: 40,
                task: TaskConfig::Recall(RecallTask {
                    num_seq: 32,
                    delay: 0,
                    num_symbols: 3,
                    seed: 0,
                }),
                ..recall_cfg(0.5, 5.0, 40)
            };
            let out = train(&cfg, &NetworkConfig::new(kind, 1, 5, 8, 3)).unwrap();
            assert_eq!(out.final_metrics().unwrap().frame_acc, 1.0, "{kind}");
        }
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let cfg = recall_cfg(0.1, 5.0, 1);
        assert!(train(&cfg, &NetworkConfig::new(CellKind::Gru, 1, 4, 6, 3)).is_err());
        assert!(train(&cfg, &NetworkConfig::new(CellKind::Gru, 1, 5, 6, 2)).is_err());
        assert!(train(
            &recall_cfg(0.1, 0.0, 1),
            &NetworkConfig::new(CellKind::Gru, 1, 5, 6, 3)
        )
        .is_err());
    }
}
