//! JSON model files and experiment configs.
//!
//! A model file stores the network config, every parameter tensor by name as
//! a row-major array, and training metadata. Floats are written in shortest
//! round-trip form, so save/load is bit exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cells::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub kind: String,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
    #[serde(default)]
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub layers: Vec<LayerRecord>,
    pub output: Vec<TensorRecord>,
    #[serde(default)]
    pub metadata: ModelMetadata,
}

fn record(name: &str, rows: usize, cols: usize, data: &[f64]) -> TensorRecord {
    TensorRecord {
        name: name.to_string(),
        rows,
        cols,
        data: data.to_vec(),
    }
}

impl ModelFile {
    pub fn from_network(net: &Network, metadata: ModelMetadata) -> Self {
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(l, p)| LayerRecord {
                kind: net.config.layer_kind(l).name().to_string(),
                tensors: p
                    .tensors()
                    .iter()
                    .map(|t| record(t.name, t.rows, t.cols, t.data))
                    .collect(),
            })
            .collect();
        let output = net
            .output
            .tensors()
            .iter()
            .map(|t| record(t.name, t.rows, t.cols, t.data))
            .collect();
        ModelFile {
            format_version: FORMAT_VERSION,
            config: net.config.clone(),
            layers,
            output,
            metadata,
        }
    }

    /// Rebuilds the network, checking names, declared shapes and array
    /// lengths against the config.
    pub fn to_network(&self) -> Result<Network> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut net = Network::zeros(self.config.clone())?;
        if self.layers.len() != net.layers.len() {
            return Err(Error::Schema(format!(
                "config declares {} layers, file has {}",
                net.layers.len(),
                self.layers.len()
            )));
        }
        let records: Vec<(Option<usize>, &TensorRecord)> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.tensors.iter().map(move |t| (Some(l), t)))
            .chain(self.output.iter().map(|t| (None, t)))
            .collect();
        let shapes: Vec<(usize, usize)> = net
            .tensors()
            .iter()
            .map(|(_, t)| (t.rows, t.cols))
            .collect();
        let slots = net.tensors_mut();
        if records.len() != slots.len() {
            return Err(Error::Schema(format!(
                "expected {} tensors, file has {}",
                slots.len(),
                records.len()
            )));
        }
        for (((layer, name, dst), (rec_layer, rec)), (rows, cols)) in
            slots.into_iter().zip(records).zip(shapes)
        {
            let place = layer.map_or("output".to_string(), |l| format!("layer {l}"));
            if rec_layer != layer || rec.name != name {
                return Err(Error::Schema(format!(
                    "{place}: expected tensor {name}, found {}",
                    rec.name
                )));
            }
            if rec.data.len() != rec.rows * rec.cols {
                return Err(Error::DimMismatch {
                    op: "tensor data length vs rows*cols",
                    left: rec.data.len(),
                    right: rec.rows * rec.cols,
                });
            }
            if (rec.rows, rec.cols) != (rows, cols) {
                return Err(Error::DimMismatch {
                    op: name,
                    left: rec.rows * rec.cols,
                    right: rows * cols,
                });
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
            dst.copy_from_slice(&rec.data);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let kind = self.config.layer_kind(l).name();
            if layer.kind != kind {
                return Err(Error::Schema(format!(
                    "layer {l}: kind {} but config says {kind}",
                    layer.kind
                )));
            }
        }
        Ok(net)
    }
}

pub fn save_model(net: &Network, metadata: ModelMetadata, path: impl AsRef<Path>) -> Result<()> {
    write_json(&ModelFile::from_network(net, metadata), path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Network, ModelMetadata)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    // Version is checked before the rest of the schema so that future files
    // report the version rather than an unknown field.
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::VersionMismatch {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(Error::Schema(format!(
                "{}: missing format_version",
                path.display()
            )))
        }
    }
    let file: ModelFile = serde_json::from_value(value)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let net = file.to_network()?;
    Ok((net, file.metadata))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramProbe {
    #[serde(default = "default_units")]
    pub units_per_layer: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_units() -> usize {
    50
}

fn default_bins() -> usize {
    40
}

fn default_clip() -> f64 {
    10.0
}

impl Default for HistogramProbe {
    fn default() -> Self {
        HistogramProbe {
            units_per_layer: default_units(),
            bins: default_bins(),
            clip: default_clip(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceProbe {
    #[serde(default = "default_method")]
    pub method: crate::probes::ProjectionMethod,
    /// Index of the sequence in the evaluation dataset.
    #[serde(default)]
    pub sequence: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_method() -> crate::probes::ProjectionMethod {
    crate::probes::ProjectionMethod::Pca
}

impl Default for TraceProbe {
    fn default() -> Self {
        TraceProbe {
            method: default_method(),
            sequence: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbProbe {
    #[serde(default)]
    pub sequence: usize,
    pub noise_pos: usize,
    pub noise_len: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise_std() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    0.01
}

impl Default for PerturbProbe {
    fn default() -> Self {
        PerturbProbe {
            sequence: 0,
            noise_pos: 20,
            noise_len: 10,
            noise_std: default_noise_std(),
            epsilon: default_epsilon(),
            seed: 0,
        }
    }
}

impl PerturbProbe {
    pub fn spec(&self) -> crate::probes::PerturbSpec {
        let mut s = crate::probes::PerturbSpec::new(
            self.noise_pos,
            self.noise_len,
            self.noise_std,
            self.seed,
        );
        s.epsilon = self.epsilon;
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub histogram: HistogramProbe,
    #[serde(default)]
    pub trace: TraceProbe,
    #[serde(default)]
    pub perturb: PerturbProbe,
}

/// One document describing a full experiment: model, training, task and
/// probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        let p = &self.probes;
        if p.histogram.bins == 0 || !(p.histogram.clip > 0.0) {
            return Err(Error::InvalidConfig(
                "histogram needs bins > 0 and clip > 0".into(),
            ));
        }
        if !(p.perturb.epsilon > 0.0) || !(p.perturb.noise_std >= 0.0) {
            return Err(Error::InvalidConfig(
                "perturb needs epsilon > 0 and noise_std >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{lstm_step, CellKind, CellState, ParameterSet};
    use crate::numeric::Vector;
    use crate::reference;

    fn sample_net(kind: CellKind) -> Network {
        Network::init(NetworkConfig::new(kind, 2, 3, 4, 5).with_residual(true), 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [CellKind::Lstm, CellKind::Gru, CellKind::LazyLstm] {
            let mut net = sample_net(kind);
            // Values with long decimal expansions.
            net.output.bias =
                Vector::from_vec((0..5).map(|k| (k as f64 + 0.1).sqrt() / 3.0).collect());
            let path = dir.path().join(format!("{kind}.json"));
            let meta = ModelMetadata {
                init_seed: Some(9),
                shuffle_seed: Some(4),
                epochs_trained: 2,
            };
            save_model(&net, meta.clone(), &path).unwrap();
            let (back, back_meta) = load_model(&path).unwrap();
            assert_eq!(back_meta, meta);
            for ((_, a), (_, b)) in net.tensors().iter().zip(back.tensors().iter()) {
                let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a.data), bits(b.data), "{}", a.name);
            }
            assert_eq!(net, back);
        }
    }

    #[test]
    fn truncated_file_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&sample_net(CellKind::Gru), ModelMetadata::default(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn version_and_dim_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut file =
            ModelFile::from_network(&sample_net(CellKind::Lstm), ModelMetadata::default());
        file.format_version = 2;
        write_json(&file, &path).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));

        file.format_version = 1;
        file.layers[1].tensors[0].data.pop();
        write_json(&file, &path).unwrap();
        assert!(matches!(load_model(&path), Err(Error::DimMismatch { .. })));

        let mut file =
            ModelFile::from_network(&sample_net(CellKind::Lstm), ModelMetadata::default());
        file.layers[0].tensors.swap(0, 1);
        write_json(&file, &path).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Schema(_))));

        let mut file =
            ModelFile::from_network(&sample_net(CellKind::Lstm), ModelMetadata::default());
        file.output[0].rows = 4;
        file.output[0].cols = 5;
        write_json(&file, &path).unwrap();
        assert!(matches!(load_model(&path), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_model("/nonexistent/m.json"),
            Err(Error::Io { .. })
        ));
    }

    const ONE_UNIT: &str = r#"{
  "format_version": 1,
  "config": {"cell_kind": "lstm", "layers": 1, "input_dim": 1, "hidden_dim": 1, "output_dim": 1},
  "layers": [{"kind": "lstm", "tensors": [
    {"name": "W_ix", "rows": 1, "cols": 1, "data": [0.5]},
    {"name": "W_im", "rows": 1, "cols": 1, "data": [-0.25]},
    {"name": "W_fx", "rows": 1, "cols": 1, "data": [0.75]},
    {"name": "W_fm", "rows": 1, "cols": 1, "data": [0.125]},
    {"name": "W_cx", "rows": 1, "cols": 1, "data": [1.5]},
    {"name": "W_cm", "rows": 1, "cols": 1, "data": [-0.5]},
    {"name": "W_ox", "rows": 1, "cols": 1, "data": [-1.0]},
    {"name": "W_om", "rows": 1, "cols": 1, "data": [0.3]},
    {"name": "V_ic", "rows": 1, "cols": 1, "data": [0.2]},
    {"name": "V_fc", "rows": 1, "cols": 1, "data": [-0.1]},
    {"name": "V_oc", "rows": 1, "cols": 1, "data": [0.4]},
    {"name": "b_i", "rows": 1, "cols": 1, "data": [0.05]},
    {"name": "b_f", "rows": 1, "cols": 1, "data": [1.0]},
    {"name": "b_c", "rows": 1, "cols": 1, "data": [-0.2]},
    {"name": "b_o", "rows": 1, "cols": 1, "data": [0.1]}
  ]}],
  "output": [
    {"name": "W_out", "rows": 1, "cols": 1, "data": [1.0]},
    {"name": "b_out", "rows": 1, "cols": 1, "data": [0.0]}
  ]
}"#;

    #[test]
    fn hand_written_one_unit_model_matches_scalar_formula() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.json");
        fs::write(&path, ONE_UNIT).unwrap();
        let (net, _) = load_model(&path).unwrap();
        let ParameterSet::Lstm(p) = &net.layers[0] else {
            panic!("expected lstm")
        };

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (x, c0, m0) = (0.8, 0.3, -0.6);
        let i = sig(0.5 * x - 0.25 * m0 + 0.2 * c0 + 0.05);
        let f = sig(0.75 * x + 0.125 * m0 - 0.1 * c0 + 1.0);
        let c = f * c0 + i * (1.5 * x - 0.5 * m0 - 0.2).tanh();
        let o = sig(-x + 0.3 * m0 + 0.4 * c + 0.1);
        let m = o * c.tanh();

        let prev = CellState {
            c: Vector::from_vec(vec![c0]),
            m: Vector::from_vec(vec![m0]),
        };
        let (next, _) = lstm_step(p, &prev, &Vector::from_vec(vec![x])).unwrap();
        assert!((next.c[0] - c).abs() <= 1e-12);
        assert!((next.m[0] - m).abs() <= 1e-12);

        let r = reference::RefNetwork::<f64>::from_network(&net);
        let logits = r.logits(&[Vector::from_vec(vec![x])]);
        let (first, _) = lstm_step(p, &CellState::zeros(1), &Vector::from_vec(vec![x])).unwrap();
        assert!((logits[0][0] - first.m[0]).abs() <= 1e-12);
    }

    #[test]
    fn experiment_config_defaults_and_unknown_fields() {
        let text = r#"{
          "network": {"cell_kind": "gru", "layers": 1, "input_dim": 4, "hidden_dim": 8, "output_dim": 3},
          "train": {"epochs": 2, "seed": 1, "init_seed": 2,
                    "task": {"kind": "recall", "num_seq": 4, "delay": 1, "num_symbols": 2, "seed": 3}}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.probes, ProbeConfig::default());
        assert_eq!(cfg.train.lr, 0.05);
        let bad = text.replace("\"epochs\"", "\"epoch_count\": 1, \"epochs\"");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
    }
}
