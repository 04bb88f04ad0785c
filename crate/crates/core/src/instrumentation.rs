//! Per-step state capture and the JSONL trace format.
//!
//! One line per recorded step:
//! `{"seq": id, "layer": l, "t": t, "c": [..], "m": [..], "i": [..], "f": [..], "o": [..], "g": [..]}`
//! plus `"units": [..]` when only a sampled subset of units was kept.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{CellState, GateRecord};
use crate::error::{Error, Result};
use crate::numeric::Vector;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub c: Vector,
    pub m: Vector,
    pub gates: GateRecord,
}

/// Time-ordered states of one layer over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrace {
    pub seq: u64,
    pub layer: usize,
    /// Hidden-unit indices kept, or `None` for every unit.
    pub units: Option<Vec<usize>>,
    pub steps: Vec<StepRecord>,
}

impl StateTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.steps.first().map_or(0, |s| s.c.dim())
    }

    pub fn cells(&self) -> impl Iterator<Item = &Vector> {
        self.steps.iter().map(|s| &s.c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SamplingPolicy {
    All,
    /// `count` units per layer, drawn once from `seed`.
    Random {
        count: usize,
        seed: u64,
    },
}

impl SamplingPolicy {
    /// Indices kept for a layer of width `hidden`; `None` means all.
    pub fn units(&self, layer: usize, hidden: usize) -> Option<Vec<usize>> {
        match *self {
            SamplingPolicy::All => None,
            SamplingPolicy::Random { count, .. } if count >= hidden => None,
            SamplingPolicy::Random { count, seed } => {
                Some(sample_units(count, hidden, seed, layer))
            }
        }
    }
}

/// A sorted, seeded subset of `count` indices out of `0..hidden`.
pub fn sample_units(count: usize, hidden: usize, seed: u64, layer: usize) -> Vec<usize> {
    let stream = seed ^ (layer as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut idx = rand::seq::index::sample(&mut rng, hidden, count.min(hidden)).into_vec();
    idx.sort_unstable();
    idx
}

/// Collects one trace per layer for a single sequence. Not shared across
/// workers; create one per sequence.
#[derive(Debug, Clone)]
pub struct StateRecorder {
    seq: u64,
    policy: SamplingPolicy,
    traces: Vec<StateTrace>,
}

impl StateRecorder {
    pub fn new(seq: u64, policy: SamplingPolicy) -> Self {
        StateRecorder {
            seq,
            policy,
            traces: Vec::new(),
        }
    }

    pub fn full(seq: u64) -> Self {
        Self::new(seq, SamplingPolicy::All)
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn record(
        &mut self,
        layer: usize,
        t: usize,
        state: &CellState,
        gates: &GateRecord,
    ) -> Result<()> {
        while self.traces.len() <= layer {
            self.traces.push(StateTrace {
                seq: self.seq,
                layer: self.traces.len(),
                units: None,
                steps: Vec::new(),
            });
        }
        let trace = &mut self.traces[layer];
        if t != trace.steps.len() {
            return Err(Error::OutOfOrder {
                layer,
                expected: trace.steps.len(),
                got: t,
            });
        }
        if trace.steps.is_empty() {
            trace.units = self.policy.units(layer, state.c.dim());
        }
        let pick = |v: &Vector| match &trace.units {
            None => v.clone(),
            Some(idx) => Vector::from_vec(idx.iter().map(|&k| v[k]).collect()),
        };
        let rec = StepRecord {
            t,
            c: pick(&state.c),
            m: pick(&state.m),
            gates: GateRecord {
                i: pick(&gates.i),
                f: pick(&gates.f),
                o: pick(&gates.o),
                g: pick(&gates.g),
            },
        };
        trace.steps.push(rec);
        Ok(())
    }

    pub fn traces(&self) -> &[StateTrace] {
        &self.traces
    }

    pub fn into_traces(self) -> Vec<StateTrace> {
        self.traces
    }

    pub fn total_records(&self) -> usize {
        self.traces.iter().map(StateTrace::len).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    seq: u64,
    layer: usize,
    t: usize,
    c: Vec<f64>,
    m: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<Vec<usize>>,
}

fn write_lines(w: &mut impl Write, trace: &StateTrace) -> serde_json::Result<()> {
    for s in &trace.steps {
        let line = TraceLine {
            seq: trace.seq,
            layer: trace.layer,
            t: s.t,
            c: s.c.as_slice().to_vec(),
            m: s.m.as_slice().to_vec(),
            i: s.gates.i.as_slice().to_vec(),
            f: s.gates.f.as_slice().to_vec(),
            o: s.gates.o.as_slice().to_vec(),
            g: Some(s.gates.g.as_slice().to_vec()),
            units: trace.units.clone(),
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    Ok(())
}

pub fn export_trace(trace: &StateTrace, path: impl AsRef<Path>) -> Result<()> {
    export_traces(std::slice::from_ref(trace), path)
}

/// Writes several traces to one JSONL file, in order.
pub fn export_traces(traces: &[StateTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if traces.is_empty() || traces.iter().any(StateTrace::is_empty) {
        return Err(Error::Empty("trace"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for trace in traces {
        write_lines(&mut w, trace).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSONL trace file back, grouping lines by `(seq, layer)` in order
/// of first appearance.
pub fn import_traces(path: impl AsRef<Path>) -> Result<Vec<StateTrace>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<(u64, usize)> = Vec::new();
    let mut groups: BTreeMap<(u64, usize), StateTrace> = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let key = (rec.seq, rec.layer);
        let trace = groups.entry(key).or_insert_with(|| {
            order.push(key);
            StateTrace {
                seq: rec.seq,
                layer: rec.layer,
                units: rec.units.clone(),
                steps: Vec::new(),
            }
        });
        if rec.t != trace.steps.len() {
            return Err(Error::OutOfOrder {
                layer: rec.layer,
                expected: trace.steps.len(),
                got: rec.t,
            });
        }
        let width = rec.c.len();
        if [rec.m.len(), rec.i.len(), rec.f.len(), rec.o.len()]
            .iter()
            .any(|&l| l != width)
            || trace.width() != 0 && trace.width() != width
        {
            return Err(Error::Schema(format!(
                "{}:{}: inconsistent vector widths",
                path.display(),
                n + 1
            )));
        }
        let g = rec.g.unwrap_or_else(|| vec![0.0; width]);
        trace.steps.push(StepRecord {
            t: rec.t,
            c: Vector::from_vec(rec.c),
            m: Vector::from_vec(rec.m),
            gates: GateRecord {
                i: Vector::from_vec(rec.i),
                f: Vector::from_vec(rec.f),
                o: Vector::from_vec(rec.o),
                g: Vector::from_vec(g),
            },
        });
    }
    Ok(order
        .into_iter()
        .filter_map(|k| groups.remove(&k))
        .collect())
}
