//! Hand-derived backpropagation through time for the three cells and the
//! stacked network, with a central-difference gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{
    forward_run, CellKind, CellState, GruParams, LazyCandidate, LstmParams, Network, NetworkConfig,
    OutputProjection, ParameterSet, TensorView,
};
use crate::error::{Error, Result};
use crate::instrumentation::{StateTrace, StepRecord};
use crate::numeric::{hadamard, Vector};
use crate::reference::{DoubleDouble, Real, RefNetwork};

/// Per-frame target class; `None` frames carry no loss.
pub type Target = Option<usize>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy summed over labeled frames.
    #[default]
    CrossEntropy,
    /// Constant zero loss that ignores the logits.
    Null,
}

/// Gradient buffers shaped exactly like a [`Network`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<ParameterSet>,
    pub output: OutputProjection,
}

impl GradientSet {
    pub fn zeros_for(net: &Network) -> Self {
        let z = net.zeros_like();
        GradientSet {
            layers: z.layers,
            output: z.output,
        }
    }

    pub fn tensors(&self) -> Vec<(Option<usize>, TensorView<'_>)> {
        let mut out: Vec<_> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, p)| p.tensors().into_iter().map(move |t| (Some(l), t)))
            .collect();
        out.extend(self.output.tensors().into_iter().map(|t| (None, t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(Option<usize>, &'static str, &mut [f64])> {
        let mut out: Vec<_> = self
            .layers
            .iter_mut()
            .enumerate()
            .flat_map(|(l, p)| {
                p.tensors_mut()
                    .into_iter()
                    .map(move |(n, s)| (Some(l), n, s))
            })
            .collect();
        out.extend(
            self.output
                .tensors_mut()
                .into_iter()
                .map(|(n, s)| (None, n, s)),
        );
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for (_, _, s) in self.tensors_mut() {
            s.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn accumulate(&mut self, other: &GradientSet) {
        let src = other.tensors();
        for ((_, _, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s.data).for_each(|(a, b)| *a += b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-frame loss and its gradient w.r.t. the logits.
fn frame_loss(
    logits: &Vector,
    target: Target,
    kind: LossKind,
    step: usize,
) -> Result<(f64, Vector)> {
    let n = logits.dim();
    let Some(y) = target else {
        return Ok((0.0, Vector::zeros(n)));
    };
    if kind == LossKind::Null {
        return Ok((0.0, Vector::zeros(n)));
    }
    if y >= n {
        return Err(Error::InvalidConfig(format!(
            "target {y} at frame {step} out of range for {n} classes"
        )));
    }
    let z = logits.as_slice();
    let lse = log_sum_exp(z);
    let loss = lse - z[y];
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let mut d: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    d[y] -= 1.0;
    Ok((loss, Vector::from_vec(d)))
}

fn check_targets(seq: &[Vector], targets: &[Target]) -> Result<()> {
    if targets.len() != seq.len() {
        return Err(Error::LengthMismatch {
            what: "targets vs frames",
            left: targets.len(),
            right: seq.len(),
        });
    }
    Ok(())
}

/// Total loss of one sequence without gradients.
pub fn sequence_loss(
    net: &Network,
    seq: &[Vector],
    targets: &[Target],
    kind: LossKind,
) -> Result<f64> {
    Ok(frame_losses(net, seq, targets, kind)?.iter().sum())
}

/// Loss of every frame of one sequence.
pub fn frame_losses(
    net: &Network,
    seq: &[Vector],
    targets: &[Target],
    kind: LossKind,
) -> Result<Vec<f64>> {
    check_targets(seq, targets)?;
    let run = forward_run(net, seq, None)?;
    run.logits
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(t, (z, &y))| Ok(frame_loss(z, y, kind, t)?.0))
        .collect()
}

/// Loss of one sequence and the exact gradient of that loss w.r.t. every
/// parameter of `net`.
pub fn bptt(
    net: &Network,
    seq: &[Vector],
    targets: &[Target],
    kind: LossKind,
) -> Result<(f64, GradientSet)> {
    check_targets(seq, targets)?;
    let cfg = &net.config;
    let run = forward_run(net, seq, None)?;
    let mut grads = GradientSet::zeros_for(net);

    let mut total = 0.0;
    let mut d_out = Vec::with_capacity(seq.len());
    for (t, (z, &y)) in run.logits.iter().zip(targets).enumerate() {
        let (loss, dz) = frame_loss(z, y, kind, t)?;
        total += loss;
        grads.output.weight.add_outer(&dz, &run.top[t])?;
        grads.output.bias.axpy(1.0, &dz)?;
        d_out.push(net.output.weight.matvec_transposed(&dz)?);
    }

    for l in (0..cfg.layers).rev() {
        let inputs = &run.inputs[l];
        let trace = &run.traces[l];
        let mut d_in = match (&net.layers[l], &mut grads.layers[l]) {
            (ParameterSet::Lstm(p), ParameterSet::Lstm(g)) => match cfg.layer_kind(l) {
                CellKind::LazyLstm => {
                    lazy_lstm_backward(p, g, inputs, trace, &d_out, cfg.lazy_candidate)?
                }
                _ => lstm_backward(p, g, inputs, trace, &d_out)?,
            },
            (ParameterSet::Gru(p), ParameterSet::Gru(g)) => {
                gru_backward(p, g, inputs, trace, &d_out)?
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "layer {l}: parameter kind does not match config"
                )))
            }
        };
        if cfg.has_shortcut(l) {
            for (dx, dy) in d_in.iter_mut().zip(&d_out) {
                dx.axpy(1.0, dy)?;
            }
        }
        d_out = d_in;
    }
    Ok((total, grads))
}

/// Summed loss and gradients over several sequences. Each sequence is
/// differentiated independently (in parallel) and the per-sequence buffers
/// are reduced in input order, so the result does not depend on scheduling.
pub fn bptt_batch(
    net: &Network,
    batch: &[(&[Vector], &[Target])],
    kind: LossKind,
) -> Result<(f64, GradientSet)> {
    let parts = batch
        .par_iter()
        .map(|(seq, targets)| bptt(net, seq, targets, kind))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads = GradientSet::zeros_for(net);
    for (loss, g) in &parts {
        total += loss;
        grads.accumulate(g);
    }
    Ok((total, grads))
}

fn prev_state(trace: &StateTrace, t: usize) -> CellState {
    match t.checked_sub(1).map(|p| &trace.steps[p]) {
        Some(s) => CellState {
            c: s.c.clone(),
            m: s.m.clone(),
        },
        None => CellState::zeros(trace.width()),
    }
}

fn ew(a: &Vector, b: &Vector, f: impl Fn(f64, f64) -> f64) -> Vector {
    Vector::from_vec(a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
}

/// `d ⊙ s ⊙ (1 - s)` for a sigmoid output `s`.
fn through_sigmoid(d: &Vector, s: &Vector) -> Vector {
    ew(d, s, |d, s| d * s * (1.0 - s))
}

/// `d ⊙ (1 - y²)` for a tanh output `y`.
fn through_tanh(d: &Vector, y: &Vector) -> Vector {
    ew(d, y, |d, y| d * (1.0 - y * y))
}

fn add_diag(g: &mut [f64], a: &Vector, b: &Vector) {
    for ((gi, ai), bi) in g.iter_mut().zip(a.iter()).zip(b.iter()) {
        *gi += ai * bi;
    }
}

fn sum(vs: &[Vector]) -> Result<Vector> {
    let mut acc = vs[0].clone();
    for v in &vs[1..] {
        acc.axpy(1.0, v)?;
    }
    Ok(acc)
}

fn lstm_backward(
    p: &LstmParams,
    g: &mut LstmParams,
    inputs: &[Vector],
    trace: &StateTrace,
    d_out: &[Vector],
) -> Result<Vec<Vector>> {
    let hidden = p.hidden_dim();
    let mut dc_next = Vector::zeros(hidden);
    let mut dm_next = Vector::zeros(hidden);
    let mut d_in = vec![Vector::zeros(p.input_dim()); inputs.len()];
    for t in (0..inputs.len()).rev() {
        let x = &inputs[t];
        let prev = prev_state(trace, t);
        let StepRecord { c, gates, .. } = &trace.steps[t];
        let hc = c.map(f64::tanh);

        let dm = d_out[t].add(&dm_next)?;
        let da_o = through_sigmoid(&hadamard(&dm, &hc)?, &gates.o);
        let mut dc = dc_next.add(&through_tanh(&hadamard(&dm, &gates.o)?, &hc))?;
        dc.axpy(1.0, &p.v_oc.apply(&da_o)?)?;

        let da_i = through_sigmoid(&hadamard(&dc, &gates.g)?, &gates.i);
        let da_f = through_sigmoid(&hadamard(&dc, &prev.c)?, &gates.f);
        let da_g = through_tanh(&hadamard(&dc, &gates.i)?, &gates.g);

        g.w_ix.add_outer(&da_i, x)?;
        g.w_im.add_outer(&da_i, &prev.m)?;
        g.w_fx.add_outer(&da_f, x)?;
        g.w_fm.add_outer(&da_f, &prev.m)?;
        g.w_cx.add_outer(&da_g, x)?;
        g.w_cm.add_outer(&da_g, &prev.m)?;
        g.w_ox.add_outer(&da_o, x)?;
        g.w_om.add_outer(&da_o, &prev.m)?;
        add_diag(g.v_ic.as_mut_slice(), &da_i, &prev.c);
        add_diag(g.v_fc.as_mut_slice(), &da_f, &prev.c);
        add_diag(g.v_oc.as_mut_slice(), &da_o, c);
        g.b_i.axpy(1.0, &da_i)?;
        g.b_f.axpy(1.0, &da_f)?;
        g.b_c.axpy(1.0, &da_g)?;
        g.b_o.axpy(1.0, &da_o)?;

        d_in[t] = sum(&[
            p.w_ix.matvec_transposed(&da_i)?,
            p.w_fx.matvec_transposed(&da_f)?,
            p.w_cx.matvec_transposed(&da_g)?,
            p.w_ox.matvec_transposed(&da_o)?,
        ])?;
        dm_next = sum(&[
            p.w_im.matvec_transposed(&da_i)?,
            p.w_fm.matvec_transposed(&da_f)?,
            p.w_cm.matvec_transposed(&da_g)?,
            p.w_om.matvec_transposed(&da_o)?,
        ])?;
        dc_next = sum(&[
            hadamard(&dc, &gates.f)?,
            p.v_ic.apply(&da_i)?,
            p.v_fc.apply(&da_f)?,
        ])?;
    }
    Ok(d_in)
}

fn lazy_lstm_backward(
    p: &LstmParams,
    g: &mut LstmParams,
    inputs: &[Vector],
    trace: &StateTrace,
    d_out: &[Vector],
    candidate: LazyCandidate,
) -> Result<Vec<Vector>> {
    let hidden = p.hidden_dim();
    let mut dc_next = Vector::zeros(hidden);
    let mut dm_next = Vector::zeros(hidden);
    let mut d_in = vec![Vector::zeros(p.input_dim()); inputs.len()];
    for t in (0..inputs.len()).rev() {
        let x = &inputs[t];
        let prev = prev_state(trace, t);
        let StepRecord { m, gates, .. } = &trace.steps[t];
        let hp = prev.c.map(f64::tanh);

        let dc = &dc_next;
        let da_i = through_sigmoid(&hadamard(dc, &gates.g)?, &gates.i);
        let da_f = through_sigmoid(&hadamard(dc, &prev.c)?, &gates.f);
        let da_g = through_tanh(&hadamard(dc, &gates.i)?, &gates.g);

        let mut dm = d_out[t].add(&dm_next)?;
        let cand_in = match candidate {
            LazyCandidate::Current => {
                dm.axpy(1.0, &p.w_cm.matvec_transposed(&da_g)?)?;
                m
            }
            LazyCandidate::Previous => &prev.m,
        };
        let da_o = through_sigmoid(&hadamard(&dm, &hp)?, &gates.o);

        g.w_ix.add_outer(&da_i, x)?;
        g.w_im.add_outer(&da_i, &prev.m)?;
        g.w_fx.add_outer(&da_f, x)?;
        g.w_fm.add_outer(&da_f, &prev.m)?;
        g.w_cx.add_outer(&da_g, x)?;
        g.w_cm.add_outer(&da_g, cand_in)?;
        g.w_ox.add_outer(&da_o, x)?;
        g.w_om.add_outer(&da_o, &prev.m)?;
        add_diag(g.v_ic.as_mut_slice(), &da_i, &prev.c);
        add_diag(g.v_fc.as_mut_slice(), &da_f, &prev.c);
        add_diag(g.v_oc.as_mut_slice(), &da_o, &prev.c);
        g.b_i.axpy(1.0, &da_i)?;
        g.b_f.axpy(1.0, &da_f)?;
        g.b_c.axpy(1.0, &da_g)?;
        g.b_o.axpy(1.0, &da_o)?;

        d_in[t] = sum(&[
            p.w_ix.matvec_transposed(&da_i)?,
            p.w_fx.matvec_transposed(&da_f)?,
            p.w_cx.matvec_transposed(&da_g)?,
            p.w_ox.matvec_transposed(&da_o)?,
        ])?;
        let mut dm_prev = sum(&[
            p.w_im.matvec_transposed(&da_i)?,
            p.w_fm.matvec_transposed(&da_f)?,
            p.w_om.matvec_transposed(&da_o)?,
        ])?;
        if candidate == LazyCandidate::Previous {
            dm_prev.axpy(1.0, &p.w_cm.matvec_transposed(&da_g)?)?;
        }
        dc_next = sum(&[
            hadamard(dc, &gates.f)?,
            through_tanh(&hadamard(&dm, &gates.o)?, &hp),
            p.v_ic.apply(&da_i)?,
            p.v_fc.apply(&da_f)?,
            p.v_oc.apply(&da_o)?,
        ])?;
        dm_next = dm_prev;
    }
    Ok(d_in)
}

fn gru_backward(
    p: &GruParams,
    g: &mut GruParams,
    inputs: &[Vector],
    trace: &StateTrace,
    d_out: &[Vector],
) -> Result<Vec<Vector>> {
    let hidden = p.hidden_dim();
    let mut dc_next = Vector::zeros(hidden);
    let mut d_in = vec![Vector::zeros(p.input_dim()); inputs.len()];
    for t in (0..inputs.len()).rev() {
        let x = &inputs[t];
        let c_prev = prev_state(trace, t).c;
        let StepRecord { m, gates, .. } = &trace.steps[t];

        let dc = &dc_next;
        // f = 1 - i, so i sees both the candidate and the retained cell.
        let di = ew(dc, &gates.g.sub(&c_prev)?, |d, v| d * v);
        let da_i = through_sigmoid(&di, &gates.i);
        let da_g = through_tanh(&hadamard(dc, &gates.i)?, &gates.g);
        let dm = d_out[t].add(&p.w_cm.matvec_transposed(&da_g)?)?;
        let da_o = through_sigmoid(&hadamard(&dm, &c_prev)?, &gates.o);

        g.w_ix.add_outer(&da_i, x)?;
        g.w_ic.add_outer(&da_i, &c_prev)?;
        g.w_ox.add_outer(&da_o, x)?;
        g.w_oc.add_outer(&da_o, &c_prev)?;
        g.w_cx.add_outer(&da_g, x)?;
        g.w_cm.add_outer(&da_g, m)?;
        g.b_i.axpy(1.0, &da_i)?;
        g.b_o.axpy(1.0, &da_o)?;
        g.b_c.axpy(1.0, &da_g)?;

        d_in[t] = sum(&[
            p.w_ix.matvec_transposed(&da_i)?,
            p.w_ox.matvec_transposed(&da_o)?,
            p.w_cx.matvec_transposed(&da_g)?,
        ])?;
        dc_next = sum(&[
            hadamard(dc, &gates.f)?,
            hadamard(&dm, &gates.o)?,
            p.w_ic.matvec_transposed(&da_i)?,
            p.w_oc.matvec_transposed(&da_o)?,
        ])?;
    }
    Ok(d_in)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub cell: CellKind,
    pub residual: bool,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
    pub params_checked: usize,
    pub max_rel_err: f64,
    /// `layer/name[index]` of the worst entry.
    pub offending_param: String,
    pub passed: bool,
}

/// Shape of the network and sequence used by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckSetup {
    pub layers: usize,
    pub hidden: usize,
    pub steps: usize,
    pub classes: usize,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            layers: 2,
            hidden: 5,
            steps: 7,
            classes: 3,
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Seeded network, sequence and targets for gradient checks. The input
/// width equals the hidden width so residual nets wrap every layer.
pub fn grad_check_fixture(
    cell: CellKind,
    residual: bool,
    seed: u64,
    setup: &GradCheckSetup,
) -> Result<(Network, Vec<Vector>, Vec<Target>)> {
    let cfg = NetworkConfig::new(
        cell,
        setup.layers,
        setup.hidden,
        setup.hidden,
        setup.classes,
    )
    .with_residual(residual);
    let mut net = Network::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    // Non-zero biases and a live output bias so every tensor is exercised.
    for (_, name, data) in net.tensors_mut() {
        if name.starts_with('b') {
            data.iter_mut()
                .for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let seq = (0..setup.steps)
        .map(|_| {
            Vector::from_vec(
                (0..setup.hidden)
                    .map(|_| rng.sample(StandardNormal))
                    .collect(),
            )
        })
        .collect();
    let targets = (0..setup.steps)
        .map(|_| Some(rng.random_range(0..setup.classes)))
        .collect();
    Ok((net, seq, targets))
}

/// Compares analytic gradients against central differences on every scalar
/// parameter of `net`. The difference quotients are taken on the
/// double-double reference network, so their roundoff sits far below the
/// `O(eps²)` truncation term.
pub fn check_gradients(
    net: &Network,
    seq: &[Vector],
    targets: &[Target],
    eps: f64,
) -> Result<(f64, String, usize)> {
    let (_, grads) = bptt(net, seq, targets, LossKind::CrossEntropy)?;
    let analytic = grads.flat();
    let names: Vec<(Option<usize>, &'static str, usize)> = net
        .tensors()
        .iter()
        .map(|(l, t)| (*l, t.name, t.data.len()))
        .collect();

    let mut index = Vec::with_capacity(analytic.len());
    for (ti, &(_, _, len)) in names.iter().enumerate() {
        index.extend((0..len).map(|k| (ti, k)));
    }
    let base = RefNetwork::<DoubleDouble>::from_network(net);
    let errors = index
        .par_iter()
        .enumerate()
        .map(|(flat, &(ti, k))| {
            let mut probe = base.clone();
            let mut eval = |delta: f64| -> Vec<DoubleDouble> {
                *probe.param_mut(ti, k) =
                    DoubleDouble::new(net.tensors()[ti].1.data[k]) + DoubleDouble::new(delta);
                probe.frame_losses(seq, targets)
            };
            let (plus, minus) = (eval(eps), eval(-eps));
            let diff = plus
                .iter()
                .zip(&minus)
                .fold(DoubleDouble::new(0.0), |acc, (&p, &m)| acc + (p - m));
            let numeric = (diff / DoubleDouble::new(2.0 * eps)).to_f64();
            relative_error(analytic[flat], numeric)
        })
        .collect::<Vec<f64>>();

    let (worst, max_rel_err) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    let (ti, k) = index[worst];
    let (layer, name, _) = names[ti];
    let label = match layer {
        Some(l) => format!("layer{l}/{name}[{k}]"),
        None => format!("output/{name}[{k}]"),
    };
    Ok((max_rel_err, label, analytic.len()))
}

pub fn grad_check_with(
    cell: CellKind,
    residual: bool,
    seed: u64,
    eps: f64,
    tol: f64,
    setup: &GradCheckSetup,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let (net, seq, targets) = grad_check_fixture(cell, residual, seed, setup)?;
    let (max_rel_err, offending_param, params_checked) =
        check_gradients(&net, &seq, &targets, eps)?;
    Ok(GradCheckReport {
        cell,
        residual,
        seed,
        eps,
        tol,
        params_checked,
        max_rel_err,
        offending_param,
        passed: max_rel_err <= tol,
    })
}

/// Gradient check on the default small net (2 layers, H=5, T=7).
pub fn grad_check(
    cell: CellKind,
    residual: bool,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_with(cell, residual, seed, eps, tol, &GradCheckSetup::default())
}
