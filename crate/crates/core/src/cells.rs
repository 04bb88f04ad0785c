//! Single-step transition functions for the three gated cells and the
//! stacked, optionally residual, sequence forward pass.
//!
//! LSTM (peephole form, `g = h = tanh`):
//!
//! ```text
//! i_t = σ(W_ix x_t + W_im m_{t-1} + V_ic c_{t-1} + b_i)
//! f_t = σ(W_fx x_t + W_fm m_{t-1} + V_fc c_{t-1} + b_f)
//! c_t = f_t ⊙ c_{t-1} + i_t ⊙ g(W_cx x_t + W_cm m_{t-1} + b_c)
//! o_t = σ(W_ox x_t + W_om m_{t-1} + V_oc c_t + b_o)
//! m_t = o_t ⊙ h(c_t)
//! ```
//!
//! GRU (cell updated last, output read from the previous cell):
//!
//! ```text
//! i_t = σ(W_ix x_t + W_ic c_{t-1} + b_i)
//! f_t = 1 - i_t
//! o_t = σ(W_ox x_t + W_oc c_{t-1} + b_o)
//! m_t = o_t ⊙ c_{t-1}
//! c_t = f_t ⊙ c_{t-1} + i_t ⊙ g(W_cx x_t + W_cm m_t + b_c)
//! ```
//!
//! Lazy LSTM reorders the LSTM so that all gates and the output come from
//! `c_{t-1}` and the cell is written last:
//!
//! ```text
//! o_t = σ(W_ox x_t + W_om m_{t-1} + V_oc c_{t-1} + b_o)
//! m_t = o_t ⊙ h(c_{t-1})
//! c_t = f_t ⊙ c_{t-1} + i_t ⊙ g(W_cx x_t + W_cm m_t + b_c)
//! ```
//!
//! ([`LazyCandidate::Previous`] feeds `m_{t-1}` to the candidate instead.)

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrumentation::{StateRecorder, StateTrace, StepRecord};
use crate::numeric::{check_dims, hadamard, sigmoid, tanh, DiagMatrix, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Gru,
    LazyLstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::LazyLstm => "lazy_lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "lazy_lstm" | "lazy-lstm" => Ok(CellKind::LazyLstm),
            other => Err(Error::InvalidConfig(format!("unknown cell kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which unit output feeds the lazy LSTM candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LazyCandidate {
    /// `m_t`, computed from `c_{t-1}` in the same step (GRU ordering).
    #[default]
    Current,
    /// `m_{t-1}`, as in the plain LSTM.
    Previous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub cell_kind: CellKind,
    /// For LSTM-family nets: only the top layer uses the lazy update.
    #[serde(default)]
    pub lazy_last_layer_only: bool,
    #[serde(default)]
    pub lazy_candidate: LazyCandidate,
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub residual: bool,
}

impl NetworkConfig {
    pub fn new(
        cell_kind: CellKind,
        layers: usize,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
    ) -> Self {
        NetworkConfig {
            cell_kind,
            lazy_last_layer_only: false,
            lazy_candidate: LazyCandidate::Current,
            layers,
            input_dim,
            hidden_dim,
            output_dim,
            residual: false,
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig("layers must be positive".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        if self.lazy_last_layer_only && self.cell_kind == CellKind::Gru {
            return Err(Error::InvalidConfig(
                "lazy_last_layer_only applies to LSTM nets only".into(),
            ));
        }
        Ok(())
    }

    /// Cell used by layer `layer` (0-based).
    pub fn layer_kind(&self, layer: usize) -> CellKind {
        match self.cell_kind {
            CellKind::Gru => CellKind::Gru,
            _ if self.lazy_last_layer_only => {
                if layer + 1 == self.layers {
                    CellKind::LazyLstm
                } else {
                    CellKind::Lstm
                }
            }
            kind => kind,
        }
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    /// Whether an identity shortcut wraps `layer`. The first layer is only
    /// wrapped when its input already has the hidden width.
    pub fn has_shortcut(&self, layer: usize) -> bool {
        self.residual && self.layer_input_dim(layer) == self.hidden_dim
    }
}

/// Per-layer state carried across time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub c: Vector,
    pub m: Vector,
}

impl CellState {
    pub fn zeros(hidden: usize) -> Self {
        CellState {
            c: Vector::zeros(hidden),
            m: Vector::zeros(hidden),
        }
    }
}

/// Gate activations of one step. `g` is the candidate after its `tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    pub g: Vector,
}

/// A view over one named parameter tensor; vectors have `cols == 1`.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ix: Matrix,
    pub w_im: Matrix,
    pub w_fx: Matrix,
    pub w_fm: Matrix,
    pub w_cx: Matrix,
    pub w_cm: Matrix,
    pub w_ox: Matrix,
    pub w_om: Matrix,
    pub v_ic: DiagMatrix,
    pub v_fc: DiagMatrix,
    pub v_oc: DiagMatrix,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_c: Vector,
    pub b_o: Vector,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ix: Matrix::zeros(hidden, input),
            w_im: Matrix::zeros(hidden, hidden),
            w_fx: Matrix::zeros(hidden, input),
            w_fm: Matrix::zeros(hidden, hidden),
            w_cx: Matrix::zeros(hidden, input),
            w_cm: Matrix::zeros(hidden, hidden),
            w_ox: Matrix::zeros(hidden, input),
            w_om: Matrix::zeros(hidden, hidden),
            v_ic: DiagMatrix::zeros(hidden),
            v_fc: DiagMatrix::zeros(hidden),
            v_oc: DiagMatrix::zeros(hidden),
            b_i: Vector::zeros(hidden),
            b_f: Vector::zeros(hidden),
            b_c: Vector::zeros(hidden),
            b_o: Vector::zeros(hidden),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases except `b_f = 1`.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        for m in [&mut p.w_ix, &mut p.w_fx, &mut p.w_cx, &mut p.w_ox] {
            fill_uniform(m.as_mut_slice(), input, rng);
        }
        for m in [&mut p.w_im, &mut p.w_fm, &mut p.w_cm, &mut p.w_om] {
            fill_uniform(m.as_mut_slice(), hidden, rng);
        }
        for d in [&mut p.v_ic, &mut p.v_fc, &mut p.v_oc] {
            fill_uniform(d.as_mut_slice(), hidden, rng);
        }
        p.b_f = Vector::filled(hidden, 1.0);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_ix.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ix.rows()
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            mat_view("W_ix", &self.w_ix),
            mat_view("W_im", &self.w_im),
            mat_view("W_fx", &self.w_fx),
            mat_view("W_fm", &self.w_fm),
            mat_view("W_cx", &self.w_cx),
            mat_view("W_cm", &self.w_cm),
            mat_view("W_ox", &self.w_ox),
            mat_view("W_om", &self.w_om),
            vec_view("V_ic", self.v_ic.as_slice()),
            vec_view("V_fc", self.v_fc.as_slice()),
            vec_view("V_oc", self.v_oc.as_slice()),
            vec_view("b_i", self.b_i.as_slice()),
            vec_view("b_f", self.b_f.as_slice()),
            vec_view("b_c", self.b_c.as_slice()),
            vec_view("b_o", self.b_o.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("W_ix", self.w_ix.as_mut_slice()),
            ("W_im", self.w_im.as_mut_slice()),
            ("W_fx", self.w_fx.as_mut_slice()),
            ("W_fm", self.w_fm.as_mut_slice()),
            ("W_cx", self.w_cx.as_mut_slice()),
            ("W_cm", self.w_cm.as_mut_slice()),
            ("W_ox", self.w_ox.as_mut_slice()),
            ("W_om", self.w_om.as_mut_slice()),
            ("V_ic", self.v_ic.as_mut_slice()),
            ("V_fc", self.v_fc.as_mut_slice()),
            ("V_oc", self.v_oc.as_mut_slice()),
            ("b_i", self.b_i.as_mut_slice()),
            ("b_f", self.b_f.as_mut_slice()),
            ("b_c", self.b_c.as_mut_slice()),
            ("b_o", self.b_o.as_mut_slice()),
        ]
    }

    fn check_step(&self, prev: &CellState, x: &Vector) -> Result<()> {
        check_dims("lstm input", self.input_dim(), x.dim())?;
        check_dims("lstm cell", self.hidden_dim(), prev.c.dim())?;
        check_dims("lstm output", self.hidden_dim(), prev.m.dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_ix: Matrix,
    pub w_ic: Matrix,
    pub w_ox: Matrix,
    pub w_oc: Matrix,
    pub w_cx: Matrix,
    pub w_cm: Matrix,
    pub b_i: Vector,
    pub b_o: Vector,
    pub b_c: Vector,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_ix: Matrix::zeros(hidden, input),
            w_ic: Matrix::zeros(hidden, hidden),
            w_ox: Matrix::zeros(hidden, input),
            w_oc: Matrix::zeros(hidden, hidden),
            w_cx: Matrix::zeros(hidden, input),
            w_cm: Matrix::zeros(hidden, hidden),
            b_i: Vector::zeros(hidden),
            b_o: Vector::zeros(hidden),
            b_c: Vector::zeros(hidden),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        for m in [&mut p.w_ix, &mut p.w_ox, &mut p.w_cx] {
            fill_uniform(m.as_mut_slice(), input, rng);
        }
        for m in [&mut p.w_ic, &mut p.w_oc, &mut p.w_cm] {
            fill_uniform(m.as_mut_slice(), hidden, rng);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_ix.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ix.rows()
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            mat_view("W_ix", &self.w_ix),
            mat_view("W_ic", &self.w_ic),
            mat_view("W_ox", &self.w_ox),
            mat_view("W_oc", &self.w_oc),
            mat_view("W_cx", &self.w_cx),
            mat_view("W_cm", &self.w_cm),
            vec_view("b_i", self.b_i.as_slice()),
            vec_view("b_o", self.b_o.as_slice()),
            vec_view("b_c", self.b_c.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("W_ix", self.w_ix.as_mut_slice()),
            ("W_ic", self.w_ic.as_mut_slice()),
            ("W_ox", self.w_ox.as_mut_slice()),
            ("W_oc", self.w_oc.as_mut_slice()),
            ("W_cx", self.w_cx.as_mut_slice()),
            ("W_cm", self.w_cm.as_mut_slice()),
            ("b_i", self.b_i.as_mut_slice()),
            ("b_o", self.b_o.as_mut_slice()),
            ("b_c", self.b_c.as_mut_slice()),
        ]
    }

    fn check_step(&self, prev: &CellState, x: &Vector) -> Result<()> {
        check_dims("gru input", self.input_dim(), x.dim())?;
        check_dims("gru cell", self.hidden_dim(), prev.c.dim())?;
        check_dims("gru output", self.hidden_dim(), prev.m.dim())
    }
}

/// Parameters of one recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ParameterSet {
    Lstm(LstmParams),
    Gru(GruParams),
}

impl ParameterSet {
    pub fn zeros(kind: CellKind, input: usize, hidden: usize) -> Self {
        match kind {
            CellKind::Gru => ParameterSet::Gru(GruParams::zeros(input, hidden)),
            _ => ParameterSet::Lstm(LstmParams::zeros(input, hidden)),
        }
    }

    pub fn init(kind: CellKind, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        match kind {
            CellKind::Gru => ParameterSet::Gru(GruParams::init(input, hidden, rng)),
            _ => ParameterSet::Lstm(LstmParams::init(input, hidden, rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ParameterSet::Lstm(p) => p.input_dim(),
            ParameterSet::Gru(p) => p.input_dim(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            ParameterSet::Lstm(p) => p.hidden_dim(),
            ParameterSet::Gru(p) => p.hidden_dim(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        match self {
            ParameterSet::Lstm(p) => p.tensors(),
            ParameterSet::Gru(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            ParameterSet::Lstm(p) => p.tensors_mut(),
            ParameterSet::Gru(p) => p.tensors_mut(),
        }
    }

    /// One step of the cell `kind` with these parameters.
    pub fn step(
        &self,
        kind: CellKind,
        lazy: LazyCandidate,
        prev: &CellState,
        x: &Vector,
    ) -> Result<(CellState, GateRecord)> {
        match (kind, self) {
            (CellKind::Lstm, ParameterSet::Lstm(p)) => lstm_step(p, prev, x),
            (CellKind::LazyLstm, ParameterSet::Lstm(p)) => lazy_lstm_step_with(p, prev, x, lazy),
            (CellKind::Gru, ParameterSet::Gru(p)) => gru_step(p, prev, x),
            (kind, _) => Err(Error::InvalidConfig(format!(
                "{kind} layer given parameters of another cell kind"
            ))),
        }
    }
}

/// Linear map from the top layer's output to per-frame logits.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputProjection {
    pub weight: Matrix,
    pub bias: Vector,
}

impl OutputProjection {
    pub fn zeros(hidden: usize, output: usize) -> Self {
        OutputProjection {
            weight: Matrix::zeros(output, hidden),
            bias: Vector::zeros(output),
        }
    }

    pub fn apply(&self, y: &Vector) -> Result<Vector> {
        self.weight.matvec(y)?.add(&self.bias)
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            mat_view("W_out", &self.weight),
            vec_view("b_out", self.bias.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("W_out", self.weight.as_mut_slice()),
            ("b_out", self.bias.as_mut_slice()),
        ]
    }
}

/// A full stacked model: config, per-layer parameters and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<ParameterSet>,
    pub output: OutputProjection,
}

impl Network {
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| {
                ParameterSet::zeros(
                    config.layer_kind(l),
                    config.layer_input_dim(l),
                    config.hidden_dim,
                )
            })
            .collect();
        let output = OutputProjection::zeros(config.hidden_dim, config.output_dim);
        Ok(Network {
            config,
            layers,
            output,
        })
    }

    /// Seeded initialization of every layer and the output projection.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..config.layers)
            .map(|l| {
                ParameterSet::init(
                    config.layer_kind(l),
                    config.layer_input_dim(l),
                    config.hidden_dim,
                    &mut rng,
                )
            })
            .collect();
        let mut output = OutputProjection::zeros(config.hidden_dim, config.output_dim);
        fill_uniform(output.weight.as_mut_slice(), config.hidden_dim, &mut rng);
        Ok(Network {
            config,
            layers,
            output,
        })
    }

    /// Parameters and config agree on every shape.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.layers {
            return Err(Error::LengthMismatch {
                what: "parameter sets vs configured layers",
                left: self.layers.len(),
                right: cfg.layers,
            });
        }
        for (l, p) in self.layers.iter().enumerate() {
            let expected =
                ParameterSet::zeros(cfg.layer_kind(l), cfg.layer_input_dim(l), cfg.hidden_dim);
            let (got, want) = (p.tensors(), expected.tensors());
            if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| a.name != b.name) {
                return Err(Error::InvalidConfig(format!(
                    "layer {l}: parameters do not match a {} cell",
                    cfg.layer_kind(l)
                )));
            }
            for (a, b) in got.iter().zip(&want) {
                check_dims(a.name, b.rows * b.cols, a.rows * a.cols)?;
                check_dims(a.name, b.rows, a.rows)?;
            }
        }
        check_dims(
            "output projection rows",
            cfg.output_dim,
            self.output.weight.rows(),
        )?;
        check_dims(
            "output projection cols",
            cfg.hidden_dim,
            self.output.weight.cols(),
        )?;
        check_dims("output bias", cfg.output_dim, self.output.bias.dim())
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

    /// A network of the same shape with every parameter zero; used as a
    /// gradient buffer.
    pub fn zeros_like(&self) -> Network {
        let mut z = self.clone();
        for (_, _, s) in z.tensors_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }
}

fn mat_view<'a>(name: &'static str, m: &'a Matrix) -> TensorView<'a> {
    TensorView {
        name,
        rows: m.rows(),
        cols: m.cols(),
        data: m.as_slice(),
    }
}

fn vec_view<'a>(name: &'static str, v: &'a [f64]) -> TensorView<'a> {
    TensorView {
        name,
        rows: v.len(),
        cols: 1,
        data: v,
    }
}

fn fill_uniform(data: &mut [f64], fan_in: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in data {
        *v = rng.random_range(-bound..=bound);
    }
}

fn affine3(a: &Matrix, x: &Vector, b: &Matrix, y: &Vector, bias: &Vector) -> Result<Vector> {
    a.matvec(x)?.add(&b.matvec(y)?)?.add(bias)
}

pub fn lstm_step(p: &LstmParams, prev: &CellState, x: &Vector) -> Result<(CellState, GateRecord)> {
    p.check_step(prev, x)?;
    let (c_prev, m_prev) = (&prev.c, &prev.m);
    let i = sigmoid(&affine3(&p.w_ix, x, &p.w_im, m_prev, &p.b_i)?.add(&p.v_ic.apply(c_prev)?)?);
    let f = sigmoid(&affine3(&p.w_fx, x, &p.w_fm, m_prev, &p.b_f)?.add(&p.v_fc.apply(c_prev)?)?);
    let g = tanh(&affine3(&p.w_cx, x, &p.w_cm, m_prev, &p.b_c)?);
    let c = hadamard(&f, c_prev)?.add(&hadamard(&i, &g)?)?;
    let o = sigmoid(&affine3(&p.w_ox, x, &p.w_om, m_prev, &p.b_o)?.add(&p.v_oc.apply(&c)?)?);
    let m = hadamard(&o, &tanh(&c))?;
    Ok((CellState { c, m }, GateRecord { i, f, o, g }))
}

pub fn gru_step(p: &GruParams, prev: &CellState, x: &Vector) -> Result<(CellState, GateRecord)> {
    p.check_step(prev, x)?;
    let c_prev = &prev.c;
    let i = sigmoid(&affine3(&p.w_ix, x, &p.w_ic, c_prev, &p.b_i)?);
    let f = i.map(|v| 1.0 - v);
    let o = sigmoid(&affine3(&p.w_ox, x, &p.w_oc, c_prev, &p.b_o)?);
    let m = hadamard(&o, c_prev)?;
    let g = tanh(&affine3(&p.w_cx, x, &p.w_cm, &m, &p.b_c)?);
    let c = hadamard(&f, c_prev)?.add(&hadamard(&i, &g)?)?;
    Ok((CellState { c, m }, GateRecord { i, f, o, g }))
}

pub fn lazy_lstm_step(
    p: &LstmParams,
    prev: &CellState,
    x: &Vector,
) -> Result<(CellState, GateRecord)> {
    lazy_lstm_step_with(p, prev, x, LazyCandidate::Current)
}

pub fn lazy_lstm_step_with(
    p: &LstmParams,
    prev: &CellState,
    x: &Vector,
    candidate: LazyCandidate,
) -> Result<(CellState, GateRecord)> {
    p.check_step(prev, x)?;
    let (c_prev, m_prev) = (&prev.c, &prev.m);
    let i = sigmoid(&affine3(&p.w_ix, x, &p.w_im, m_prev, &p.b_i)?.add(&p.v_ic.apply(c_prev)?)?);
    let f = sigmoid(&affine3(&p.w_fx, x, &p.w_fm, m_prev, &p.b_f)?.add(&p.v_fc.apply(c_prev)?)?);
    let o = sigmoid(&affine3(&p.w_ox, x, &p.w_om, m_prev, &p.b_o)?.add(&p.v_oc.apply(c_prev)?)?);
    let m = hadamard(&o, &tanh(c_prev))?;
    let cand_in = match candidate {
        LazyCandidate::Current => &m,
        LazyCandidate::Previous => m_prev,
    };
    let g = tanh(&affine3(&p.w_cx, x, &p.w_cm, cand_in, &p.b_c)?);
    let c = hadamard(&f, c_prev)?.add(&hadamard(&i, &g)?)?;
    Ok((CellState { c, m }, GateRecord { i, f, o, g }))
}

/// Identity shortcut: the layer output becomes `layer_in + layer_out`.
pub fn residual_combine(layer_in: &Vector, layer_out: &Vector) -> Result<Vector> {
    check_dims("residual_combine", layer_in.dim(), layer_out.dim())?;
    layer_in.add(layer_out)
}

/// Everything a forward pass produced, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct ForwardRun {
    /// `inputs[l][t]`: the input fed to layer `l` at step `t`.
    pub inputs: Vec<Vec<Vector>>,
    /// Top layer output (after its shortcut, if any) per frame.
    pub top: Vec<Vector>,
    pub logits: Vec<Vector>,
    pub traces: Vec<StateTrace>,
}

pub(crate) fn forward_run(
    net: &Network,
    seq: &[Vector],
    mut recorder: Option<&mut StateRecorder>,
) -> Result<ForwardRun> {
    let cfg = &net.config;
    if seq.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    if net.layers.len() != cfg.layers {
        return Err(Error::LengthMismatch {
            what: "parameter sets vs configured layers",
            left: net.layers.len(),
            right: cfg.layers,
        });
    }
    let mut inputs = Vec::with_capacity(cfg.layers);
    let mut traces = Vec::with_capacity(cfg.layers);
    let mut current: Vec<Vector> = seq.to_vec();
    for (l, params) in net.layers.iter().enumerate() {
        let kind = cfg.layer_kind(l);
        let shortcut = cfg.has_shortcut(l);
        let mut state = CellState::zeros(cfg.hidden_dim);
        let mut outputs = Vec::with_capacity(seq.len());
        let mut steps = Vec::with_capacity(seq.len());
        for (t, x) in current.iter().enumerate() {
            let (next, gates) = params.step(kind, cfg.lazy_candidate, &state, x)?;
            if let Some(rec) = recorder.as_deref_mut() {
                rec.record(l, t, &next, &gates)?;
            }
            let y = if shortcut {
                residual_combine(x, &next.m)?
            } else {
                next.m.clone()
            };
            outputs.push(y);
            steps.push(StepRecord {
                t,
                c: next.c.clone(),
                m: next.m.clone(),
                gates,
            });
            state = next;
        }
        traces.push(StateTrace {
            seq: recorder.as_deref().map_or(0, |r| r.seq()),
            layer: l,
            units: None,
            steps,
        });
        inputs.push(std::mem::replace(&mut current, outputs));
    }
    let logits = current
        .iter()
        .map(|y| net.output.apply(y))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardRun {
        inputs,
        top: current,
        logits,
        traces,
    })
}

/// Result of [`stack_forward`]: per-frame logits and a full-capture trace
/// per layer.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<Vector>,
    pub traces: Vec<StateTrace>,
}

/// Runs every layer left to right over time from zero initial states.
/// When a recorder is attached it sees every `(layer, t, state, gates)`.
pub fn stack_forward(
    net: &Network,
    seq: &[Vector],
    recorder: Option<&mut StateRecorder>,
) -> Result<ForwardOutput> {
    let run = forward_run(net, seq, recorder)?;
    Ok(ForwardOutput {
        logits: run.logits,
        traces: run.traces,
    })
}
