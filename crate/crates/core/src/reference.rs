//! Scalar-loop transcription of the cell equations and the stacked network,
//! generic over the arithmetic type.
//!
//! This path shares no code with [`crate::cells`]: every pre-activation is
//! accumulated element by element from the named weights. With `f64` it is
//! the one-step oracle for the vectorized cells; with [`DoubleDouble`] it
//! evaluates losses for central differences with roundoff far below the
//! truncation error of the difference quotient.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::cells::{CellKind, LazyCandidate, Network, NetworkConfig};
use crate::numeric::Vector;

pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn sigmoid(self) -> Self {
        if self.to_f64() >= 0.0 {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    fn tanh(self) -> Self {
        let neg = self.to_f64() < 0.0;
        let a = if neg { -self } else { self };
        let t = (a * Self::from_f64(-2.0)).exp();
        let r = (Self::one() - t) / (Self::one() + t);
        if neg {
            -r
        } else {
            r
        }
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn ln(self) -> Self {
        f64::ln(self)
    }

    fn sigmoid(self) -> Self {
        crate::numeric::sigmoid_scalar(self)
    }

    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`: about 106 bits of
/// significand.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub fn new(v: f64) -> Self {
        DoubleDouble { hi: v, lo: 0.0 }
    }

    fn from_parts((hi, lo): (f64, f64)) -> Self {
        DoubleDouble { hi, lo }
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        DoubleDouble {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;

    fn add(self, y: Self) -> Self {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::from_parts(quick_two_sum(s, e + f))
    }
}

impl Neg for DoubleDouble {
    type Output = Self;

    fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;

    fn sub(self, y: Self) -> Self {
        self + (-y)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;

    fn mul(self, y: Self) -> Self {
        let (p, e) = two_prod(self.hi, y.hi);
        let e = e + (self.hi * y.lo + self.lo * y.hi);
        Self::from_parts(quick_two_sum(p, e))
    }
}

impl Div for DoubleDouble {
    type Output = Self;

    fn div(self, y: Self) -> Self {
        let q1 = self.hi / y.hi;
        let r = self - y * DoubleDouble::new(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * DoubleDouble::new(q2);
        let q3 = r.hi / y.hi;
        Self::from_parts(quick_two_sum(q1, q2)) + DoubleDouble::new(q3)
    }
}

impl Real for DoubleDouble {
    fn from_f64(v: f64) -> Self {
        DoubleDouble::new(v)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return DoubleDouble::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return DoubleDouble::new(0.0);
        }
        // x = k ln2 + r, then exp(r) = (exp(r / 1024))^1024.
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * DoubleDouble::new(k)).ldexp(-10);
        let mut term = DoubleDouble::new(1.0);
        let mut sum = DoubleDouble::new(1.0);
        for n in 1..=12 {
            term = term * r / DoubleDouble::new(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    fn ln(self) -> Self {
        let mut y = DoubleDouble::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - DoubleDouble::new(1.0);
        }
        y
    }
}

/// One named tensor, row-major; vectors and diagonals have one column.
#[derive(Debug, Clone)]
pub struct RefTensor<T> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> RefTensor<T> {
    fn at(&self, j: usize, k: usize) -> T {
        self.data[j * self.cols + k]
    }
}

/// A layer's parameters, addressed by name.
#[derive(Debug, Clone)]
pub struct RefParams<T> {
    pub tensors: Vec<RefTensor<T>>,
}

impl<T: Real> RefParams<T> {
    fn get(&self, name: &str) -> &RefTensor<T> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn hidden(&self) -> usize {
        self.get("W_ix").rows
    }

    /// `W_ax x + W_ah h + b_a`, accumulated entry by entry.
    fn pre(&self, j: usize, wx: &str, x: &[T], wh: &str, h: &[T], b: &str) -> T {
        let (wx, wh) = (self.get(wx), self.get(wh));
        let mut acc = self.get(b).data[j];
        for (k, &xk) in x.iter().enumerate() {
            acc = acc + wx.at(j, k) * xk;
        }
        for (k, &hk) in h.iter().enumerate() {
            acc = acc + wh.at(j, k) * hk;
        }
        acc
    }

    fn peep(&self, name: &str, j: usize, c: T) -> T {
        self.get(name).data[j] * c
    }
}

/// State and gates after one reference step.
#[derive(Debug, Clone)]
pub struct RefStep<T> {
    pub c: Vec<T>,
    pub m: Vec<T>,
    pub i: Vec<T>,
    pub f: Vec<T>,
    pub o: Vec<T>,
    pub g: Vec<T>,
}

pub fn lstm_step<T: Real>(p: &RefParams<T>, c_prev: &[T], m_prev: &[T], x: &[T]) -> RefStep<T> {
    let h = p.hidden();
    let mut s = RefStep::<T>::with_len(h);
    for j in 0..h {
        s.i[j] =
            (p.pre(j, "W_ix", x, "W_im", m_prev, "b_i") + p.peep("V_ic", j, c_prev[j])).sigmoid();
        s.f[j] =
            (p.pre(j, "W_fx", x, "W_fm", m_prev, "b_f") + p.peep("V_fc", j, c_prev[j])).sigmoid();
        s.g[j] = p.pre(j, "W_cx", x, "W_cm", m_prev, "b_c").tanh();
        s.c[j] = s.f[j] * c_prev[j] + s.i[j] * s.g[j];
        s.o[j] = (p.pre(j, "W_ox", x, "W_om", m_prev, "b_o") + p.peep("V_oc", j, s.c[j])).sigmoid();
        s.m[j] = s.o[j] * s.c[j].tanh();
    }
    s
}

pub fn gru_step<T: Real>(p: &RefParams<T>, c_prev: &[T], x: &[T]) -> RefStep<T> {
    let h = p.hidden();
    let mut s = RefStep::<T>::with_len(h);
    for j in 0..h {
        s.i[j] = p.pre(j, "W_ix", x, "W_ic", c_prev, "b_i").sigmoid();
        s.f[j] = T::one() - s.i[j];
        s.o[j] = p.pre(j, "W_ox", x, "W_oc", c_prev, "b_o").sigmoid();
        s.m[j] = s.o[j] * c_prev[j];
    }
    // The candidate reads every entry of m_t, so it needs a second pass.
    for j in 0..h {
        s.g[j] = p.pre(j, "W_cx", x, "W_cm", &s.m, "b_c").tanh();
        s.c[j] = s.f[j] * c_prev[j] + s.i[j] * s.g[j];
    }
    s
}

pub fn lazy_lstm_step<T: Real>(
    p: &RefParams<T>,
    c_prev: &[T],
    m_prev: &[T],
    x: &[T],
    candidate: LazyCandidate,
) -> RefStep<T> {
    let h = p.hidden();
    let mut s = RefStep::<T>::with_len(h);
    for j in 0..h {
        s.i[j] =
            (p.pre(j, "W_ix", x, "W_im", m_prev, "b_i") + p.peep("V_ic", j, c_prev[j])).sigmoid();
        s.f[j] =
            (p.pre(j, "W_fx", x, "W_fm", m_prev, "b_f") + p.peep("V_fc", j, c_prev[j])).sigmoid();
        s.o[j] =
            (p.pre(j, "W_ox", x, "W_om", m_prev, "b_o") + p.peep("V_oc", j, c_prev[j])).sigmoid();
        s.m[j] = s.o[j] * c_prev[j].tanh();
    }
    for j in 0..h {
        let cand_in = match candidate {
            LazyCandidate::Current => &s.m,
            LazyCandidate::Previous => m_prev,
        };
        s.g[j] = p.pre(j, "W_cx", x, "W_cm", cand_in, "b_c").tanh();
        s.c[j] = s.f[j] * c_prev[j] + s.i[j] * s.g[j];
    }
    s
}

impl<T: Real> RefStep<T> {
    fn with_len(h: usize) -> Self {
        let z = vec![T::zero(); h];
        RefStep {
            c: z.clone(),
            m: z.clone(),
            i: z.clone(),
            f: z.clone(),
            o: z.clone(),
            g: z,
        }
    }
}

/// A whole stacked network in the reference representation.
#[derive(Debug, Clone)]
pub struct RefNetwork<T> {
    pub config: NetworkConfig,
    pub layers: Vec<RefParams<T>>,
    pub output: RefParams<T>,
}

impl<T: Real> RefNetwork<T> {
    pub fn from_network(net: &Network) -> Self {
        let convert = |views: Vec<crate::cells::TensorView<'_>>| RefParams {
            tensors: views
                .into_iter()
                .map(|v| RefTensor {
                    name: v.name,
                    rows: v.rows,
                    cols: v.cols,
                    data: v.data.iter().map(|&x| T::from_f64(x)).collect(),
                })
                .collect(),
        };
        RefNetwork {
            config: net.config.clone(),
            layers: net.layers.iter().map(|p| convert(p.tensors())).collect(),
            output: convert(net.output.tensors()),
        }
    }

    /// Mutable access to scalar `k` of the `index`-th tensor, counting layer
    /// tensors first and the output projection last (the order of
    /// [`Network::tensors`]).
    pub fn param_mut(&mut self, index: usize, k: usize) -> &mut T {
        let mut index = index;
        for layer in self
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
        {
            if index < layer.tensors.len() {
                return &mut layer.tensors[index].data[k];
            }
            index -= layer.tensors.len();
        }
        panic!("tensor index out of range")
    }

    /// Per-frame logits from zero initial states.
    pub fn logits(&self, seq: &[Vector]) -> Vec<Vec<T>> {
        let cfg = &self.config;
        let mut current: Vec<Vec<T>> = seq
            .iter()
            .map(|x| x.iter().map(|&v| T::from_f64(v)).collect())
            .collect();
        for (l, p) in self.layers.iter().enumerate() {
            let h = cfg.hidden_dim;
            let (mut c, mut m) = (vec![T::zero(); h], vec![T::zero(); h]);
            let mut next = Vec::with_capacity(current.len());
            for x in &current {
                let s = match cfg.layer_kind(l) {
                    CellKind::Lstm => lstm_step(p, &c, &m, x),
                    CellKind::Gru => gru_step(p, &c, x),
                    CellKind::LazyLstm => lazy_lstm_step(p, &c, &m, x, cfg.lazy_candidate),
                };
                let y = if cfg.has_shortcut(l) {
                    x.iter().zip(&s.m).map(|(&a, &b)| a + b).collect()
                } else {
                    s.m.clone()
                };
                next.push(y);
                c = s.c;
                m = s.m;
            }
            current = next;
        }
        let w = self.output.get("W_out");
        let b = self.output.get("b_out");
        current
            .iter()
            .map(|y| {
                (0..w.rows)
                    .map(|r| {
                        let mut acc = b.data[r];
                        for (k, &yk) in y.iter().enumerate() {
                            acc = acc + w.at(r, k) * yk;
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    /// Softmax cross-entropy of every frame; unlabeled frames give zero.
    pub fn frame_losses(&self, seq: &[Vector], targets: &[Option<usize>]) -> Vec<T> {
        self.logits(seq)
            .iter()
            .zip(targets)
            .map(|(z, y)| match y {
                None => T::zero(),
                Some(y) => {
                    let max = z
                        .iter()
                        .copied()
                        .fold(z[0], |a, b| if b > a { b } else { a });
                    let mut s = T::zero();
                    for &v in z {
                        s = s + (v - max).exp();
                    }
                    max + s.ln() - z[*y]
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Dd = DoubleDouble;

    fn close(a: Dd, b: f64, tol: f64) -> bool {
        (a.to_f64() - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn double_double_arithmetic() {
        let third = Dd::new(1.0) / Dd::new(3.0);
        let back = third * Dd::new(3.0) - Dd::new(1.0);
        assert!(back.to_f64().abs() < 1e-31);
        // 0.1 + 0.2 - 0.3 in f64 leaves 5.55e-17; in double-double the
        // residual is the exact representation error of the three literals.
        let r = Dd::new(0.1) + Dd::new(0.2) - Dd::new(0.3);
        assert!((r.to_f64() - 2.7755575615628914e-17).abs() < 1e-32);
    }

    #[test]
    fn double_double_transcendentals() {
        for x in [-30.0, -2.5, -1e-3, 0.0, 0.7, 1.0, 12.0] {
            assert!(close(Dd::new(x).exp(), x.exp(), 1e-15), "exp {x}");
            assert!(close(Dd::new(x).tanh(), x.tanh(), 1e-15), "tanh {x}");
            assert!(close(
                Dd::new(x).sigmoid(),
                crate::numeric::sigmoid_scalar(x),
                1e-15
            ));
        }
        for x in [1e-5, 0.3, 1.0, 7.5, 1e8] {
            assert!(close(Dd::new(x).ln(), x.ln(), 1e-15), "ln {x}");
        }
        // e - fl(e), from a 50-digit reference.
        let e = Dd::new(1.0).exp();
        assert_eq!(e.hi, std::f64::consts::E);
        // Ten squarings leave roughly 1e-29 relative error.
        assert!(
            (e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-28,
            "{:e}",
            e.lo
        );
        assert!((Dd::new(1.0).exp().ln() - Dd::new(1.0)).to_f64().abs() < 1e-28);
    }
}
