//! GRU cells, affine maps, the bidirectional encoder and dropout.
//!
//! Parameter containers are generic over their leaf type: `Tensor` for the
//! stored weights, `NodeId` once the weights have been placed on a tape, so a
//! forward pass reads like the equations and gradients come back in the same
//! shape as the parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, Rng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// `v = W u + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap<T = Tensor> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: T,
    pub bias: T,
}

impl AffineMap<Tensor> {
    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / crate::math::sqrt(in_dim.max(1) as f64);
        Self {
            in_dim,
            out_dim,
            weight: Tensor::matrix(out_dim, in_dim, normal_vec(rng, out_dim * in_dim, std))
                .expect("affine init"),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Plain evaluation without a tape.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|i| crate::tensor::dot(self.weight.row(i), x) + self.bias.data()[i])
            .collect()
    }

    /// Scales every row of the weight matrix to unit L2 norm. Rows already
    /// within a few ulps of unit norm are left bit-for-bit unchanged.
    pub fn normalize_rows(&mut self) {
        for r in 0..self.out_dim {
            let row = self.weight.row_mut(r);
            let norm = crate::math::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm > 0.0 && (norm - 1.0).abs() > 4.0 * f64::EPSILON {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }
}

impl<T> AffineMap<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AffineMap<U> {
        AffineMap {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl AffineMap<NodeId> {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.affine(self.weight, x, self.bias)
    }
}

/// Gated recurrent unit. Each gate's affine map acts on the concatenation
/// `[input, hidden]`: the first `input_size` weight columns multiply the
/// input, the remaining `hidden_size` columns the previous state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell<T = Tensor> {
    pub input_size: usize,
    pub hidden_size: usize,
    pub reset: AffineMap<T>,
    pub update: AffineMap<T>,
    pub candidate: AffineMap<T>,
}

impl GruCell<Tensor> {
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut Rng) -> Self {
        let fan_in = input_size + hidden_size;
        Self {
            input_size,
            hidden_size,
            reset: AffineMap::init(fan_in, hidden_size, rng),
            update: AffineMap::init(fan_in, hidden_size, rng),
            candidate: AffineMap::init(fan_in, hidden_size, rng),
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let fan_in = input_size + hidden_size;
        Self {
            input_size,
            hidden_size,
            reset: AffineMap::zeros(fan_in, hidden_size),
            update: AffineMap::zeros(fan_in, hidden_size),
            candidate: AffineMap::zeros(fan_in, hidden_size),
        }
    }

    /// Squared Frobenius norm of the weight columns acting on the previous
    /// hidden state, summed over the three gates.
    pub fn recurrent_sum_squares(&self) -> f64 {
        [&self.reset, &self.update, &self.candidate]
            .iter()
            .map(|a| {
                (0..self.hidden_size)
                    .map(|r| {
                        a.weight.row(r)[self.input_size..]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .sum()
    }
}

impl<T> GruCell<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GruCell<U> {
        GruCell {
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            reset: self.reset.map(f),
            update: self.update.map(f),
            candidate: self.candidate.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.reset.visit(&format!("{prefix}.reset"), f);
        self.update.visit(&format!("{prefix}.update"), f);
        self.candidate.visit(&format!("{prefix}.candidate"), f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.reset.visit_mut(f);
        self.update.visit_mut(f);
        self.candidate.visit_mut(f);
    }
}

/// One GRU update followed by hidden-state clipping to `[-clip, clip]`:
///
/// ```text
/// r = σ(W_r [x, h])      u = σ(W_u [x, h])
/// c = tanh(W_c [x, r ⊙ h])
/// h' = u ⊙ h + (1 − u) ⊙ c
/// ```
pub fn gru_step(
    tape: &mut Tape,
    cell: &GruCell<NodeId>,
    h_prev: NodeId,
    x: NodeId,
    clip: f64,
) -> Result<NodeId> {
    let h_len = tape.value(h_prev).len();
    let x_len = tape.value(x).len();
    if h_len != cell.hidden_size || x_len != cell.input_size {
        return Err(Error::ShapeMismatch {
            op: "gru_step",
            lhs: alloc::vec![cell.input_size, cell.hidden_size],
            rhs: alloc::vec![x_len, h_len],
        });
    }
    let xh = tape.concat(&[x, h_prev])?;
    let r_pre = cell.reset.forward(tape, xh)?;
    let r = tape.sigmoid(r_pre)?;
    let u_pre = cell.update.forward(tape, xh)?;
    let u = tape.sigmoid(u_pre)?;
    let rh = tape.mul(r, h_prev)?;
    let xrh = tape.concat(&[x, rh])?;
    let c_pre = cell.candidate.forward(tape, xrh)?;
    let c = tape.tanh(c_pre)?;
    // h' = c + u ⊙ (h − c)
    let diff = tape.sub(h_prev, c)?;
    let gated = tape.mul(u, diff)?;
    let h = tape.add(c, gated)?;
    tape.clamp(h, -clip, clip)
}

/// Forward and backward GRUs with learnable initial states `e^f_0` and
/// `e^b_{T+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiEncoder<T = Tensor> {
    pub forward: GruCell<T>,
    pub backward: GruCell<T>,
    pub init_forward: T,
    pub init_backward: T,
}

impl BiEncoder<Tensor> {
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut Rng) -> Self {
        Self {
            forward: GruCell::init(input_size, hidden_size, rng),
            backward: GruCell::init(input_size, hidden_size, rng),
            init_forward: Tensor::zeros(&[hidden_size]),
            init_backward: Tensor::zeros(&[hidden_size]),
        }
    }
}

impl<T> BiEncoder<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BiEncoder<U> {
        BiEncoder {
            forward: self.forward.map(f),
            backward: self.backward.map(f),
            init_forward: f(&self.init_forward),
            init_backward: f(&self.init_backward),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.forward.visit(&format!("{prefix}.forward"), f);
        self.backward.visit(&format!("{prefix}.backward"), f);
        f(format!("{prefix}.init_forward"), &self.init_forward);
        f(format!("{prefix}.init_backward"), &self.init_backward);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.forward.visit_mut(f);
        self.backward.visit_mut(f);
        f(&mut self.init_forward);
        f(&mut self.init_backward);
    }
}

/// Hidden states of both directions, index `t` holding the state after
/// consuming input `t` (forward: inputs `0..=t`; backward: inputs `t..T`).
#[derive(Debug, Clone)]
pub struct BiStates {
    pub forward: Vec<NodeId>,
    pub backward: Vec<NodeId>,
}

impl BiStates {
    /// `E = [e^b_1, e^f_T]`.
    pub fn summary(&self, tape: &mut Tape) -> Result<NodeId> {
        let last = self.forward.len() - 1;
        tape.concat(&[self.backward[0], self.forward[last]])
    }

    /// `Ẽ_t = [e^b_t, e^f_t]`.
    pub fn step(&self, tape: &mut Tape, t: usize) -> Result<NodeId> {
        tape.concat(&[self.backward[t], self.forward[t]])
    }
}

pub fn run_bidirectional_states(
    tape: &mut Tape,
    enc: &BiEncoder<NodeId>,
    seq: &[NodeId],
    clip: f64,
) -> Result<BiStates> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = seq.len();
    let mut forward = Vec::with_capacity(n);
    let mut h = enc.init_forward;
    for &x in seq {
        h = gru_step(tape, &enc.forward, h, x, clip)?;
        forward.push(h);
    }
    let mut backward = alloc::vec![h; n];
    let mut h = enc.init_backward;
    for t in (0..n).rev() {
        h = gru_step(tape, &enc.backward, h, seq[t], clip)?;
        backward[t] = h;
    }
    Ok(BiStates { forward, backward })
}

/// Runs both directions and returns `(E, [Ẽ_1, …, Ẽ_T])`.
pub fn run_bidirectional(
    tape: &mut Tape,
    enc: &BiEncoder<NodeId>,
    seq: &[NodeId],
    clip: f64,
) -> Result<(NodeId, Vec<NodeId>)> {
    let states = run_bidirectional_states(tape, enc, seq, clip)?;
    let e = states.summary(tape)?;
    let steps = (0..seq.len())
        .map(|t| states.step(tape, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((e, steps))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Inverted-dropout mask: zero with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_rate(rate)?;
    let keep = 1.0 - rate;
    Ok((0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect())
}

/// Dropout on a tape node. Identity in eval mode or at rate zero (no random
/// numbers are consumed in that case).
pub fn dropout(tape: &mut Tape, x: NodeId, rate: f64, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), rate, rng)?;
    let shape = tape.value(x).shape().to_vec();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}
