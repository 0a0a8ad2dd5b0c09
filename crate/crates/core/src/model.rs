//! The LFADS inference network and the standalone generator.
//!
//! Data flow for one trial (all affine maps have biases):
//!
//! ```text
//! [x_t, a_t] ──► ic encoder ──► E ──► μ, σ of Q(g₀) ──► ĝ₀ ──► f₀ = W_fac(ĝ₀)
//!            │                   └──► c₀
//!            └─► ci encoder ──► Ẽ_t ──► controller(c_{t-1}, [Ẽ_t, f_{t-1}]) ──► Q(u_t) ──► û_t
//! generator(g_{t-1}, û_t) ──► g_t ──► f_t = W_fac(g_t) ──► r_t = exp(W_rate(f_t))
//! ```
//!
//! Rates are expected spike counts per time bin.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::cells::{dropout, gru_step, run_bidirectional_states, AffineMap, BiEncoder, GruCell, Mode};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{standard_normal, Rng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Lower bound applied to every posterior standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlSchedule {
    pub start_step: u64,
    pub ramp_steps: u64,
}

impl Default for KlSchedule {
    fn default() -> Self {
        Self {
            start_step: 0,
            ramp_steps: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LfadsConfig {
    /// Number of recorded neurons `D`.
    pub data_dim: usize,
    /// Dimension of the non-modelled observed covariates `a_t` (0 = none).
    pub observed_dim: usize,
    /// Time bins per trial `T`.
    pub steps: usize,
    pub factors_dim: usize,
    pub generator_dim: usize,
    /// Hidden size of each direction of the initial-condition encoder.
    pub encoder_dim: usize,
    /// Hidden size of each direction of the inferred-input encoder.
    pub input_encoder_dim: usize,
    pub controller_dim: usize,
    /// 0 disables the controller and the inferred-input encoder.
    pub inferred_input_dim: usize,
    /// Variance of the zero-mean Gaussian priors on `g₀` and `u_t`.
    pub prior_variance: f64,
    pub dropout_rate: f64,
    pub l2_gen_weight: f64,
    pub kl: KlSchedule,
    /// Hidden-state clip for every GRU.
    pub state_clip: f64,
    /// Posterior samples for latent-recovery summaries.
    pub posterior_samples: usize,
    /// Posterior samples for inferred-input summaries.
    pub input_posterior_samples: usize,
}

impl Default for LfadsConfig {
    fn default() -> Self {
        Self {
            data_dim: 30,
            observed_dim: 0,
            steps: 100,
            factors_dim: 3,
            generator_dim: 64,
            encoder_dim: 64,
            input_encoder_dim: 64,
            controller_dim: 64,
            inferred_input_dim: 0,
            prior_variance: 0.1,
            dropout_rate: 0.05,
            l2_gen_weight: 1e-3,
            kl: KlSchedule::default(),
            state_clip: 5.0,
            posterior_samples: 128,
            input_posterior_samples: 512,
        }
    }
}

impl LfadsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data_dim", self.data_dim),
            ("steps", self.steps),
            ("factors_dim", self.factors_dim),
            ("generator_dim", self.generator_dim),
            ("encoder_dim", self.encoder_dim),
            ("posterior_samples", self.posterior_samples),
            ("input_posterior_samples", self.input_posterior_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.inferred_input_dim > 0 && (self.input_encoder_dim == 0 || self.controller_dim == 0) {
            return Err(Error::InvalidConfig(String::from(
                "input_encoder_dim and controller_dim must be >= 1 when inferred inputs are enabled",
            )));
        }
        if self.factors_dim > self.generator_dim {
            return Err(Error::InvalidConfig(format!(
                "factors_dim ({}) must not exceed generator_dim ({})",
                self.factors_dim, self.generator_dim
            )));
        }
        if !(self.prior_variance >= 0.0) {
            return Err(Error::InvalidConfig(String::from("prior_variance must be >= 0")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(String::from("dropout_rate must lie in [0, 1)")));
        }
        if !(self.state_clip > 0.0) {
            return Err(Error::InvalidConfig(String::from("state_clip must be > 0")));
        }
        if !(self.l2_gen_weight >= 0.0) {
            return Err(Error::InvalidConfig(String::from("l2_gen_weight must be >= 0")));
        }
        if self.kl.ramp_steps == 0 {
            return Err(Error::InvalidConfig(String::from("kl.ramp_steps must be >= 1")));
        }
        Ok(())
    }

    pub fn encoder_input_dim(&self) -> usize {
        self.data_dim + self.observed_dim
    }

    pub fn has_inputs(&self) -> bool {
        self.inferred_input_dim > 0
    }
}

/// Encoder, controller and posterior maps for the inferred inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPath<T = Tensor> {
    pub encoder: BiEncoder<T>,
    pub controller: GruCell<T>,
    /// `c₀ = W(E)`.
    pub controller_init: AffineMap<T>,
    pub u_mean: AffineMap<T>,
    pub u_logvar: AffineMap<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = Tensor> {
    pub ic_encoder: BiEncoder<T>,
    pub g0_mean: AffineMap<T>,
    pub g0_logvar: AffineMap<T>,
    pub generator: GruCell<T>,
    /// Row-normalised factor readout.
    pub factors: AffineMap<T>,
    pub rates: AffineMap<T>,
    pub inputs: Option<InputPath<T>>,
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &LfadsConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let enc_in = cfg.encoder_input_dim();
        let e_dim = 2 * cfg.encoder_dim;
        let ic_encoder = BiEncoder::init(enc_in, cfg.encoder_dim, rng);
        let g0_mean = AffineMap::init(e_dim, cfg.generator_dim, rng);
        let g0_logvar = AffineMap::init(e_dim, cfg.generator_dim, rng);
        let generator = GruCell::init(cfg.inferred_input_dim, cfg.generator_dim, rng);
        let mut factors = AffineMap::init(cfg.generator_dim, cfg.factors_dim, rng);
        factors.normalize_rows();
        let rates = AffineMap::init(cfg.factors_dim, cfg.data_dim, rng);
        let inputs = if cfg.has_inputs() {
            let con_in = 2 * cfg.input_encoder_dim + cfg.factors_dim;
            Some(InputPath {
                encoder: BiEncoder::init(enc_in, cfg.input_encoder_dim, rng),
                controller: GruCell::init(con_in, cfg.controller_dim, rng),
                controller_init: AffineMap::init(e_dim, cfg.controller_dim, rng),
                u_mean: AffineMap::init(cfg.controller_dim, cfg.inferred_input_dim, rng),
                u_logvar: AffineMap::init(cfg.controller_dim, cfg.inferred_input_dim, rng),
            })
        } else {
            None
        };
        Ok(Self {
            ic_encoder,
            g0_mean,
            g0_logvar,
            generator,
            factors,
            rates,
            inputs,
        })
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> ModelParams<NodeId> {
        self.map(&mut |t| tape.variable(t.clone()))
    }

    /// Places every parameter on `tape` as a constant (forward-only use).
    pub fn to_tape_const(&self, tape: &mut Tape) -> ModelParams<NodeId> {
        self.map(&mut |t| tape.constant(t.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Re-imposes unit L2 norm on each row of the factor readout matrix.
    pub fn normalize_factor_rows(&mut self) {
        self.factors.normalize_rows();
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        let mut src = Vec::new();
        other.visit(&mut |_, t| src.push(t));
        let mut i = 0;
        self.visit_mut(&mut |t| {
            t.axpy(alpha, src[i]);
            i += 1;
        });
    }

    pub fn scale(&mut self, alpha: f64) {
        self.visit_mut(&mut |t| t.scale(alpha));
    }

    pub fn sum_squares(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.sum_squares());
        s
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }

    /// All parameters concatenated in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::ShapeMismatch {
                op: "load_flat",
                lhs: alloc::vec![n],
                rhs: alloc::vec![flat.len()],
            });
        }
        let mut off = 0;
        self.visit_mut(&mut |t| {
            let k = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + k]);
            off += k;
        });
        Ok(())
    }

    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            ic_encoder: self.ic_encoder.map(f),
            g0_mean: self.g0_mean.map(f),
            g0_logvar: self.g0_logvar.map(f),
            generator: self.generator.map(f),
            factors: self.factors.map(f),
            rates: self.rates.map(f),
            inputs: self.inputs.as_ref().map(|p| InputPath {
                encoder: p.encoder.map(f),
                controller: p.controller.map(f),
                controller_init: p.controller_init.map(f),
                u_mean: p.u_mean.map(f),
                u_logvar: p.u_logvar.map(f),
            }),
        }
    }

    /// Visits every leaf with its dotted name, in a fixed canonical order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.ic_encoder.visit("ic_encoder", f);
        self.g0_mean.visit("g0_mean", f);
        self.g0_logvar.visit("g0_logvar", f);
        self.generator.visit("generator", f);
        self.factors.visit("factors", f);
        self.rates.visit("rates", f);
        if let Some(p) = &self.inputs {
            p.encoder.visit("inputs.encoder", f);
            p.controller.visit("inputs.controller", f);
            p.controller_init.visit("inputs.controller_init", f);
            p.u_mean.visit("inputs.u_mean", f);
            p.u_logvar.visit("inputs.u_logvar", f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.ic_encoder.visit_mut(f);
        self.g0_mean.visit_mut(f);
        self.g0_logvar.visit_mut(f);
        self.generator.visit_mut(f);
        self.factors.visit_mut(f);
        self.rates.visit_mut(f);
        if let Some(p) = &mut self.inputs {
            p.encoder.visit_mut(f);
            p.controller.visit_mut(f);
            p.controller_init.visit_mut(f);
            p.u_mean.visit_mut(f);
            p.u_logvar.visit_mut(f);
        }
    }
}

/// Diagonal Gaussian given by mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::ShapeMismatch {
                op: "diag_gaussian",
                lhs: alloc::vec![mean.len()],
                rhs: alloc::vec![std.len()],
            });
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(String::from(
                "standard deviations must be positive",
            )));
        }
        Ok(Self { mean, std })
    }

    /// Zero-mean isotropic prior with the given variance.
    pub fn prior(dim: usize, variance: f64) -> Self {
        Self {
            mean: alloc::vec![0.0; dim],
            std: alloc::vec![math::sqrt(variance); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// How latent variables are drawn from their posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// `z = μ + σ ⊙ ε`, `ε ~ N(0, I)`.
    Reparameterized,
    /// `z = μ` (σ treated as zero).
    Mean,
}

/// One trial's inputs: spike counts `T×D` and optional covariates `T×A`.
#[derive(Debug, Clone, Copy)]
pub struct TrialData<'a> {
    pub counts: &'a Tensor,
    pub observed: Option<&'a Tensor>,
}

impl<'a> TrialData<'a> {
    pub fn new(counts: &'a Tensor) -> Self {
        Self {
            counts,
            observed: None,
        }
    }
}

/// Tape handles produced by the encoders.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub steps: usize,
    pub g0_mean: NodeId,
    pub g0_logvar: NodeId,
    pub g0_std: NodeId,
    pub controller_init: Option<NodeId>,
    pub input_encoding: Vec<NodeId>,
}

/// Tape handles of one posterior rollout.
#[derive(Debug, Clone)]
pub struct TapeRollout {
    pub encoded: Encoded,
    pub g0: NodeId,
    pub f0: NodeId,
    pub u_mean: Vec<NodeId>,
    pub u_std: Vec<NodeId>,
    pub u: Vec<NodeId>,
    pub generator: Vec<NodeId>,
    pub factors: Vec<NodeId>,
    pub log_rates: Vec<NodeId>,
    pub rates: Vec<NodeId>,
}

fn check_trial(cfg: &LfadsConfig, trial: &TrialData<'_>) -> Result<()> {
    let c = trial.counts.shape();
    if c.len() != 2 || c[1] != cfg.data_dim || c[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "trial counts",
            lhs: c.to_vec(),
            rhs: alloc::vec![cfg.steps, cfg.data_dim],
        });
    }
    match (trial.observed, cfg.observed_dim) {
        (None, 0) => Ok(()),
        (Some(a), d) if a.shape().len() == 2 && a.shape()[0] == c[0] && a.shape()[1] == d => Ok(()),
        (a, d) => Err(Error::ShapeMismatch {
            op: "trial observed",
            lhs: a.map(|a| a.shape().to_vec()).unwrap_or_default(),
            rhs: alloc::vec![c[0], d],
        }),
    }
}

fn std_from_logvar(tape: &mut Tape, logvar: NodeId) -> Result<NodeId> {
    let half = tape.scale(logvar, 0.5)?;
    let s = tape.exp(half)?;
    tape.clamp(s, SIGMA_FLOOR, f64::INFINITY)
}

fn reparameterize(
    tape: &mut Tape,
    mean: NodeId,
    std: NodeId,
    rng: &mut Rng,
    sampling: Sampling,
) -> Result<NodeId> {
    match sampling {
        Sampling::Mean => Ok(mean),
        Sampling::Reparameterized => {
            let n = tape.value(mean).len();
            let eps: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
            let e = tape.constant(Tensor::vector(eps));
            let se = tape.mul(std, e)?;
            tape.add(mean, se)
        }
    }
}

/// Runs both encoders: `Q(g₀)` parameters, `c₀` and `Ẽ_{1:T}`.
///
/// In train mode dropout hits the encoder inputs and `E`.
pub fn encode(
    tape: &mut Tape,
    cfg: &LfadsConfig,
    p: &ModelParams<NodeId>,
    trial: &TrialData<'_>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Encoded> {
    check_trial(cfg, trial)?;
    let steps = trial.counts.rows();
    let mut seq = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut v = trial.counts.row(t).to_vec();
        if let Some(a) = trial.observed {
            v.extend_from_slice(a.row(t));
        }
        let x = tape.constant(Tensor::vector(v));
        seq.push(dropout(tape, x, cfg.dropout_rate, mode, rng)?);
    }
    let states = run_bidirectional_states(tape, &p.ic_encoder, &seq, cfg.state_clip)?;
    let e = states.summary(tape)?;
    let e = dropout(tape, e, cfg.dropout_rate, mode, rng)?;
    let g0_mean = p.g0_mean.forward(tape, e)?;
    let g0_logvar = p.g0_logvar.forward(tape, e)?;
    let g0_std = std_from_logvar(tape, g0_logvar)?;

    let (controller_init, input_encoding) = match &p.inputs {
        Some(ip) => {
            let c0 = ip.controller_init.forward(tape, e)?;
            let st = run_bidirectional_states(tape, &ip.encoder, &seq, cfg.state_clip)?;
            let steps = (0..steps)
                .map(|t| st.step(tape, t))
                .collect::<Result<Vec<_>>>()?;
            (Some(c0), steps)
        }
        None => (None, Vec::new()),
    };
    Ok(Encoded {
        steps,
        g0_mean,
        g0_logvar,
        g0_std,
        controller_init,
        input_encoding,
    })
}

/// Runs controller and generator forward from an encoding.
///
/// Dropout (train mode) hits the controller input `[Ẽ_t, f_{t-1}]` and the
/// generator input `û_t`.
pub fn decode(
    tape: &mut Tape,
    cfg: &LfadsConfig,
    p: &ModelParams<NodeId>,
    encoded: Encoded,
    rng: &mut Rng,
    mode: Mode,
    sampling: Sampling,
) -> Result<TapeRollout> {
    let g0 = reparameterize(tape, encoded.g0_mean, encoded.g0_std, rng, sampling)
        .map_err(|e| e.at_step(0))?;
    let f0 = p.factors.forward(tape, g0).map_err(|e| e.at_step(0))?;
    let steps = encoded.steps;
    let mut out = TapeRollout {
        encoded,
        g0,
        f0,
        u_mean: Vec::new(),
        u_std: Vec::new(),
        u: Vec::new(),
        generator: Vec::with_capacity(steps),
        factors: Vec::with_capacity(steps),
        log_rates: Vec::with_capacity(steps),
        rates: Vec::with_capacity(steps),
    };
    let mut g = g0;
    let mut f = f0;
    let mut c = out.encoded.controller_init;
    for t in 0..steps {
        let mut step = |tape: &mut Tape, out: &mut TapeRollout, rng: &mut Rng| -> Result<(NodeId, NodeId, Option<NodeId>)> {
            let gen_in = match &p.inputs {
                Some(ip) => {
                    let cin = tape.concat(&[out.encoded.input_encoding[t], f])?;
                    let cin = dropout(tape, cin, cfg.dropout_rate, mode, rng)?;
                    let c_new = gru_step(tape, &ip.controller, c.expect("controller state"), cin, cfg.state_clip)?;
                    let mu = ip.u_mean.forward(tape, c_new)?;
                    let lv = ip.u_logvar.forward(tape, c_new)?;
                    let sd = std_from_logvar(tape, lv)?;
                    let u = reparameterize(tape, mu, sd, rng, sampling)?;
                    out.u_mean.push(mu);
                    out.u_std.push(sd);
                    out.u.push(u);
                    c = Some(c_new);
                    dropout(tape, u, cfg.dropout_rate, mode, rng)?
                }
                None => tape.constant(Tensor::zeros(&[0])),
            };
            let g_new = gru_step(tape, &p.generator, g, gen_in, cfg.state_clip)?;
            let f_new = p.factors.forward(tape, g_new)?;
            let lr = p.rates.forward(tape, f_new)?;
            let r = tape.exp(lr)?;
            out.log_rates.push(lr);
            out.rates.push(r);
            Ok((g_new, f_new, c))
        };
        let (g_new, f_new, _) = step(tape, &mut out, rng).map_err(|e| e.at_step(t + 1))?;
        out.generator.push(g_new);
        out.factors.push(f_new);
        g = g_new;
        f = f_new;
    }
    Ok(out)
}

/// Full posterior rollout on a tape: encoders, then controller/generator.
pub fn rollout_on_tape(
    tape: &mut Tape,
    cfg: &LfadsConfig,
    p: &ModelParams<NodeId>,
    trial: &TrialData<'_>,
    rng: &mut Rng,
    mode: Mode,
    sampling: Sampling,
) -> Result<TapeRollout> {
    let enc = encode(tape, cfg, p, trial, rng, mode)?;
    decode(tape, cfg, p, enc, rng, mode, sampling)
}

/// Values of one posterior rollout, rows indexed by time bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRollout {
    pub g0_posterior: DiagGaussian,
    pub g0: Vec<f64>,
    pub f0: Vec<f64>,
    pub u_posterior: Vec<DiagGaussian>,
    pub u: Vec<Vec<f64>>,
    pub generator: Vec<Vec<f64>>,
    pub factors: Vec<Vec<f64>>,
    pub rates: Vec<Vec<f64>>,
}

impl PosteriorRollout {
    fn from_tape(tape: &Tape, r: &TapeRollout) -> Self {
        let v = |id: &NodeId| tape.value(*id).data().to_vec();
        Self {
            g0_posterior: DiagGaussian {
                mean: v(&r.encoded.g0_mean),
                std: v(&r.encoded.g0_std),
            },
            g0: v(&r.g0),
            f0: v(&r.f0),
            u_posterior: r
                .u_mean
                .iter()
                .zip(&r.u_std)
                .map(|(m, s)| DiagGaussian {
                    mean: v(m),
                    std: v(s),
                })
                .collect(),
            u: r.u.iter().map(v).collect(),
            generator: r.generator.iter().map(v).collect(),
            factors: r.factors.iter().map(v).collect(),
            rates: r.rates.iter().map(v).collect(),
        }
    }
}

/// One posterior rollout with values extracted (no gradients).
pub fn rollout_posterior(
    cfg: &LfadsConfig,
    params: &ModelParams,
    trial: &TrialData<'_>,
    rng: &mut Rng,
    mode: Mode,
    sampling: Sampling,
) -> Result<PosteriorRollout> {
    let mut tape = Tape::new();
    let p = params.to_tape_const(&mut tape);
    let r = rollout_on_tape(&mut tape, cfg, &p, trial, rng, mode, sampling)?;
    Ok(PosteriorRollout::from_tape(&tape, &r))
}

/// Encoder-side results only: `Q(g₀)` and `c₀`.
pub fn encode_initial(
    cfg: &LfadsConfig,
    params: &ModelParams,
    trial: &TrialData<'_>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<(DiagGaussian, Option<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let p = params.to_tape_const(&mut tape);
    let e = encode(&mut tape, cfg, &p, trial, rng, mode)?;
    let v = |id: NodeId| tape.value(id).data().to_vec();
    Ok((
        DiagGaussian {
            mean: v(e.g0_mean),
            std: v(e.g0_std),
        },
        e.controller_init.map(v),
        e.input_encoding.iter().map(|&id| v(id)).collect(),
    ))
}

/// Samples from the generative model: `ĝ₀ ~ P(g₀)`, `û_t ~ P(u_t)`, Poisson spikes.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTrial {
    pub generator: Vec<Vec<f64>>,
    pub factors: Vec<Vec<f64>>,
    pub rates: Vec<Vec<f64>>,
    pub spikes: Vec<Vec<u32>>,
}

pub fn generate_unconditioned(
    cfg: &LfadsConfig,
    params: &ModelParams,
    rng: &mut Rng,
    steps: usize,
) -> Result<GeneratedTrial> {
    let prior_std = math::sqrt(cfg.prior_variance);
    let mut tape = Tape::new();
    let p = params.to_tape_const(&mut tape);
    let g0: Vec<f64> = (0..cfg.generator_dim)
        .map(|_| prior_std * standard_normal(rng))
        .collect();
    let mut g = tape.constant(Tensor::vector(g0));
    let mut out = GeneratedTrial {
        generator: Vec::with_capacity(steps),
        factors: Vec::with_capacity(steps),
        rates: Vec::with_capacity(steps),
        spikes: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let u: Vec<f64> = (0..cfg.inferred_input_dim)
            .map(|_| prior_std * standard_normal(rng))
            .collect();
        let u = tape.constant(Tensor::vector(u));
        let run = |tape: &mut Tape| -> Result<(NodeId, NodeId, NodeId)> {
            let g_new = gru_step(tape, &p.generator, g, u, cfg.state_clip)?;
            let f = p.factors.forward(tape, g_new)?;
            let lr = p.rates.forward(tape, f)?;
            let r = tape.exp(lr)?;
            Ok((g_new, f, r))
        };
        let (g_new, f, r) = run(&mut tape).map_err(|e| e.at_step(t + 1))?;
        let rates = tape.value(r).data().to_vec();
        out.spikes.push(sample_poisson_counts(&rates, rng)?);
        out.generator.push(tape.value(g_new).data().to_vec());
        out.factors.push(tape.value(f).data().to_vec());
        out.rates.push(rates);
        g = g_new;
    }
    Ok(out)
}

/// Independent Poisson counts, one per rate. A zero rate yields zero.
pub fn sample_poisson_counts(rates: &[f64], rng: &mut Rng) -> Result<Vec<u32>> {
    rates
        .iter()
        .map(|&r| {
            if r < 0.0 || !r.is_finite() {
                Err(Error::InvalidArgument(format!("invalid Poisson rate {r}")))
            } else if r == 0.0 {
                Ok(0)
            } else {
                let d = Poisson::new(r).map_err(|_| Error::InvalidArgument(format!("invalid Poisson rate {r}")))?;
                Ok(d.sample(rng) as u32)
            }
        })
        .collect()
}

/// Posterior means over `n_samples` eval-mode rollouts (dropout off,
/// sampling on).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    /// `T×D`, expected counts per bin.
    pub rates: Tensor,
    /// `T×F`.
    pub factors: Tensor,
    /// `T×U` (zero columns when the model has no inferred inputs).
    pub inputs: Tensor,
    pub n_samples: usize,
}

pub fn posterior_summary(
    cfg: &LfadsConfig,
    params: &ModelParams,
    trial: &TrialData<'_>,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<PosteriorSummary> {
    posterior_summary_with(cfg, params, trial, n_samples, rng, Sampling::Reparameterized)
}

pub fn posterior_summary_with(
    cfg: &LfadsConfig,
    params: &ModelParams,
    trial: &TrialData<'_>,
    n_samples: usize,
    rng: &mut Rng,
    sampling: Sampling,
) -> Result<PosteriorSummary> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(String::from("n_samples must be >= 1")));
    }
    let mut tape = Tape::new();
    let p = params.to_tape_const(&mut tape);
    let enc = encode(&mut tape, cfg, &p, trial, rng, Mode::Eval)?;
    let mark = tape.len();
    let steps = trial.counts.rows();
    let mut rates = Tensor::zeros(&[steps, cfg.data_dim]);
    let mut factors = Tensor::zeros(&[steps, cfg.factors_dim]);
    let mut inputs = Tensor::zeros(&[steps, cfg.inferred_input_dim]);
    for _ in 0..n_samples {
        let r = decode(&mut tape, cfg, &p, enc.clone(), rng, Mode::Eval, sampling)?;
        for t in 0..steps {
            add_row(&mut rates, t, tape.value(r.rates[t]).data());
            add_row(&mut factors, t, tape.value(r.factors[t]).data());
            if let Some(u) = r.u.get(t) {
                add_row(&mut inputs, t, tape.value(*u).data());
            }
        }
        tape.truncate(mark);
    }
    let inv = 1.0 / n_samples as f64;
    rates.scale(inv);
    factors.scale(inv);
    inputs.scale(inv);
    Ok(PosteriorSummary {
        rates,
        factors,
        inputs,
        n_samples,
    })
}

fn add_row(t: &mut Tensor, r: usize, v: &[f64]) {
    for (d, s) in t.row_mut(r).iter_mut().zip(v) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    pub(crate) fn tiny_config(inputs: usize) -> LfadsConfig {
        LfadsConfig {
            data_dim: 2,
            steps: 3,
            factors_dim: 2,
            generator_dim: 3,
            encoder_dim: 3,
            input_encoder_dim: 2,
            controller_dim: 3,
            inferred_input_dim: inputs,
            ..LfadsConfig::default()
        }
    }

    fn counts(rows: &[[f64; 2]]) -> Tensor {
        Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config(1).validate().is_ok());
        let mut c = tiny_config(0);
        c.factors_dim = 4;
        assert!(c.validate().is_err());
        let mut c = tiny_config(0);
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(0);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_encoder_weights_collapse_to_biases() {
        let cfg = tiny_config(0);
        let mut p = ModelParams::init(&cfg, &mut stream(1, &[])).unwrap();
        p.ic_encoder.visit_mut(&mut |t| t.scale(0.0));
        p.g0_mean.weight.scale(0.0);
        p.g0_logvar.weight.scale(0.0);
        p.g0_mean.bias = Tensor::vector(vec![0.1, -0.2, 0.3]);
        p.g0_logvar.bias = Tensor::vector(vec![0.0, -1.0, 2.0]);
        let x = counts(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]);
        let (q, c0, _) = encode_initial(&cfg, &p, &TrialData::new(&x), &mut stream(0, &[]), Mode::Eval).unwrap();
        assert_eq!(q.mean, vec![0.1, -0.2, 0.3]);
        for (s, lv) in q.std.iter().zip([0.0f64, -1.0, 2.0]) {
            assert!((s - (0.5 * lv).exp()).abs() < 1e-15);
        }
        assert!(c0.is_none());
    }

    #[test]
    fn identical_trials_encode_identically() {
        let cfg = tiny_config(1);
        let p = ModelParams::init(&cfg, &mut stream(2, &[])).unwrap();
        let x = counts(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]);
        let y = x.clone();
        let a = encode_initial(&cfg, &p, &TrialData::new(&x), &mut stream(5, &[]), Mode::Eval).unwrap();
        let b = encode_initial(&cfg, &p, &TrialData::new(&y), &mut stream(6, &[]), Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rates_positive_and_shapes() {
        let cfg = tiny_config(1);
        let p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        let x = counts(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]);
        let r = rollout_posterior(&cfg, &p, &TrialData::new(&x), &mut stream(4, &[]), Mode::Train, Sampling::Reparameterized).unwrap();
        assert_eq!(r.rates.len(), 3);
        assert_eq!(r.factors.len(), 3);
        assert_eq!(r.u.len(), 3);
        assert!(r.rates.iter().flatten().all(|&v| v > 0.0));
        assert_eq!(r.u_posterior.len(), 3);
    }

    #[test]
    fn mean_sampling_is_deterministic() {
        let cfg = tiny_config(1);
        let p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        let x = counts(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]);
        let a = rollout_posterior(&cfg, &p, &TrialData::new(&x), &mut stream(1, &[]), Mode::Eval, Sampling::Mean).unwrap();
        let b = rollout_posterior(&cfg, &p, &TrialData::new(&x), &mut stream(2, &[]), Mode::Eval, Sampling::Mean).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_inputs_means_no_controller_on_tape() {
        let cfg = tiny_config(0);
        let p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        assert!(p.inputs.is_none());
        let x = counts(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]);
        let r = rollout_posterior(&cfg, &p, &TrialData::new(&x), &mut stream(1, &[]), Mode::Train, Sampling::Reparameterized).unwrap();
        assert!(r.u.is_empty());
        assert!(r.u_posterior.is_empty());
    }

    #[test]
    fn rejects_wrong_trial_shape() {
        let cfg = tiny_config(0);
        let p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        let x = Tensor::zeros(&[3, 5]);
        assert!(matches!(
            rollout_posterior(&cfg, &p, &TrialData::new(&x), &mut stream(1, &[]), Mode::Eval, Sampling::Mean),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn divergence_names_the_step() {
        let cfg = tiny_config(0);
        let mut p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        // huge rate bias overflows exp at the first generator step
        p.rates.bias = Tensor::vector(vec![1000.0, 0.0]);
        let x = counts(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]);
        match rollout_posterior(&cfg, &p, &TrialData::new(&x), &mut stream(1, &[]), Mode::Eval, Sampling::Mean) {
            Err(Error::Divergence { step, op }) => {
                assert_eq!(step, 1);
                assert_eq!(op, "exp");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn factor_rows_unit_norm_at_init() {
        let cfg = LfadsConfig::default();
        let p = ModelParams::init(&cfg, &mut stream(9, &[])).unwrap();
        for r in 0..cfg.factors_dim {
            let n: f64 = p.factors.weight.row(r).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn generate_with_zero_prior_variance_is_deterministic() {
        let mut cfg = tiny_config(1);
        cfg.prior_variance = 0.0;
        let p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        let a = generate_unconditioned(&cfg, &p, &mut stream(1, &[]), 4).unwrap();
        let b = generate_unconditioned(&cfg, &p, &mut stream(2, &[]), 4).unwrap();
        assert_eq!(a.rates, b.rates);
        assert_eq!(a.factors, b.factors);
        // from g₀ = 0 with zero biases and zero input the generator stays at 0
        assert!(a.generator.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn generate_single_step_shapes() {
        let cfg = tiny_config(0);
        let p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        let g = generate_unconditioned(&cfg, &p, &mut stream(1, &[]), 1).unwrap();
        assert_eq!(g.factors.len(), 1);
        assert_eq!(g.factors[0].len(), cfg.factors_dim);
        assert_eq!(g.spikes.len(), 1);
        assert_eq!(g.spikes[0].len(), cfg.data_dim);
    }

    #[test]
    fn summary_of_one_sample_equals_the_rollout() {
        let cfg = tiny_config(1);
        let p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        let x = counts(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]);
        let s = posterior_summary(&cfg, &p, &TrialData::new(&x), 1, &mut stream(8, &[])).unwrap();
        let r = rollout_posterior(&cfg, &p, &TrialData::new(&x), &mut stream(8, &[]), Mode::Eval, Sampling::Reparameterized).unwrap();
        let flat: Vec<f64> = r.rates.iter().flatten().copied().collect();
        assert_eq!(s.rates.data(), &flat[..]);
        let flat_u: Vec<f64> = r.u.iter().flatten().copied().collect();
        assert_eq!(s.inputs.data(), &flat_u[..]);
    }

    #[test]
    fn collapsed_posterior_summary_independent_of_sample_count() {
        let cfg = tiny_config(1);
        let p = ModelParams::init(&cfg, &mut stream(3, &[])).unwrap();
        let x = counts(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]);
        let trial = TrialData::new(&x);
        let a = posterior_summary_with(&cfg, &p, &trial, 1, &mut stream(1, &[]), Sampling::Mean).unwrap();
        let b = posterior_summary_with(&cfg, &p, &trial, 7, &mut stream(2, &[]), Sampling::Mean).unwrap();
        for (x, y) in a.rates.data().iter().zip(b.rates.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
