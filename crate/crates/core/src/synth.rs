//! Synthetic spike-train benchmarks.
//!
//! Two ground-truth systems drive Poisson spiking:
//! * a Lorenz attractor read out through a random log-linear map, and
//! * a chaotic continuous-time "data RNN", optionally kicked by one input
//!   pulse per trial.
//!
//! Ground truth (rates, latents) is stored once per truth row. Without
//! pulses a row is a condition, shared by its trials, which differ only in
//! their spikes. With pulses every trial starts from its condition's state
//! but receives its own pulse, so each trial is its own row.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::sample_poisson_counts;
use crate::rng::{normal_vec, standard_normal, stream, Rng};
use crate::tensor::Tensor;

/// Largest state magnitude tolerated before a simulation is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

// stream tags
const TAG_WEIGHTS: u64 = 1;
const TAG_CONDITION: u64 = 2;
const TAG_SPIKES: u64 = 3;
const TAG_PULSE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub n_neurons: usize,
    /// Firing rate (spikes/s) when every standardised latent is zero.
    pub baseline_rate: f64,
    /// Euler steps per output sample.
    pub speedup: usize,
    /// Euler steps discarded before a condition starts.
    pub burn_in: usize,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.006,
            n_neurons: 30,
            baseline_rate: 5.0,
            speedup: 4,
            burn_in: 500,
        }
    }
}

impl LorenzParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma > 0.0
            && self.rho > 0.0
            && self.beta > 0.0
            && self.dt > 0.0
            && self.baseline_rate > 0.0
            && self.n_neurons > 0
            && self.speedup > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(String::from("Lorenz parameters must be positive")))
        }
    }

    fn derivative(&self, y: [f64; 3]) -> [f64; 3] {
        [
            self.sigma * (y[1] - y[0]),
            y[0] * (self.rho - y[2]) - y[1],
            y[0] * y[1] - self.beta * y[2],
        ]
    }
}

/// Euler-integrates the Lorenz system; returns `steps + 1` states starting
/// with `y0`.
pub fn simulate_lorenz(params: &LorenzParams, y0: [f64; 3], steps: usize) -> Result<Vec<[f64; 3]>> {
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(String::from("Lorenz start state must be finite")));
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = y0;
    out.push(y);
    for step in 1..=steps {
        let d = params.derivative(y);
        for i in 0..3 {
            y[i] += params.dt * d[i];
        }
        if y.iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
            return Err(Error::Divergence { step, op: "lorenz" });
        }
        out.push(y);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRnnParams {
    pub n: usize,
    pub gamma: f64,
    pub tau: f64,
    pub dt: f64,
    /// Whether `B` is drawn from N(0, 1) (otherwise zero).
    pub input: bool,
    pub pulse_magnitude: f64,
    pub pulse_window: (f64, f64),
    /// Rates span `[0, max_rate]` spikes/s.
    pub max_rate: f64,
}

impl Default for DataRnnParams {
    fn default() -> Self {
        Self {
            n: 50,
            gamma: 2.5,
            tau: 0.025,
            dt: 0.001,
            input: false,
            pulse_magnitude: 50.0,
            pulse_window: (0.25, 0.75),
            max_rate: 30.0,
        }
    }
}

/// Sampled connectivity of a data RNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRnn {
    pub params: DataRnnParams,
    /// `n×n`, row-major, entries N(0, 1/n).
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DataRnn {
    pub fn sample(params: DataRnnParams, rng: &mut Rng) -> Result<Self> {
        if params.n == 0 || !(params.tau > 0.0) || !(params.dt > 0.0) || !(params.max_rate >= 0.0) {
            return Err(Error::InvalidConfig(String::from("invalid data RNN parameters")));
        }
        let n = params.n;
        let w = normal_vec(rng, n * n, math::sqrt(1.0 / n as f64));
        let b = if params.input {
            normal_vec(rng, n, 1.0)
        } else {
            vec![0.0; n]
        };
        Ok(Self { params, w, b })
    }

    /// Maps states to rates: tanh scaled linearly from [−1, 1] onto [0, max_rate].
    pub fn rate(&self, y: f64) -> f64 {
        0.5 * self.params.max_rate * (math::tanh(y) + 1.0)
    }
}

/// States and rates of a data-RNN run; row `k` is time `k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnTrajectory {
    /// `(steps + 1)×n`.
    pub states: Vec<f64>,
    /// `(steps + 1)×n`, spikes/s.
    pub rates: Vec<f64>,
}

/// Euler-integrates `τ ẏ = −y + γ W tanh(y) + B q(t)`. A pulse at
/// `pulse_time` adds `(dt/τ)·magnitude·B` during the step containing it.
pub fn simulate_data_rnn(
    rnn: &DataRnn,
    y0: &[f64],
    steps: usize,
    pulse_time: Option<f64>,
) -> Result<RnnTrajectory> {
    let p = &rnn.params;
    let n = p.n;
    if y0.len() != n {
        return Err(Error::ShapeMismatch {
            op: "simulate_data_rnn",
            lhs: vec![n],
            rhs: vec![y0.len()],
        });
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(String::from("RNN start state must be finite")));
    }
    let pulse_step = match pulse_time {
        Some(tp) => {
            let (lo, hi) = p.pulse_window;
            if !(tp >= lo && tp <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "pulse time {tp} outside [{lo}, {hi}]"
                )));
            }
            Some(math::floor(tp / p.dt) as usize)
        }
        None => None,
    };
    let a = p.dt / p.tau;
    let mut y = y0.to_vec();
    let mut th: Vec<f64> = y.iter().map(|&v| math::tanh(v)).collect();
    let mut states = Vec::with_capacity((steps + 1) * n);
    let mut rates = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(&y);
    rates.extend(y.iter().map(|&v| rnn.rate(v)));
    for step in 0..steps {
        let kick = if pulse_step == Some(step) { a * p.pulse_magnitude } else { 0.0 };
        for i in 0..n {
            let row = &rnn.w[i * n..(i + 1) * n];
            let rec: f64 = row.iter().zip(&th).map(|(w, t)| w * t).sum();
            y[i] += a * (-y[i] + p.gamma * rec) + kick * rnn.b[i];
        }
        if y.iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
            return Err(Error::Divergence {
                step: step + 1,
                op: "data_rnn",
            });
        }
        for i in 0..n {
            th[i] = math::tanh(y[i]);
        }
        states.extend_from_slice(&y);
        rates.extend(y.iter().map(|&v| rnn.rate(v)));
    }
    Ok(RnnTrajectory { states, rates })
}

fn bin_factor(bin_width: f64, dt: f64) -> Result<usize> {
    if !(bin_width > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidArgument(String::from("bin width and dt must be positive")));
    }
    let k = math::round(bin_width / dt);
    if k < 1.0 || (k * dt - bin_width).abs() > 1e-9 * bin_width {
        return Err(Error::InvalidArgument(format!(
            "bin width {bin_width} is not a multiple of dt {dt}"
        )));
    }
    Ok(k as usize)
}

/// Averages fine-resolution rates (`T_fine×d`) within bins of `bin_width`.
pub fn bin_rates(rates: &[f64], d: usize, dt: f64, bin_width: f64) -> Result<Vec<f64>> {
    let k = bin_factor(bin_width, dt)?;
    if d == 0 || !rates.len().is_multiple_of(d * k) {
        return Err(Error::InvalidArgument(format!(
            "{} fine rate values do not tile into bins of {k} steps × {d} neurons",
            rates.len()
        )));
    }
    if let Some(r) = rates.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::InvalidArgument(format!("negative or non-finite rate {r}")));
    }
    let bins = rates.len() / (d * k);
    let mut out = vec![0.0; bins * d];
    for b in 0..bins {
        let dst = &mut out[b * d..(b + 1) * d];
        for s in 0..k {
            let src = &rates[(b * k + s) * d..(b * k + s + 1) * d];
            for (o, r) in dst.iter_mut().zip(src) {
                *o += r;
            }
        }
        for o in dst.iter_mut() {
            *o /= k as f64;
        }
    }
    Ok(out)
}

/// Poisson spike counts per bin from fine-resolution rates in spikes/s.
pub fn rates_to_spikes(rates: &[f64], d: usize, dt: f64, bin_width: f64, rng: &mut Rng) -> Result<Vec<u32>> {
    let binned = bin_rates(rates, d, dt, bin_width)?;
    let expected: Vec<f64> = binned.iter().map(|r| r * bin_width).collect();
    sample_poisson_counts(&expected, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Lorenz,
    Rnn,
    RnnPulsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Lorenz(LorenzParams),
    DataRnn(DataRnnParams),
}

/// Everything needed to regenerate a dataset from its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub system: System,
    pub conditions: usize,
    pub trials_per_condition: usize,
    /// Trials per condition assigned to the training split (the rest validate).
    pub train_per_condition: usize,
    pub steps: usize,
    /// Seconds.
    pub bin_width: f64,
}

impl DatasetSpec {
    /// 65 conditions × 20 trials, 30 neurons.
    pub fn lorenz() -> Self {
        Self {
            kind: DatasetKind::Lorenz,
            system: System::Lorenz(LorenzParams::default()),
            conditions: 65,
            trials_per_condition: 20,
            train_per_condition: 16,
            steps: 100,
            bin_width: 0.01,
        }
    }

    /// 400 conditions × 10 trials, 50 neurons; with `pulsed`, one input
    /// pulse per trial.
    pub fn rnn(gamma: f64, pulsed: bool) -> Self {
        Self {
            kind: if pulsed { DatasetKind::RnnPulsed } else { DatasetKind::Rnn },
            system: System::DataRnn(DataRnnParams {
                gamma,
                input: pulsed,
                ..DataRnnParams::default()
            }),
            conditions: 400,
            trials_per_condition: 10,
            train_per_condition: 8,
            steps: 100,
            bin_width: 0.01,
        }
    }

    pub fn for_kind(kind: DatasetKind, gamma: f64) -> Self {
        match kind {
            DatasetKind::Lorenz => Self::lorenz(),
            DatasetKind::Rnn => Self::rnn(gamma, false),
            DatasetKind::RnnPulsed => Self::rnn(gamma, true),
        }
    }

    pub fn with_conditions(mut self, conditions: usize) -> Self {
        self.conditions = conditions;
        self
    }

    pub fn neurons(&self) -> usize {
        match &self.system {
            System::Lorenz(p) => p.n_neurons,
            System::DataRnn(p) => p.n,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match &self.system {
            System::Lorenz(_) => 3,
            System::DataRnn(p) => p.n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions == 0 || self.trials_per_condition == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig(String::from(
                "conditions, trials_per_condition and steps must be >= 1",
            )));
        }
        if self.train_per_condition > self.trials_per_condition {
            return Err(Error::InvalidConfig(String::from(
                "train_per_condition exceeds trials_per_condition",
            )));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::InvalidConfig(String::from("bin_width must be > 0")));
        }
        match (&self.system, self.kind) {
            (System::Lorenz(p), DatasetKind::Lorenz) => p.validate(),
            (System::DataRnn(p), DatasetKind::Rnn) if !p.input => Ok(()),
            (System::DataRnn(p), DatasetKind::RnnPulsed) if p.input => Ok(()),
            _ => Err(Error::InvalidConfig(String::from(
                "dataset kind does not match its system parameters",
            ))),
        }
    }
}

/// Random log-linear readout `ln r = W z + b` (spikes/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// `neurons×latents`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroundTruthSystem {
    Lorenz { readout: Readout, latent_mean: [f64; 3], latent_std: [f64; 3] },
    DataRnn(DataRnn),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub truth_system: GroundTruthSystem,
    /// `trials×T×D` counts.
    pub spikes: Vec<u16>,
    /// `rows×T×D`, spikes/s; see [`SpikeDataset::truth_row`].
    pub rates: Vec<f64>,
    /// `rows×T×L`.
    pub latents: Vec<f64>,
    /// Seconds, one per trial (pulsed data only).
    pub pulse_times: Option<Vec<f64>>,
    pub condition_of: Vec<usize>,
    pub split: Vec<Split>,
}

impl SpikeDataset {
    pub fn n_trials(&self) -> usize {
        self.condition_of.len()
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn neurons(&self) -> usize {
        self.spec.neurons()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    pub fn bin_width(&self) -> f64 {
        self.spec.bin_width
    }

    pub fn trial_spikes(&self, trial: usize) -> &[u16] {
        let n = self.steps() * self.neurons();
        &self.spikes[trial * n..(trial + 1) * n]
    }

    /// Counts of one trial as a `T×D` tensor.
    pub fn trial_counts(&self, trial: usize) -> Tensor {
        let data = self.trial_spikes(trial).iter().map(|&c| c as f64).collect();
        Tensor::new(vec![self.steps(), self.neurons()], data).expect("consistent dataset shape")
    }

    /// Whether ground truth is stored per trial rather than per condition.
    pub fn truth_per_trial(&self) -> bool {
        self.spec.kind == DatasetKind::RnnPulsed
    }

    pub fn truth_rows(&self) -> usize {
        if self.truth_per_trial() {
            self.spec.conditions * self.spec.trials_per_condition
        } else {
            self.spec.conditions
        }
    }

    /// Row of `rates`/`latents` holding this trial's ground truth.
    pub fn truth_row(&self, trial: usize) -> usize {
        if self.truth_per_trial() {
            trial
        } else {
            self.condition_of[trial]
        }
    }

    /// `T×D`, spikes/s.
    pub fn trial_rates(&self, trial: usize) -> &[f64] {
        let n = self.steps() * self.neurons();
        let r = self.truth_row(trial);
        &self.rates[r * n..(r + 1) * n]
    }

    /// `T×L`.
    pub fn trial_latents(&self, trial: usize) -> &[f64] {
        let n = self.steps() * self.latent_dim();
        let r = self.truth_row(trial);
        &self.latents[r * n..(r + 1) * n]
    }

    pub fn pulse_time(&self, trial: usize) -> Option<f64> {
        self.pulse_times.as_ref().map(|p| p[trial])
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n_trials()).filter(|&i| self.split[i] == split).collect()
    }

    /// Mean log firing rate (per bin) across the training split; used to
    /// initialise the rate readout bias.
    pub fn mean_log_count(&self, split: Split) -> Vec<f64> {
        let d = self.neurons();
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for i in self.indices(split) {
            for row in self.trial_spikes(i).chunks(d) {
                for (s, &c) in sum.iter_mut().zip(row) {
                    *s += c as f64;
                }
                n += 1;
            }
        }
        sum.iter()
            .map(|s| math::ln((s / n.max(1) as f64).max(1e-3)))
            .collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let (c, t, d, l) = (self.spec.conditions, self.steps(), self.neurons(), self.latent_dim());
        let trials = c * self.spec.trials_per_condition;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("dataset {what} has the wrong size")));
        if self.condition_of.len() != trials || self.split.len() != trials {
            return bad("trial table");
        }
        if self.spikes.len() != trials * t * d {
            return bad("spikes");
        }
        let rows = self.truth_rows();
        if self.rates.len() != rows * t * d {
            return bad("rates");
        }
        if self.latents.len() != rows * t * l {
            return bad("latents");
        }
        if self.condition_of.iter().any(|&k| k >= c) {
            return Err(Error::InvalidArgument(String::from("condition id out of range")));
        }
        if self.rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(String::from("rates must be finite and nonnegative")));
        }
        if self.latents.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(String::from("latents must be finite")));
        }
        match (&self.pulse_times, self.spec.kind) {
            (Some(p), DatasetKind::RnnPulsed) if p.len() == trials => Ok(()),
            (None, DatasetKind::Lorenz | DatasetKind::Rnn) => Ok(()),
            _ => Err(Error::InvalidArgument(String::from("pulse times inconsistent with dataset kind"))),
        }
    }
}

fn spikes_for_rows(
    spec: &DatasetSpec,
    seed: u64,
    rates: &[f64],
    per_trial: bool,
) -> Result<(Vec<u16>, Vec<usize>, Vec<Split>)> {
    let (t, d) = (spec.steps, spec.neurons());
    let per = spec.trials_per_condition;
    let mut spikes = Vec::with_capacity(spec.conditions * per * t * d);
    let mut condition_of = Vec::with_capacity(spec.conditions * per);
    let mut split = Vec::with_capacity(spec.conditions * per);
    for c in 0..spec.conditions {
        for k in 0..per {
            let row = if per_trial { c * per + k } else { c };
            let expected: Vec<f64> = rates[row * t * d..(row + 1) * t * d]
                .iter()
                .map(|r| r * spec.bin_width)
                .collect();
            let mut rng = stream(seed, &[TAG_SPIKES, c as u64, k as u64]);
            for n in sample_poisson_counts(&expected, &mut rng)? {
                let n = u16::try_from(n)
                    .map_err(|_| Error::InvalidArgument(format!("spike count {n} exceeds u16")))?;
                spikes.push(n);
            }
            condition_of.push(c);
            split.push(if k < spec.train_per_condition { Split::Train } else { Split::Valid });
        }
    }
    Ok((spikes, condition_of, split))
}

fn build_lorenz(spec: &DatasetSpec, p: &LorenzParams, seed: u64) -> Result<(GroundTruthSystem, Vec<f64>, Vec<f64>)> {
    let t = spec.steps;
    let mut raw = Vec::with_capacity(spec.conditions * t * 3);
    for c in 0..spec.conditions {
        let mut rng = stream(seed, &[TAG_CONDITION, c as u64]);
        let y0 = [
            10.0 * standard_normal(&mut rng),
            10.0 * standard_normal(&mut rng),
            25.0 + 10.0 * standard_normal(&mut rng),
        ];
        let burn = simulate_lorenz(p, y0, p.burn_in)?;
        let traj = simulate_lorenz(p, burn[p.burn_in], (t - 1) * p.speedup)?;
        for s in 0..t {
            raw.extend_from_slice(&traj[s * p.speedup]);
        }
    }
    let n = (spec.conditions * t) as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for j in 0..3 {
        mean[j] = raw.iter().skip(j).step_by(3).sum::<f64>() / n;
        let var = raw.iter().skip(j).step_by(3).map(|v| (v - mean[j]) * (v - mean[j])).sum::<f64>() / n;
        std[j] = if var > 0.0 { math::sqrt(var) } else { 1.0 };
    }
    let latents: Vec<f64> = raw
        .chunks(3)
        .flat_map(|z| (0..3).map(move |j| (z[j] - mean[j]) / std[j]))
        .collect();
    let mut rng = stream(seed, &[TAG_WEIGHTS]);
    let d = p.n_neurons;
    let readout = Readout {
        weights: normal_vec(&mut rng, d * 3, 1.0),
        bias: vec![math::ln(p.baseline_rate); d],
    };
    let mut rates = Vec::with_capacity(spec.conditions * t * d);
    for z in latents.chunks(3) {
        for i in 0..d {
            let w = &readout.weights[i * 3..i * 3 + 3];
            let lr = readout.bias[i] + w[0] * z[0] + w[1] * z[1] + w[2] * z[2];
            rates.push(math::exp(lr));
        }
    }
    let sys = GroundTruthSystem::Lorenz {
        readout,
        latent_mean: mean,
        latent_std: std,
    };
    Ok((sys, rates, latents))
}

fn build_rnn(
    spec: &DatasetSpec,
    p: &DataRnnParams,
    seed: u64,
) -> Result<(GroundTruthSystem, Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
    let rnn = DataRnn::sample(*p, &mut stream(seed, &[TAG_WEIGHTS]))?;
    let k = bin_factor(spec.bin_width, p.dt)?;
    let fine = spec.steps * k;
    let n = p.n;
    let mut rates = Vec::with_capacity(spec.conditions * spec.steps * n);
    let mut latents = Vec::with_capacity(spec.conditions * spec.steps * n);
    let mut pulses = p.input.then(Vec::new);
    let runs = if p.input { spec.trials_per_condition } else { 1 };
    for c in 0..spec.conditions {
        let y0 = normal_vec(&mut stream(seed, &[TAG_CONDITION, c as u64]), n, 1.0);
        for trial in 0..runs {
            let pulse = if p.input {
                let (lo, hi) = p.pulse_window;
                let u: f64 = stream(seed, &[TAG_PULSE, c as u64, trial as u64]).random();
                let tp = lo + (hi - lo) * u;
                pulses.as_mut().unwrap().push(tp);
                Some(tp)
            } else {
                None
            };
            let traj = simulate_data_rnn(&rnn, &y0, fine - 1, pulse)?;
            rates.extend(bin_rates(&traj.rates, n, p.dt, spec.bin_width)?);
            latents.extend(bin_rates_signed(&traj.states, n, k));
        }
    }
    Ok((GroundTruthSystem::DataRnn(rnn), rates, latents, pulses))
}

fn bin_rates_signed(x: &[f64], d: usize, k: usize) -> Vec<f64> {
    let bins = x.len() / (d * k);
    let mut out = vec![0.0; bins * d];
    for b in 0..bins {
        for s in 0..k {
            for j in 0..d {
                out[b * d + j] += x[(b * k + s) * d + j];
            }
        }
    }
    for v in out.iter_mut() {
        *v /= k as f64;
    }
    out
}

/// Generates a full benchmark dataset; identical `(spec, seed)` give
/// identical data.
pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<SpikeDataset> {
    spec.validate()?;
    let (truth_system, rates, latents, pulse_times) = match &spec.system {
        System::Lorenz(p) => {
            let (s, r, l) = build_lorenz(spec, p, seed)?;
            (s, r, l, None)
        }
        System::DataRnn(p) => build_rnn(spec, p, seed)?,
    };
    let per_trial = spec.kind == DatasetKind::RnnPulsed;
    let (spikes, condition_of, split) = spikes_for_rows(spec, seed, &rates, per_trial)?;
    let ds = SpikeDataset {
        spec: spec.clone(),
        seed,
        truth_system,
        spikes,
        rates,
        latents,
        pulse_times,
        condition_of,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Cumulative explained-variance ratio of the principal components of
/// `samples` (`n×d`, one row per sample).
pub fn pca_variance_curve(samples: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || !samples.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument(String::from("samples do not tile into rows of width d")));
    }
    let n = samples.len() / d;
    if n < 2 {
        return Err(Error::InvalidArgument(String::from("PCA needs at least 2 samples")));
    }
    let mut mean = vec![0.0; d];
    for row in samples.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centred = vec![0.0; d];
    for row in samples.chunks(d) {
        for j in 0..d {
            centred[j] = row[j] - mean[j];
        }
        for a in 0..d {
            let ca = centred[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                cov[(a, b)] += ca * centred[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(String::from("samples have zero total variance")));
    }
    let mut acc = 0.0;
    Ok(eig
        .iter()
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz_fixed_points() {
        let p = LorenzParams::default();
        let s = math::sqrt(p.beta * (p.rho - 1.0));
        let traj = simulate_lorenz(&p, [s, s, p.rho - 1.0], 200).unwrap();
        for y in &traj {
            assert!((y[0] - s).abs() < 1e-12 && (y[1] - s).abs() < 1e-12 && (y[2] - 27.0).abs() < 1e-12);
        }
        let traj = simulate_lorenz(&p, [0.0; 3], 50).unwrap();
        assert!(traj.iter().all(|y| *y == [0.0; 3]));
    }

    #[test]
    fn lorenz_bounded_from_unit_start() {
        let traj = simulate_lorenz(&LorenzParams::default(), [1.0; 3], 1000).unwrap();
        assert_eq!(traj.len(), 1001);
        assert!(traj.iter().all(|y| y[2].abs() < 60.0));
    }

    #[test]
    fn lorenz_divergence_reported() {
        let p = LorenzParams {
            dt: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            simulate_lorenz(&p, [1.0, 2.0, 3.0], 100),
            Err(Error::Divergence { op: "lorenz", .. })
        ));
    }

    #[test]
    fn rnn_linear_decay_step() {
        let rnn = DataRnn {
            params: DataRnnParams {
                n: 3,
                gamma: 0.0,
                ..Default::default()
            },
            w: vec![0.0; 9],
            b: vec![0.0; 3],
        };
        let y0 = [1.0, -2.0, 0.5];
        let traj = simulate_data_rnn(&rnn, &y0, 1, None).unwrap();
        for i in 0..3 {
            assert_eq!(traj.states[3 + i], y0[i] * (1.0 - 0.001 / 0.025));
        }
    }

    #[test]
    fn rate_endpoints() {
        let rnn = DataRnn::sample(DataRnnParams::default(), &mut stream(0, &[])).unwrap();
        assert_eq!(rnn.rate(-1e3), 0.0);
        assert_eq!(rnn.rate(1e3), 30.0);
        assert_eq!(rnn.rate(0.0), 15.0);
    }

    #[test]
    fn pulse_outside_window_rejected() {
        let rnn = DataRnn::sample(
            DataRnnParams {
                input: true,
                ..Default::default()
            },
            &mut stream(0, &[]),
        )
        .unwrap();
        assert!(simulate_data_rnn(&rnn, &[0.0; 50], 10, Some(0.1)).is_err());
    }

    #[test]
    fn pulse_kick_lands_in_its_step() {
        let mut rnn = DataRnn {
            params: DataRnnParams {
                n: 1,
                gamma: 0.0,
                input: true,
                ..Default::default()
            },
            w: vec![0.0],
            b: vec![1.0],
        };
        rnn.params.pulse_window = (0.0, 1.0);
        let traj = simulate_data_rnn(&rnn, &[0.0], 5, Some(0.0025)).unwrap();
        assert_eq!(&traj.states[..3], &[0.0, 0.0, 0.0]);
        assert!((traj.states[3] - 0.04 * 50.0).abs() < 1e-12);
    }

    #[test]
    fn binning_and_spikes() {
        let mut rng = stream(1, &[]);
        assert!(rates_to_spikes(&vec![0.0; 40], 2, 0.001, 0.01, &mut rng).unwrap().iter().all(|&c| c == 0));
        assert!(rates_to_spikes(&[-1.0; 10], 1, 0.001, 0.01, &mut rng).is_err());
        assert!(rates_to_spikes(&[1.0; 10], 1, 0.001, 0.0025, &mut rng).is_err());
        let r = bin_rates(&[1.0, 2.0, 3.0, 4.0], 1, 0.001, 0.002).unwrap();
        assert_eq!(r, vec![1.5, 3.5]);
        assert_eq!(bin_rates(&[1.0, 2.0], 1, 0.01, 0.01).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn poisson_bin_mean_within_three_se() {
        let n = 100_000;
        let mut rng = stream(2, &[]);
        let counts = rates_to_spikes(&vec![10.0; n], 1, 0.01, 0.01, &mut rng).unwrap();
        let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
        let se = (0.1f64 / n as f64).sqrt();
        assert!((mean - 0.1).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn pca_rank_one_and_isotropic() {
        let samples: Vec<f64> = (0..50).flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let c = pca_variance_curve(&samples, 3).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12);
        let mut rng = stream(3, &[]);
        let n = 10_000;
        let iso = normal_vec(&mut rng, 3 * n, 1.0);
        let c = pca_variance_curve(&iso, 3).unwrap();
        let parts = [c[0], c[1] - c[0], c[2] - c[1]];
        for p in parts {
            // eigenvalue spread of a 3×3 sample covariance is O(1/√n)
            assert!((p - 1.0 / 3.0).abs() < 6.0 / (n as f64).sqrt(), "{parts:?}");
        }
        assert!((c[2] - 1.0).abs() < 1e-12);
        let zero_dim: Vec<f64> = (0..10).flat_map(|i| [i as f64, 0.0]).collect();
        assert_eq!(pca_variance_curve(&zero_dim, 2).unwrap(), vec![1.0, 1.0]);
        assert!(pca_variance_curve(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn small_lorenz_dataset_invariants() {
        let spec = DatasetSpec::lorenz().with_conditions(3);
        let ds = build_dataset(&spec, 11).unwrap();
        assert_eq!(ds.n_trials(), 60);
        assert_eq!(ds.indices(Split::Train).len(), 48);
        assert_eq!(ds.trial_counts(0).shape(), &[100, 30]);
        assert_eq!(ds.trial_rates(0), ds.trial_rates(19));
        assert_ne!(ds.trial_spikes(0), ds.trial_spikes(1));
        let GroundTruthSystem::Lorenz { readout, .. } = &ds.truth_system else {
            panic!()
        };
        for tr in [0, 25, 59] {
            for (z, r) in ds.trial_latents(tr).chunks(3).zip(ds.trial_rates(tr).chunks(30)) {
                for i in 0..30 {
                    let w = &readout.weights[i * 3..i * 3 + 3];
                    let lr = readout.bias[i] + w[0] * z[0] + w[1] * z[1] + w[2] * z[2];
                    assert!((r[i].ln() - lr).abs() < 1e-12);
                }
            }
        }
        let again = build_dataset(&spec, 11).unwrap();
        assert_eq!(ds, again);
        assert_ne!(ds.spikes, build_dataset(&spec, 12).unwrap().spikes);
    }

    #[test]
    fn small_pulsed_rnn_dataset() {
        let spec = DatasetSpec::rnn(1.5, true).with_conditions(4);
        let ds = build_dataset(&spec, 5).unwrap();
        assert_eq!(ds.n_trials(), 40);
        assert_eq!(ds.neurons(), 50);
        for tr in 0..40 {
            let tp = ds.pulse_time(tr).unwrap();
            assert!((0.25..=0.75).contains(&tp));
        }
        assert!(ds.rates.iter().all(|&r| (0.0..=30.0).contains(&r)));
        assert_eq!(ds.rates.len(), 40 * 100 * 50);
        assert_ne!(ds.pulse_time(0), ds.pulse_time(1));
        assert_ne!(ds.trial_rates(0), ds.trial_rates(1));
        let plain = build_dataset(&DatasetSpec::rnn(1.5, false).with_conditions(4), 5).unwrap();
        assert!(plain.pulse_time(0).is_none());
    }
}
