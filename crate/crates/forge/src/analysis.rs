//! Posterior analyses over a trained model and its dataset.

use lfads_core::eval::{
    choose_input_sign, fit_alignment, input_strength, input_timing, r_squared, smoothing_baseline_r2,
    strength_comparison, summarize_strength, Alignment, StrengthRow, StrengthSummary,
};
use lfads_core::model::{posterior_summary, LfadsConfig, ModelParams, PosteriorSummary, TrialData};
use lfads_core::rng::stream;
use lfads_core::synth::{SpikeDataset, Split};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::trainer::build_pool;

const TAG_EVAL: u64 = 21;

/// Bandwidths (bins) searched by the kernel-smoothing baseline.
pub const SMOOTHING_GRID: [f64; 10] = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0];

/// Half-width (seconds) of the on-pulse window.
pub const PULSE_HALF_WIDTH: f64 = 0.05;

/// Posterior means for `trials`, each from its own seeded stream.
pub fn summarize(
    cfg: &LfadsConfig,
    params: &ModelParams,
    ds: &SpikeDataset,
    trials: &[usize],
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<PosteriorSummary>> {
    let pool = build_pool(threads)?;
    let out: Vec<lfads_core::Result<PosteriorSummary>> = pool.install(|| {
        trials
            .par_iter()
            .map(|&i| {
                let counts = ds.trial_counts(i);
                let mut rng = stream(seed, &[TAG_EVAL, i as u64]);
                posterior_summary(cfg, params, &TrialData::new(&counts), n_samples, &mut rng)
            })
            .collect()
    });
    Ok(out.into_iter().collect::<lfads_core::Result<Vec<_>>>()?)
}

/// Summaries for the train and validation splits.
pub struct SplitSummaries {
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub train: Vec<PosteriorSummary>,
    pub valid: Vec<PosteriorSummary>,
}

pub fn summarize_splits(
    cfg: &LfadsConfig,
    params: &ModelParams,
    ds: &SpikeDataset,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<SplitSummaries> {
    let train_idx = ds.indices(Split::Train);
    let valid_idx = ds.indices(Split::Valid);
    Ok(SplitSummaries {
        train: summarize(cfg, params, ds, &train_idx, n_samples, seed, threads)?,
        valid: summarize(cfg, params, ds, &valid_idx, n_samples, seed, threads)?,
        train_idx,
        valid_idx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentR2Report {
    /// Validation R² per true latent dimension (`None`: zero-variance truth).
    pub r2: Vec<Option<f64>>,
    pub alignment: Alignment,
    pub train_points: usize,
    pub valid_points: usize,
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    rows.flat_map(|r| r.iter().copied()).collect()
}

/// Affine fit from posterior-mean factors to true latents on the training
/// split, scored on validation trials.
pub fn latent_r2(ds: &SpikeDataset, s: &SplitSummaries) -> Result<LatentR2Report> {
    let k = s.train.first().map(|p| p.factors.cols()).unwrap_or(0);
    let l = ds.latent_dim();
    let x_train = stack(s.train.iter().map(|p| p.factors.data()));
    let y_train = stack(s.train_idx.iter().map(|&i| ds.trial_latents(i)));
    let alignment = fit_alignment(&x_train, k, &y_train, l)?;
    let x_valid = stack(s.valid.iter().map(|p| p.factors.data()));
    let y_valid = stack(s.valid_idx.iter().map(|&i| ds.trial_latents(i)));
    let pred = alignment.predict(&x_valid);
    Ok(LatentR2Report {
        r2: r_squared(&pred, &y_valid, l)?,
        alignment,
        train_points: x_train.len() / k.max(1),
        valid_points: x_valid.len() / k.max(1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateR2Report {
    /// Per-neuron validation R² of posterior-mean rates.
    pub model_r2: Vec<Option<f64>>,
    /// Per-neuron validation R² of the kernel-smoothed spike baseline.
    pub baseline_r2: Vec<Option<f64>>,
    /// Fraction of neurons where the model beats the baseline.
    pub fraction_better: f64,
}

/// Rate recovery in spikes/s against the truth, with the smoothing baseline
/// tuned per neuron on the training split.
pub fn rate_r2(ds: &SpikeDataset, s: &SplitSummaries) -> Result<RateR2Report> {
    let d = ds.neurons();
    let bw = ds.bin_width();
    let pred = stack(s.valid.iter().map(|p| p.rates.data()))
        .into_iter()
        .map(|r| r / bw)
        .collect::<Vec<_>>();
    let truth = stack(s.valid_idx.iter().map(|&i| ds.trial_rates(i)));
    let model_r2 = r_squared(&pred, &truth, d)?;
    let to_pairs = |idx: &[usize]| -> Vec<(Vec<f64>, Vec<f64>)> {
        idx.iter()
            .map(|&i| {
                let spikes = ds.trial_spikes(i).iter().map(|&c| c as f64 / bw).collect();
                (spikes, ds.trial_rates(i).to_vec())
            })
            .collect()
    };
    let sel = to_pairs(&s.train_idx);
    let sco = to_pairs(&s.valid_idx);
    let baseline_r2 = smoothing_baseline_r2(&as_refs(&sel), &as_refs(&sco), d, &SMOOTHING_GRID)?;
    let better = model_r2
        .iter()
        .zip(&baseline_r2)
        .filter(|(m, b)| match (m, b) {
            (Some(m), Some(b)) => m > b,
            _ => false,
        })
        .count();
    Ok(RateR2Report {
        fraction_better: better as f64 / d as f64,
        model_r2,
        baseline_r2,
    })
}

fn as_refs(v: &[(Vec<f64>, Vec<f64>)]) -> Vec<(&[f64], &[f64])> {
    v.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect()
}

fn first_input(p: &PosteriorSummary) -> Vec<f64> {
    (0..p.inputs.rows()).map(|t| p.inputs.get2(t, 0)).collect()
}

fn require_inputs(cfg: &LfadsConfig, what: &str) -> Result<()> {
    if cfg.inferred_input_dim == 0 {
        return Err(ForgeError::Usage(format!(
            "{what} needs a model with inferred inputs (inferred_input_dim = 0)"
        )));
    }
    Ok(())
}

fn require_pulses(ds: &SpikeDataset, what: &str) -> Result<()> {
    if ds.pulse_times.is_none() {
        return Err(ForgeError::Usage(format!("{what} needs a pulsed dataset")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub trial: usize,
    pub true_time: f64,
    pub inferred_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Sign applied to the first inferred input, chosen on the training split.
    pub sign: f64,
    pub rows: Vec<TimingRow>,
    pub tolerance: f64,
    pub fraction_within: f64,
    /// Same score for the peak of |ū_t|; diagnostic of sign consistency only.
    pub abs_fraction_within: f64,
}

/// Peak time of the (sign-corrected) first inferred input per validation
/// trial against the true pulse time.
pub fn timing_report(cfg: &LfadsConfig, ds: &SpikeDataset, s: &SplitSummaries) -> Result<TimingReport> {
    require_inputs(cfg, "input timing")?;
    require_pulses(ds, "input timing")?;
    let bw = ds.bin_width();
    let train_u: Vec<Vec<f64>> = s.train.iter().map(first_input).collect();
    let train_tp: Vec<f64> = s.train_idx.iter().map(|&i| ds.pulse_time(i).unwrap()).collect();
    let sign = choose_input_sign(&train_u, &train_tp, bw);
    let mut rows = Vec::with_capacity(s.valid.len());
    let mut abs_within = 0;
    let close = |t: f64, tp: f64| (t - tp).abs() <= PULSE_HALF_WIDTH + 1e-9;
    for (p, &i) in s.valid.iter().zip(&s.valid_idx) {
        let u: Vec<f64> = first_input(p).into_iter().map(|v| sign * v).collect();
        let true_time = ds.pulse_time(i).unwrap();
        let mag: Vec<f64> = u.iter().map(|v| v.abs()).collect();
        abs_within += close(input_timing(&mag, bw)?, true_time) as usize;
        rows.push(TimingRow {
            trial: i,
            true_time,
            inferred_time: input_timing(&u, bw)?,
        });
    }
    let within = rows.iter().filter(|r| close(r.inferred_time, r.true_time)).count();
    let n = rows.len().max(1) as f64;
    Ok(TimingReport {
        sign,
        tolerance: PULSE_HALF_WIDTH,
        fraction_within: within as f64 / n,
        abs_fraction_within: abs_within as f64 / n,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthReport {
    pub rows: Vec<StrengthRow>,
    pub summary: StrengthSummary,
    /// Per validation trial of the pulsed data: RMS inside the pulse window.
    pub per_trial_on: Vec<f64>,
}

/// Inferred-input magnitude with and without pulses, validation trials only.
pub fn strength_report(
    pulsed_cfg: &LfadsConfig,
    pulsed_ds: &SpikeDataset,
    pulsed: &SplitSummaries,
    plain_cfg: &LfadsConfig,
    plain: &SplitSummaries,
) -> Result<StrengthReport> {
    require_inputs(pulsed_cfg, "input strength")?;
    require_inputs(plain_cfg, "input strength")?;
    require_pulses(pulsed_ds, "input strength")?;
    let bw = pulsed_ds.bin_width();
    let on: Vec<Vec<f64>> = pulsed.valid.iter().map(first_input).collect();
    let tp: Vec<f64> = pulsed.valid_idx.iter().map(|&i| pulsed_ds.pulse_time(i).unwrap()).collect();
    let off: Vec<Vec<f64>> = plain.valid.iter().map(first_input).collect();
    let rows = strength_comparison(&off, &on, &tp, bw, PULSE_HALF_WIDTH)?;
    let per_trial_on = on
        .iter()
        .zip(&tp)
        .map(|(u, &t)| input_strength(u, bw, t, PULSE_HALF_WIDTH))
        .collect::<lfads_core::Result<Vec<_>>>()?;
    Ok(StrengthReport {
        summary: summarize_strength(&rows),
        rows,
        per_trial_on,
    })
}
