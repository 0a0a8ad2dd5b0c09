//! Posterior evaluation maths: affine alignment, R², inferred-input timing
//! and strength, and a kernel-smoothing baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Affine map `y = W x + b` fit by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim×in_dim`, row-major.
    pub weights: Vec<f64>,
    pub offset: Vec<f64>,
    /// The design matrix was rank deficient; the minimum-norm solution was used.
    pub rank_deficient: bool,
}

impl Alignment {
    /// Applies the map to `n×in_dim` rows.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len() / self.in_dim.max(1) * self.out_dim);
        for row in x.chunks(self.in_dim) {
            for j in 0..self.out_dim {
                let w = &self.weights[j * self.in_dim..(j + 1) * self.in_dim];
                out.push(self.offset[j] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        out
    }
}

fn rows(len: usize, width: usize, what: &str) -> Result<usize> {
    if width == 0 || !len.is_multiple_of(width) {
        return Err(Error::InvalidArgument(format!(
            "{what}: {len} values do not tile into rows of {width}"
        )));
    }
    Ok(len / width)
}

/// Ordinary least squares with intercept from `x` (`n×k`) to `y` (`n×l`).
pub fn fit_alignment(x: &[f64], k: usize, y: &[f64], l: usize) -> Result<Alignment> {
    let n = rows(x.len(), k, "inferred")?;
    if rows(y.len(), l, "truth")? != n {
        return Err(Error::ShapeMismatch {
            op: "fit_alignment",
            lhs: vec![n, k],
            rhs: vec![y.len() / l, l],
        });
    }
    if n < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "alignment needs at least {} samples, got {n}",
            k + 1
        )));
    }
    // centre columns for conditioning; the intercept is recovered afterwards
    let mut xm = vec![0.0; k];
    let mut ym = vec![0.0; l];
    for r in 0..n {
        for j in 0..k {
            xm[j] += x[r * k + j];
        }
        for j in 0..l {
            ym[j] += y[r * l + j];
        }
    }
    xm.iter_mut().for_each(|v| *v /= n as f64);
    ym.iter_mut().for_each(|v| *v /= n as f64);
    let a = DMatrix::from_fn(n, k, |r, c| x[r * k + c] - xm[c]);
    let b = DMatrix::from_fn(n, l, |r, c| y[r * l + c] - ym[c]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(k) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let coef = svd
        .solve(&b, tol)
        .map_err(|e| Error::InvalidArgument(String::from(e)))?;
    let mut weights = vec![0.0; l * k];
    let mut offset = ym.clone();
    for j in 0..l {
        for c in 0..k {
            let w = coef[(c, j)];
            weights[j * k + c] = w;
            offset[j] -= w * xm[c];
        }
    }
    Ok(Alignment {
        in_dim: k,
        out_dim: l,
        weights,
        offset,
        rank_deficient: rank < k,
    })
}

/// Per-dimension `1 − SS_res/SS_tot`; `None` where the truth has zero variance.
pub fn r_squared(pred: &[f64], truth: &[f64], dims: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "r_squared",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    let n = rows(truth.len(), dims, "truth")?;
    if n == 0 {
        return Err(Error::InvalidArgument(String::from("r_squared needs at least one sample")));
    }
    let mut out = Vec::with_capacity(dims);
    for j in 0..dims {
        let mean = (0..n).map(|r| truth[r * dims + j]).sum::<f64>() / n as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for r in 0..n {
            let t = truth[r * dims + j];
            let e = t - pred[r * dims + j];
            ss_res += e * e;
            ss_tot += (t - mean) * (t - mean);
        }
        out.push(if ss_tot > 0.0 { Some(1.0 - ss_res / ss_tot) } else { None });
    }
    Ok(out)
}

/// Centre (seconds) of the bin holding the maximum of `u`; ties go to the
/// earliest bin.
pub fn input_timing(u: &[f64], bin_width: f64) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut best = 0;
    for (t, &v) in u.iter().enumerate() {
        if v > u[best] {
            best = t;
        }
    }
    Ok((best as f64 + 0.5) * bin_width)
}

/// Bin index whose interval contains `time`.
pub fn bin_of(time: f64, bin_width: f64, steps: usize) -> usize {
    (math::floor(time / bin_width).max(0.0) as usize).min(steps.saturating_sub(1))
}

/// Sign (`±1`) that makes the inferred input correlate positively with a
/// unit pulse at each trial's true pulse bin.
pub fn choose_input_sign(inputs: &[Vec<f64>], pulse_times: &[f64], bin_width: f64) -> f64 {
    let mut score = 0.0;
    for (u, &tp) in inputs.iter().zip(pulse_times) {
        if u.is_empty() {
            continue;
        }
        let k = bin_of(tp, bin_width, u.len());
        score += u[k] - math::mean(u);
    }
    if score < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// `√⟨u_t²⟩` over bins whose centres lie in `[center − half, center + half]`.
pub fn input_strength(u: &[f64], bin_width: f64, center: f64, half_width: f64) -> Result<f64> {
    let mut ss = 0.0;
    let mut n = 0usize;
    for (t, &v) in u.iter().enumerate() {
        let c = (t as f64 + 0.5) * bin_width;
        if (c - center).abs() <= half_width + 1e-12 {
            ss += v * v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {center}±{half_width} s contains no bins"
        )));
    }
    Ok(math::sqrt(ss / n as f64))
}

/// One time bin of the pulse-strength comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthRow {
    pub bin: usize,
    pub time: f64,
    /// RMS across trials of the no-pulse dataset.
    pub no_pulse_rms: f64,
    /// RMS across pulsed trials whose pulse window contains this bin.
    pub on_pulse_rms: Option<f64>,
    /// RMS across pulsed trials whose pulse window excludes this bin.
    pub off_pulse_rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthSummary {
    pub mean_no_pulse: f64,
    pub mean_on_pulse: f64,
    pub mean_off_pulse: f64,
}

/// Per-bin RMS of inferred inputs with and without pulses.
pub fn strength_comparison(
    no_pulse: &[Vec<f64>],
    pulsed: &[Vec<f64>],
    pulse_times: &[f64],
    bin_width: f64,
    half_width: f64,
) -> Result<Vec<StrengthRow>> {
    if pulsed.len() != pulse_times.len() {
        return Err(Error::ShapeMismatch {
            op: "strength_comparison",
            lhs: vec![pulsed.len()],
            rhs: vec![pulse_times.len()],
        });
    }
    let steps = no_pulse.first().or(pulsed.first()).map_or(0, |u| u.len());
    if steps == 0 || no_pulse.iter().chain(pulsed).any(|u| u.len() != steps) {
        return Err(Error::InvalidArgument(String::from(
            "strength comparison needs equal-length, non-empty input traces",
        )));
    }
    let rms = |ss: f64, n: usize| (n > 0).then(|| math::sqrt(ss / n as f64));
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let centre = (t as f64 + 0.5) * bin_width;
        let np: f64 = no_pulse.iter().map(|u| u[t] * u[t]).sum();
        let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0, 0.0, 0);
        for (u, &tp) in pulsed.iter().zip(pulse_times) {
            if (centre - tp).abs() <= half_width + 1e-12 {
                on += u[t] * u[t];
                n_on += 1;
            } else {
                off += u[t] * u[t];
                n_off += 1;
            }
        }
        out.push(StrengthRow {
            bin: t,
            time: centre,
            no_pulse_rms: rms(np, no_pulse.len()).unwrap_or(0.0),
            on_pulse_rms: rms(on, n_on),
            off_pulse_rms: rms(off, n_off),
        });
    }
    Ok(out)
}

pub fn summarize_strength(rows: &[StrengthRow]) -> StrengthSummary {
    let mean_of = |it: Vec<f64>| math::mean(&it);
    StrengthSummary {
        mean_no_pulse: mean_of(rows.iter().map(|r| r.no_pulse_rms).collect()),
        mean_on_pulse: mean_of(rows.iter().filter_map(|r| r.on_pulse_rms).collect()),
        mean_off_pulse: mean_of(rows.iter().filter_map(|r| r.off_pulse_rms).collect()),
    }
}

/// Gaussian-kernel smoothing of `T×D` counts along time, renormalised at the
/// edges. `sigma` is in bins; 0 returns the input.
pub fn gaussian_smooth(counts: &[f64], d: usize, sigma: f64) -> Result<Vec<f64>> {
    let t = rows(counts.len(), d, "counts")?;
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(String::from("bandwidth must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(counts.to_vec());
    }
    let radius = (math::floor(4.0 * sigma) as usize).max(1);
    let kernel: Vec<f64> = (0..=radius)
        .map(|k| math::exp(-0.5 * (k as f64 / sigma) * (k as f64 / sigma)))
        .collect();
    let mut out = vec![0.0; counts.len()];
    for i in 0..t {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(t - 1);
        let mut wsum = 0.0;
        for s in lo..=hi {
            let w = kernel[i.abs_diff(s)];
            wsum += w;
            for j in 0..d {
                out[i * d + j] += w * counts[s * d + j];
            }
        }
        for j in 0..d {
            out[i * d + j] /= wsum;
        }
    }
    Ok(out)
}

/// Per-neuron R² of the kernel-smoothed single-trial estimate, with each
/// neuron's bandwidth chosen on `select` and scored on `score`.
///
/// Each trial is `(counts T×D, true expected counts T×D)`.
pub fn smoothing_baseline_r2(
    select: &[(&[f64], &[f64])],
    score: &[(&[f64], &[f64])],
    d: usize,
    bandwidths: &[f64],
) -> Result<Vec<Option<f64>>> {
    if bandwidths.is_empty() {
        return Err(Error::InvalidArgument(String::from("empty bandwidth grid")));
    }
    let smoothed = |set: &[(&[f64], &[f64])], sigma: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (c, r) in set {
            pred.extend(gaussian_smooth(c, d, sigma)?);
            truth.extend_from_slice(r);
        }
        Ok((pred, truth))
    };
    let mut best = vec![(f64::NEG_INFINITY, bandwidths[0]); d];
    for &sigma in bandwidths {
        let (p, t) = smoothed(select, sigma)?;
        for (j, r) in r_squared(&p, &t, d)?.into_iter().enumerate() {
            if let Some(r) = r {
                if r > best[j].0 {
                    best[j] = (r, sigma);
                }
            }
        }
    }
    let mut out = vec![None; d];
    let mut cache: Vec<(f64, Vec<Option<f64>>)> = Vec::new();
    for j in 0..d {
        let sigma = best[j].1;
        if let Some((_, r)) = cache.iter().find(|(s, _)| *s == sigma) {
            out[j] = r[j];
            continue;
        }
        let (p, t) = smoothed(score, sigma)?;
        let r = r_squared(&p, &t, d)?;
        out[j] = r[j];
        cache.push((sigma, r));
    }
    Ok(out)
}
