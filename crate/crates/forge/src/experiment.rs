//! Run orchestration shared by the command line and the test suites.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lfads_core::model::{generate_unconditioned, LfadsConfig};
use lfads_core::rng::stream;
use lfads_core::synth::{build_dataset, DatasetKind, DatasetSpec, SpikeDataset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, SplitSummaries};
use crate::checkpoint::Checkpoint;
use crate::dataset_io::{read_dataset, write_dataset};
use crate::error::{ForgeError, Result};
use crate::report::{fmt_opt, svg_line_plot, write_csv, write_json, Series};
use crate::trainer::{EpochMetrics, Trainer, TrainerConfig, METRICS_HEADER};

pub const THREADS_ENV: &str = "LFADS_FORGE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: DatasetKind,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub model: LfadsConfig,
    pub trainer: TrainerConfig,
    /// Seed of the posterior sampling used by evaluation and `sample`.
    pub eval_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: DatasetKind::Lorenz,
            dataset: PathBuf::from("data/lorenz"),
            output_dir: PathBuf::from("runs/lorenz"),
            model: LfadsConfig::default(),
            trainer: TrainerConfig::default(),
            eval_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ForgeError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(ForgeError::io(path))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Copies the dataset's shape into the model config.
    pub fn resolve(&mut self, ds: &SpikeDataset) {
        self.model.data_dim = ds.neurons();
        self.model.steps = ds.steps();
        self.model.observed_dim = 0;
    }
}

/// Stand-in for a source revision: hash of the package name and version.
pub fn code_version_hash() -> String {
    let id = format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    Sha256::digest(id.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub package: String,
    pub version: String,
    pub code_hash: String,
    pub threads: usize,
    pub trainer_seed: u64,
    pub eval_seed: u64,
    pub dataset_seed: u64,
    pub dataset: PathBuf,
}

/// Worker count from the flag, else the environment variable, else 1.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| n.max(1))
            .map_err(|_| ForgeError::Usage(format!("{THREADS_ENV}={v} is not a positive integer"))),
        Err(_) => Ok(1),
    }
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

/// Builds and writes a dataset; refuses a non-empty target without `force`.
pub fn generate(spec: &DatasetSpec, seed: u64, out: &Path, force: bool) -> Result<SpikeDataset> {
    if dir_is_nonempty(out) && !force {
        return Err(ForgeError::Usage(format!(
            "{} exists and is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    let ds = build_dataset(spec, seed)?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn info(&self) -> PathBuf {
        self.dir.join("run.json")
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<u64>,
    pub steps: u64,
}

/// Trains to early stop (or `max_epochs`), writing checkpoints, metrics and
/// the resolved config into the run directory.
pub fn train(
    exp: &mut ExperimentConfig,
    ds: &SpikeDataset,
    threads: usize,
    resume: bool,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainSummary> {
    exp.resolve(ds);
    let paths = RunPaths::new(&exp.output_dir);
    fs::create_dir_all(&paths.dir).map_err(ForgeError::io(&paths.dir))?;
    write_json(&paths.config(), exp)?;
    write_json(
        &paths.info(),
        &RunInfo {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            code_hash: code_version_hash(),
            threads,
            trainer_seed: exp.trainer.seed,
            eval_seed: exp.eval_seed,
            dataset_seed: ds.seed,
            dataset: exp.dataset.clone(),
        },
    )?;
    let mut trainer = if resume {
        let ck = Checkpoint::load(&paths.last(), Some(&exp.model))?;
        let mut t = Trainer::resume(ck.model, exp.trainer.clone(), ck.params, ck.adam, ck.state, ds, threads)?;
        t.last_checkpoint = Some(paths.last());
        t
    } else {
        write_csv(&paths.metrics(), METRICS_HEADER, std::iter::empty())?;
        Trainer::new(exp.model.clone(), exp.trainer.clone(), ds, threads)?
    };
    let mut epochs = Vec::new();
    while !trainer.state.stopped {
        let m = trainer.train_epoch()?;
        let mut f = OpenOptions::new()
            .append(true)
            .open(paths.metrics())
            .map_err(ForgeError::io(paths.metrics()))?;
        writeln!(f, "{}", m.csv_row()).map_err(ForgeError::io(paths.metrics()))?;
        let ck = trainer.snapshot();
        if m.improved {
            ck.save(&paths.best())?;
        }
        ck.save(&paths.last())?;
        trainer.last_checkpoint = Some(paths.last());
        on_epoch(&m);
        epochs.push(m);
    }
    Ok(TrainSummary {
        epochs,
        best_valid: trainer.state.best_valid,
        best_epoch: trainer.state.best_epoch,
        steps: trainer.state.step,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub r2_latents: bool,
    pub r2_rates: bool,
    pub input_timing: bool,
    /// No-pulse checkpoint and dataset for the strength comparison.
    pub input_strength: Option<(PathBuf, PathBuf)>,
    pub samples: Option<usize>,
    pub svg: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub r2_latents: Option<Vec<Option<f64>>>,
    pub r2_rates_model_mean: Option<f64>,
    pub r2_rates_baseline_mean: Option<f64>,
    pub r2_rates_fraction_better: Option<f64>,
    pub input_timing_fraction_within: Option<f64>,
    pub input_strength_mean_on: Option<f64>,
    pub input_strength_mean_off: Option<f64>,
    pub input_strength_mean_no_pulse: Option<f64>,
    pub posterior_samples: usize,
    pub seed: u64,
}

fn mean_some(v: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = v.iter().flatten().copied().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn all_finite(s: &EvalSummary) -> bool {
    let mut vals: Vec<Option<f64>> = vec![
        s.r2_rates_model_mean,
        s.r2_rates_baseline_mean,
        s.r2_rates_fraction_better,
        s.input_timing_fraction_within,
        s.input_strength_mean_on,
        s.input_strength_mean_off,
        s.input_strength_mean_no_pulse,
    ];
    if let Some(r) = &s.r2_latents {
        vals.extend(r.iter().copied());
    }
    vals.into_iter().flatten().all(f64::is_finite)
}

/// Runs the requested analyses and writes reports into `out`.
pub fn evaluate(
    checkpoint: &Path,
    ds: &SpikeDataset,
    out: &Path,
    req: &EvalRequest,
    seed: u64,
    threads: usize,
) -> Result<EvalSummary> {
    let ck = Checkpoint::load(checkpoint, None)?;
    let cfg = &ck.model;
    if cfg.data_dim != ds.neurons() {
        return Err(ForgeError::Usage(format!(
            "checkpoint models {} neurons, dataset has {}",
            cfg.data_dim,
            ds.neurons()
        )));
    }
    let wants_inputs = req.input_timing || req.input_strength.is_some();
    if wants_inputs && cfg.inferred_input_dim == 0 {
        return Err(ForgeError::Usage(
            "input analyses need a model with inferred inputs (inferred_input_dim = 0)".into(),
        ));
    }
    if wants_inputs && ds.pulse_times.is_none() {
        return Err(ForgeError::Usage("input analyses need a pulsed dataset".into()));
    }
    fs::create_dir_all(out).map_err(ForgeError::io(out))?;
    let n = req.samples.unwrap_or(if wants_inputs {
        cfg.input_posterior_samples
    } else {
        cfg.posterior_samples
    });
    let s = analysis::summarize_splits(cfg, &ck.params, ds, n, seed, threads)?;
    let mut summary = EvalSummary {
        posterior_samples: n,
        seed,
        ..Default::default()
    };
    if req.r2_latents {
        let r = analysis::latent_r2(ds, &s)?;
        write_csv(
            &out.join("r2_latents.csv"),
            "dim,r2",
            r.r2.iter().enumerate().map(|(j, v)| format!("{j},{}", fmt_opt(*v))),
        )?;
        write_json(&out.join("alignment.json"), &r.alignment)?;
        if req.svg {
            write_latent_svg(out, ds, &s, &r.alignment)?;
        }
        summary.r2_latents = Some(r.r2);
    }
    if req.r2_rates {
        let r = analysis::rate_r2(ds, &s)?;
        write_csv(
            &out.join("r2_rates.csv"),
            "neuron,model_r2,baseline_r2",
            r.model_r2
                .iter()
                .zip(&r.baseline_r2)
                .enumerate()
                .map(|(i, (m, b))| format!("{i},{},{}", fmt_opt(*m), fmt_opt(*b))),
        )?;
        if req.svg {
            write_rate_svg(out, ds, &s)?;
        }
        summary.r2_rates_model_mean = mean_some(&r.model_r2);
        summary.r2_rates_baseline_mean = mean_some(&r.baseline_r2);
        summary.r2_rates_fraction_better = Some(r.fraction_better);
    }
    if req.input_timing {
        let r = analysis::timing_report(cfg, ds, &s)?;
        write_csv(
            &out.join("input_timing.csv"),
            "trial,true_time,inferred_time",
            r.rows.iter().map(|x| format!("{},{},{}", x.trial, x.true_time, x.inferred_time)),
        )?;
        summary.input_timing_fraction_within = Some(r.fraction_within);
    }
    if let Some((ref_ck, ref_ds)) = &req.input_strength {
        let plain_ck = Checkpoint::load(ref_ck, None)?;
        let plain_ds = read_dataset(ref_ds)?;
        let plain = analysis::summarize_splits(&plain_ck.model, &plain_ck.params, &plain_ds, n, seed, threads)?;
        let r = analysis::strength_report(cfg, ds, &s, &plain_ck.model, &plain)?;
        write_csv(
            &out.join("input_strength.csv"),
            "bin,time,no_pulse_rms,on_pulse_rms,off_pulse_rms",
            r.rows.iter().map(|x| {
                format!(
                    "{},{},{},{},{}",
                    x.bin,
                    x.time,
                    x.no_pulse_rms,
                    fmt_opt(x.on_pulse_rms),
                    fmt_opt(x.off_pulse_rms)
                )
            }),
        )?;
        summary.input_strength_mean_on = Some(r.summary.mean_on_pulse);
        summary.input_strength_mean_off = Some(r.summary.mean_off_pulse);
        summary.input_strength_mean_no_pulse = Some(r.summary.mean_no_pulse);
    }
    write_json(&out.join("summary.json"), &summary)?;
    if !all_finite(&summary) {
        return Err(ForgeError::Usage("evaluation produced non-finite values".into()));
    }
    Ok(summary)
}

fn write_latent_svg(out: &Path, ds: &SpikeDataset, s: &SplitSummaries, a: &lfads_core::eval::Alignment) -> Result<()> {
    let (Some(p), Some(&trial)) = (s.valid.first(), s.valid_idx.first()) else {
        return Ok(());
    };
    let bw = ds.bin_width();
    let l = ds.latent_dim().min(3);
    let pred = a.predict(p.factors.data());
    let truth = ds.trial_latents(trial);
    let ld = ds.latent_dim();
    for j in 0..l {
        let pts = |v: &[f64]| (0..ds.steps()).map(|t| ((t as f64 + 0.5) * bw, v[t * ld + j])).collect();
        let svg = svg_line_plot(
            &format!("latent {} (validation trial {trial})", j + 1),
            "time (s)",
            &[
                Series { label: "true".into(), points: pts(truth), dashed: false },
                Series { label: "inferred".into(), points: pts(&pred), dashed: true },
            ],
        );
        let path = out.join(format!("latent_{}.svg", j + 1));
        fs::write(&path, svg).map_err(ForgeError::io(&path))?;
    }
    Ok(())
}

fn write_rate_svg(out: &Path, ds: &SpikeDataset, s: &SplitSummaries) -> Result<()> {
    let (Some(p), Some(&trial)) = (s.valid.first(), s.valid_idx.first()) else {
        return Ok(());
    };
    let bw = ds.bin_width();
    let d = ds.neurons();
    let truth = ds.trial_rates(trial);
    for i in 0..d.min(3) {
        let svg = svg_line_plot(
            &format!("neuron {i} rate (validation trial {trial})"),
            "time (s)",
            &[
                Series {
                    label: "true".into(),
                    points: (0..ds.steps()).map(|t| ((t as f64 + 0.5) * bw, truth[t * d + i])).collect(),
                    dashed: false,
                },
                Series {
                    label: "inferred".into(),
                    points: (0..ds.steps()).map(|t| ((t as f64 + 0.5) * bw, p.rates.get2(t, i) / bw)).collect(),
                    dashed: true,
                },
            ],
        );
        let path = out.join(format!("rate_{i}.svg"));
        fs::write(&path, svg).map_err(ForgeError::io(&path))?;
    }
    Ok(())
}

/// Draws trials from the generative model and writes them as CSV.
pub fn sample(checkpoint: &Path, trials: usize, steps: Option<usize>, seed: u64, out: &Path, bin_width: f64) -> Result<()> {
    let ck = Checkpoint::load(checkpoint, None)?;
    let cfg = &ck.model;
    let steps = steps.unwrap_or(cfg.steps);
    fs::create_dir_all(out).map_err(ForgeError::io(out))?;
    let mut rate_rows = Vec::new();
    let mut factor_rows = Vec::new();
    for k in 0..trials {
        let g = generate_unconditioned(cfg, &ck.params, &mut stream(seed, &[31, k as u64]), steps)?;
        for t in 0..steps {
            for i in 0..cfg.data_dim {
                rate_rows.push(format!("{k},{t},{i},{},{}", g.rates[t][i] / bin_width, g.spikes[t][i]));
            }
            for (j, f) in g.factors[t].iter().enumerate() {
                factor_rows.push(format!("{k},{t},{j},{f}"));
            }
        }
        if k == 0 {
            let series: Vec<Series> = (0..cfg.factors_dim.min(6))
                .map(|j| Series {
                    label: format!("factor {j}"),
                    points: (0..steps).map(|t| ((t as f64 + 0.5) * bin_width, g.factors[t][j])).collect(),
                    dashed: false,
                })
                .collect();
            let path = out.join("sample_factors.svg");
            fs::write(&path, svg_line_plot("generated factors, trial 0", "time (s)", &series))
                .map_err(ForgeError::io(&path))?;
        }
    }
    write_csv(&out.join("samples.csv"), "trial,bin,neuron,rate,spikes", rate_rows)?;
    write_csv(&out.join("factors.csv"), "trial,bin,factor,value", factor_rows)
}
