use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lfads_core::synth::{DatasetSpec, System};
use lfads_forge::dataset_io::read_dataset;
use lfads_forge::experiment::{self, EvalRequest, ExperimentConfig};
use lfads_forge::{ForgeError, Result};

#[derive(Parser)]
#[command(name = "lfads-forge", version, about = "Train and analyse LFADS models on synthetic spike data")]
struct Cli {
    /// Worker threads (falls back to LFADS_FORGE_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Lorenz,
    Rnn,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic spike dataset.
    Generate {
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.5)]
        gamma: f64,
        /// Deliver one input pulse per trial at a random time (rnn only).
        #[arg(long)]
        pulsed: bool,
        #[arg(long)]
        conditions: Option<usize>,
        #[arg(long)]
        trials_per_condition: Option<usize>,
        #[arg(long)]
        train_per_condition: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        neurons: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides trainer.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<u64>,
        /// Continue from final.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Posterior analyses of a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        r2_latents: bool,
        #[arg(long)]
        r2_rates: bool,
        #[arg(long)]
        input_timing: bool,
        /// Compare inferred-input strength against a no-pulse reference run.
        #[arg(long, requires_all = ["reference_checkpoint", "reference_dataset"])]
        input_strength: bool,
        #[arg(long)]
        reference_checkpoint: Option<PathBuf>,
        #[arg(long)]
        reference_dataset: Option<PathBuf>,
        /// Posterior samples per trial (default from the model config).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        svg: bool,
    },
    /// Unconditioned draws from the generative model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0.01)]
        bin_width: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn generate_spec(
    kind: Kind,
    gamma: f64,
    pulsed: bool,
    conditions: Option<usize>,
    trials: Option<usize>,
    train: Option<usize>,
    steps: Option<usize>,
    neurons: Option<usize>,
) -> Result<DatasetSpec> {
    let mut spec = match kind {
        Kind::Lorenz if pulsed => return Err(ForgeError::Usage("--pulsed applies to rnn datasets only".into())),
        Kind::Lorenz => DatasetSpec::lorenz(),
        Kind::Rnn => DatasetSpec::rnn(gamma, pulsed),
    };
    if let Some(c) = conditions {
        spec.conditions = c;
    }
    if let Some(t) = trials {
        spec.trials_per_condition = t;
        if train.is_none() {
            spec.train_per_condition = (t * 4 / 5).max(1).min(t);
        }
    }
    if let Some(t) = train {
        spec.train_per_condition = t;
    }
    if let Some(s) = steps {
        spec.steps = s;
    }
    if let Some(n) = neurons {
        match &mut spec.system {
            System::Lorenz(p) => p.n_neurons = n,
            System::DataRnn(p) => p.n = n,
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    let threads = experiment::resolve_threads(cli.threads)?;
    match cli.command {
        Command::Generate {
            kind,
            seed,
            gamma,
            pulsed,
            conditions,
            trials_per_condition,
            train_per_condition,
            steps,
            neurons,
            out,
            force,
        } => {
            let spec = generate_spec(kind, gamma, pulsed, conditions, trials_per_condition, train_per_condition, steps, neurons)?;
            let ds = experiment::generate(&spec, seed, &out, force)?;
            println!(
                "wrote {}: {} trials x {} bins x {} neurons, latent dim {}, bin {} s, pulses {}",
                out.display(),
                ds.n_trials(),
                ds.steps(),
                ds.neurons(),
                ds.latent_dim(),
                ds.bin_width(),
                if ds.pulse_times.is_some() { "yes" } else { "no" }
            );
        }
        Command::Train {
            config,
            seed,
            dataset,
            out,
            max_epochs,
            resume,
        } => {
            let mut exp = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                exp.trainer.seed = s;
            }
            if let Some(d) = dataset {
                exp.dataset = d;
            }
            if let Some(o) = out {
                exp.output_dir = o;
            }
            if let Some(m) = max_epochs {
                exp.trainer.max_epochs = m;
            }
            let ds = read_dataset(&exp.dataset)?;
            let summary = experiment::train(&mut exp, &ds, threads, resume, |m| {
                println!(
                    "epoch {:>4} step {:>6} train {:.4} valid {:.4} lr {:.2e}{}",
                    m.epoch,
                    m.step,
                    m.train.total,
                    m.valid_total,
                    m.learning_rate,
                    if m.improved { " *" } else { "" }
                );
            })?;
            println!(
                "done after {} steps; best validation loss {} at epoch {}",
                summary.steps,
                summary.best_valid.map_or("NA".into(), |v| format!("{v:.4}")),
                summary.best_epoch.map_or("NA".into(), |e| e.to_string())
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            r2_latents,
            r2_rates,
            input_timing,
            input_strength,
            reference_checkpoint,
            reference_dataset,
            samples,
            seed,
            svg,
        } => {
            if !(r2_latents || r2_rates || input_timing || input_strength) {
                return Err(ForgeError::Usage(
                    "select at least one of --r2-latents, --r2-rates, --input-timing, --input-strength".into(),
                ));
            }
            let req = EvalRequest {
                r2_latents,
                r2_rates,
                input_timing,
                input_strength: if input_strength {
                    reference_checkpoint.zip(reference_dataset)
                } else {
                    None
                },
                samples,
                svg,
            };
            let ds = read_dataset(&dataset)?;
            let s = experiment::evaluate(&checkpoint, &ds, &out, &req, seed, threads)?;
            println!("{}", serde_json::to_string_pretty(&s).map_err(ForgeError::json("summary"))?);
        }
        Command::Sample {
            checkpoint,
            trials,
            steps,
            bin_width,
            seed,
            out,
        } => {
            experiment::sample(&checkpoint, trials, steps, seed, &out, bin_width)?;
            println!("wrote {} generated trials to {}", trials, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
