//! On-disk dataset container.
//!
//! ```text
//! <dir>/manifest.json   shapes, bin width, seed, generator parameters,
//!                       split and condition tables, pulse times
//! <dir>/spikes.bin      u16 LE, trials×T×D
//! <dir>/rates.bin       f64 LE, rows×T×D (spikes/s)
//! <dir>/latents.bin     f64 LE, rows×T×L
//! ```
//!
//! Rows are conditions, or trials for pulsed data.

use std::fs;
use std::path::Path;

use lfads_core::synth::{DatasetSpec, GroundTruthSystem, SpikeDataset, Split};
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

pub const FORMAT: &str = "lfads-forge-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub name: String,
    pub dtype: String,
    pub dims: Vec<usize>,
    pub axes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub n_trials: usize,
    pub steps: usize,
    pub neurons: usize,
    pub latent_dim: usize,
    pub bin_width: f64,
    pub files: Vec<TensorFile>,
    pub condition_of: Vec<usize>,
    pub split: Vec<Split>,
    pub pulse_times: Option<Vec<f64>>,
    pub truth_system: GroundTruthSystem,
}

impl Manifest {
    pub fn describe(ds: &SpikeDataset) -> Self {
        let (rows, t, d, l) = (ds.truth_rows(), ds.steps(), ds.neurons(), ds.latent_dim());
        let row_axis = if ds.truth_per_trial() { "trial" } else { "condition" };
        let file = |name: &str, dtype: &str, dims: Vec<usize>, axes: &[&str]| TensorFile {
            name: name.to_string(),
            dtype: dtype.to_string(),
            dims,
            axes: axes.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: ds.seed,
            spec: ds.spec.clone(),
            n_trials: ds.n_trials(),
            steps: t,
            neurons: d,
            latent_dim: l,
            bin_width: ds.bin_width(),
            files: vec![
                file("spikes.bin", "u16le", vec![ds.n_trials(), t, d], &["trial", "bin", "neuron"]),
                file("rates.bin", "f64le", vec![rows, t, d], &[row_axis, "bin", "neuron"]),
                file("latents.bin", "f64le", vec![rows, t, l], &[row_axis, "bin", "latent"]),
            ],
            condition_of: ds.condition_of.clone(),
            split: ds.split.clone(),
            pulse_times: ds.pulse_times.clone(),
            truth_system: ds.truth_system.clone(),
        }
    }
}

pub fn f64_to_le(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_le(bytes: &[u8]) -> Option<Vec<f64>> {
    bytes.len().is_multiple_of(8).then(|| {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(ForgeError::io(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(ForgeError::io(path))
}

/// Writes `ds` into `dir` (created if missing).
pub fn write_dataset(ds: &SpikeDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(ForgeError::io(dir))?;
    let manifest = Manifest::describe(ds);
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(ForgeError::json("manifest"))?;
    json.push(b'\n');
    write_file(&dir.join("manifest.json"), &json)?;
    let spikes: Vec<u8> = ds.spikes.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&dir.join("spikes.bin"), &spikes)?;
    write_file(&dir.join("rates.bin"), &f64_to_le(&ds.rates))?;
    write_file(&dir.join("latents.bin"), &f64_to_le(&ds.latents))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = read_file(&path)?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(ForgeError::json(path.display().to_string()))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(ForgeError::Format {
            path,
            reason: format!("unsupported dataset format {} v{}", m.format, m.version),
        });
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<SpikeDataset> {
    let m = read_manifest(dir)?;
    let bad = |name: &str, reason: String| ForgeError::Format {
        path: dir.join(name),
        reason,
    };
    let expect_len = |f: &TensorFile, elem: usize, got: usize| -> Result<()> {
        let want = f.dims.iter().product::<usize>() * elem;
        if want != got {
            return Err(bad(&f.name, format!("expected {want} bytes, found {got}")));
        }
        Ok(())
    };
    let names: Vec<&str> = m.files.iter().map(|f| f.name.as_str()).collect();
    if names != ["spikes.bin", "rates.bin", "latents.bin"] {
        return Err(bad("manifest.json", format!("unexpected tensor file list {names:?}")));
    }
    let spikes_raw = read_file(&dir.join("spikes.bin"))?;
    expect_len(&m.files[0], 2, spikes_raw.len())?;
    let spikes = spikes_raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let rates_raw = read_file(&dir.join("rates.bin"))?;
    expect_len(&m.files[1], 8, rates_raw.len())?;
    let latents_raw = read_file(&dir.join("latents.bin"))?;
    expect_len(&m.files[2], 8, latents_raw.len())?;
    let ds = SpikeDataset {
        spec: m.spec,
        seed: m.seed,
        truth_system: m.truth_system,
        spikes,
        rates: f64_from_le(&rates_raw).expect("length checked"),
        latents: f64_from_le(&latents_raw).expect("length checked"),
        pulse_times: m.pulse_times,
        condition_of: m.condition_of,
        split: m.split,
    };
    ds.validate()?;
    Ok(ds)
}
