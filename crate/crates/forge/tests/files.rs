mod common;

use std::fs;

use lfads_core::synth::build_dataset;
use lfads_forge::checkpoint::Checkpoint;
use lfads_forge::dataset_io::{read_dataset, write_dataset};
use lfads_forge::trainer::Trainer;
use lfads_forge::ForgeError;

use common::*;

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn dataset_round_trip_is_exact_and_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(3);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    write_dataset(&ds, &a).unwrap();
    let back = read_dataset(&a).unwrap();
    assert_eq!(back, ds);
    write_dataset(&back, &b).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    write_dataset(&tiny_dataset(3), &c).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn pulsed_dataset_round_trip_keeps_pulse_times() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = lfads_core::synth::DatasetSpec::rnn(2.5, true);
    spec.conditions = 3;
    spec.trials_per_condition = 2;
    spec.train_per_condition = 1;
    spec.steps = 10;
    let ds = build_dataset(&spec, 5).unwrap();
    write_dataset(&ds, tmp.path()).unwrap();
    let back = read_dataset(tmp.path()).unwrap();
    assert_eq!(back, ds);
    assert!((0..back.n_trials()).all(|i| back.pulse_time(i).is_some()));
}

#[test]
fn truncated_dataset_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tiny_dataset(3), tmp.path()).unwrap();
    let p = tmp.path().join("spikes.bin");
    let mut bytes = fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 2);
    fs::write(&p, bytes).unwrap();
    assert!(read_dataset(tmp.path()).is_err());
}

fn trained_checkpoint() -> Checkpoint {
    let ds = tiny_dataset(1);
    let mut t = Trainer::new(tiny_model(&ds, 1), tiny_trainer(2), &ds, 1).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    t.snapshot()
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained_checkpoint();
    let (a, b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    ck.save(&a).unwrap();
    let back = Checkpoint::load(&a, Some(&ck.model)).unwrap();
    assert_eq!(back, ck);
    back.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn checkpoint_with_other_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained_checkpoint();
    let p = tmp.path().join("a.ckpt");
    ck.save(&p).unwrap();
    let mut other = ck.model.clone();
    other.generator_dim += 1;
    assert!(matches!(Checkpoint::load(&p, Some(&other)), Err(ForgeError::ConfigMismatch { .. })));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("a.ckpt");
    trained_checkpoint().save(&p).unwrap();
    let good = fs::read(&p).unwrap();
    let mut flipped = good.clone();
    let k = flipped.len() - 40;
    flipped[k] ^= 0x10;
    fs::write(&p, &flipped).unwrap();
    assert!(matches!(Checkpoint::load(&p, None), Err(ForgeError::Format { .. })));
    fs::write(&p, &good[..good.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&p, None), Err(ForgeError::Format { .. })));
    fs::write(&p, b"not a checkpoint at all, just text").unwrap();
    assert!(matches!(Checkpoint::load(&p, None), Err(ForgeError::Format { .. })));
}
