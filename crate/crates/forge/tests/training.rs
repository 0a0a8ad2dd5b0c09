mod common;

use lfads_core::synth::build_dataset;
use lfads_forge::checkpoint::Checkpoint;
use lfads_forge::trainer::{Trainer, TrainerConfig};

use common::*;

#[test]
fn resume_continues_bit_identically() {
    let ds = tiny_dataset(1);
    let model = tiny_model(&ds, 1);
    let mut full = Trainer::new(model.clone(), tiny_trainer(4), &ds, 1).unwrap();
    for _ in 0..5 {
        full.train_step().unwrap();
    }
    let bytes = full.snapshot().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes, "mem".as_ref(), Some(&model)).unwrap();
    let mut resumed = Trainer::resume(ck.model, ck.trainer, ck.params, ck.adam, ck.state, &ds, 1).unwrap();
    for _ in 0..10 {
        let a = full.train_step().unwrap();
        let b = resumed.train_step().unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(full.params, resumed.params);
    assert_eq!(full.adam, resumed.adam);
    assert_eq!(full.state, resumed.state);
}

#[test]
fn thread_count_does_not_change_results() {
    let ds = tiny_dataset(1);
    let model = tiny_model(&ds, 1);
    let mut one = Trainer::new(model.clone(), tiny_trainer(9), &ds, 1).unwrap();
    let mut four = Trainer::new(model, tiny_trainer(9), &ds, 4).unwrap();
    for _ in 0..50 {
        assert_eq!(one.train_step().unwrap(), four.train_step().unwrap());
    }
    assert_eq!(one.params, four.params);
    assert_eq!(one.validation_loss().unwrap().to_bits(), four.validation_loss().unwrap().to_bits());
}

#[test]
fn same_seed_same_run_different_seed_different_run() {
    let ds = tiny_dataset(1);
    let model = tiny_model(&ds, 0);
    let run = |seed| {
        let mut t = Trainer::new(model.clone(), tiny_trainer(seed), &ds, 1).unwrap();
        (0..5).map(|_| t.train_step().unwrap().loss.total).collect::<Vec<_>>()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = tiny_dataset(1);
    let mut cfg = tiny_trainer(0);
    cfg.adam.learning_rate = 0.0;
    let mut t = Trainer::new(tiny_model(&ds, 1), cfg, &ds, 1).unwrap();
    let before = t.params.clone();
    let loss_before = t.validation_loss().unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    assert_eq!(t.params, before);
    assert_eq!(t.validation_loss().unwrap().to_bits(), loss_before.to_bits());
}

#[test]
fn loss_on_a_single_trial_decreases() {
    let ds = build_dataset(&tiny_spec(1, 1, 1), 7).unwrap();
    let mut model = tiny_model(&ds, 0);
    model.kl.ramp_steps = 1;
    let cfg = TrainerConfig {
        batch_size: 1,
        ..tiny_trainer(0)
    };
    let mut t = Trainer::new(model, cfg, &ds, 1).unwrap();
    let mut epoch_losses = Vec::new();
    for _ in 0..200 {
        let out = t.train_step().unwrap();
        epoch_losses.push(out.epoch_end.unwrap().train.total);
    }
    let windows: Vec<f64> = epoch_losses.chunks(40).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn epochs_report_one_row_and_early_stopping_terminates() {
    let ds = tiny_dataset(1);
    let cfg = TrainerConfig {
        early_stop_patience: 2,
        lr_decay_patience: 1,
        max_epochs: 40,
        ..tiny_trainer(0)
    };
    let mut t = Trainer::new(tiny_model(&ds, 0), cfg, &ds, 1).unwrap();
    let mut epochs = Vec::new();
    while !t.state.stopped {
        epochs.push(t.train_epoch().unwrap());
    }
    assert!(epochs.len() <= 40);
    for (k, m) in epochs.iter().enumerate() {
        assert_eq!(m.epoch, k as u64);
        assert_eq!(m.csv_row().split(',').count(), lfads_forge::trainer::METRICS_HEADER.split(',').count());
    }
    let lrs: Vec<f64> = epochs.iter().map(|m| m.learning_rate).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn invalid_trainer_config_is_rejected() {
    let ds = tiny_dataset(1);
    let cfg = TrainerConfig {
        batch_size: 0,
        ..tiny_trainer(0)
    };
    assert!(Trainer::new(tiny_model(&ds, 0), cfg, &ds, 1).is_err());
    let mut model = tiny_model(&ds, 0);
    model.data_dim += 1;
    assert!(Trainer::new(model, tiny_trainer(0), &ds, 1).is_err());
}
