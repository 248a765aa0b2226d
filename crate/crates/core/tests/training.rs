use std::time::Instant;

use qmt_core::data::normalize_dataset;
use qmt_core::encoding::undersample;
use qmt_core::fit::{fit_pixelwise, FitConfig};
use qmt_core::net::{init_params, AdamConfig, NetSpec};
use qmt_core::phantom::{make_phantom, synthesize_echoes, PhantomSpec, KNEE_TE_MS};
use qmt_core::rng::derive_seed;
use qmt_core::sampling::{make_mask_library, make_maskset, MaskParams, MaskSet};
use qmt_core::train::{infer, train, validation_loss, LossWeights, TrainCase, TrainConfig, TrainSample};

fn cases(n: usize, size: usize, base: u64) -> Vec<TrainCase> {
    (0..n as u64)
        .map(|i| {
            let truth = make_phantom(&PhantomSpec::knee(size, size, base + i)).unwrap();
            let s = synthesize_echoes(&truth, &KNEE_TE_MS, 1.0 / 40.0, base + i).unwrap();
            let (full, _) = normalize_dataset(&s).unwrap();
            let reference = fit_pixelwise(&full, &FitConfig::default()).unwrap().masked_to(truth.roi_labels()).unwrap();
            TrainCase { full, reference }
        })
        .collect()
}

fn library(size: usize, r: f64, n: usize) -> Vec<MaskSet> {
    make_mask_library(n, &MaskParams::new(size, 8, r).with_center_frac(0.1), 77).unwrap()
}

fn small_spec() -> NetSpec {
    NetSpec::new(8).with_levels(2).with_base_filters(4)
}

fn cfg(loss: LossWeights, epochs: usize) -> TrainConfig {
    TrainConfig { loss, adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, batch: 3, epochs }
}

#[test]
fn two_hundred_iterations_halve_the_training_loss() {
    let train_set = cases(8, 64, 100);
    let val_set = cases(2, 64, 200);
    let lib = make_mask_library(16, &MaskParams::new(64, 8, 5.0), 5).unwrap();
    let spec = NetSpec::new(8).with_base_filters(8);
    // 8 cases in batches of 3 is 3 iterations per epoch.
    let out = train(&cfg(LossWeights::default(), 67), &train_set, &val_set, &lib, &spec, 1).unwrap();
    assert!(out.diverged.is_none());
    assert!(out.history.iterations.len() >= 200);
    let e = &out.history.epochs;
    let (first, last) = (e[0].train_loss, e[e.len() - 1].train_loss);
    assert!(last < 0.5 * first, "train loss {first} -> {last}");
}

#[test]
fn training_is_deterministic_and_keeps_the_best_snapshot() {
    let (train_set, val_set, lib) = (cases(4, 32, 300), cases(2, 32, 400), library(32, 4.0, 4));
    let c = cfg(LossWeights::default(), 4);
    let a = train(&c, &train_set, &val_set, &lib, &small_spec(), 9).unwrap();
    let b = train(&c, &train_set, &val_set, &lib, &small_spec(), 9).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params.theta, b.params.theta);

    let val: Vec<TrainSample> = val_set
        .iter()
        .enumerate()
        .map(|(i, v)| TrainSample::from_full(&v.full, &v.reference, &lib[i % lib.len()]).unwrap())
        .collect();
    let best = validation_loss(&a.params, &val, &c.loss).unwrap();
    for e in &a.history.epochs {
        assert!(best <= e.val_loss, "best {best} vs epoch {} {}", e.epoch, e.val_loss);
    }
    assert_eq!(best, a.history.epochs[a.history.best_epoch.unwrap()].val_loss);
}

#[test]
fn zero_data_weight_follows_the_cnn_only_trajectory() {
    let (train_set, val_set, lib) = (cases(4, 32, 500), cases(1, 32, 600), library(32, 4.0, 4));
    let mantis_path = LossWeights { lambda_data: 0.0, ..LossWeights::default() };
    let a = train(&cfg(mantis_path, 3), &train_set, &val_set, &lib, &small_spec(), 3).unwrap();
    let b = train(&cfg(LossWeights::cnn_only(), 3), &train_set, &val_set, &lib, &small_spec(), 3).unwrap();
    assert_eq!(a.history, b.history);
    assert!(a.history.iterations.iter().all(|r| r.loss1 == 0.0));
}

#[test]
fn zero_objective_leaves_parameters_unchanged() {
    let (train_set, val_set, lib) = (cases(3, 32, 700), cases(1, 32, 800), library(32, 4.0, 2));
    let zero = LossWeights { lambda_data: 0.0, lambda_cnn: 0.0, ..LossWeights::default() };
    let out = train(&cfg(zero, 3), &train_set, &val_set, &lib, &small_spec(), 4).unwrap();
    let init = init_params(&small_spec(), derive_seed(4, 0)).unwrap();
    assert_eq!(out.params.theta, init.theta);
}

#[test]
fn inference_on_one_slice_is_fast_and_repeatable() {
    let params = init_params(&NetSpec::new(8), 1).unwrap();
    let c = &cases(1, 64, 900)[0];
    let masks = make_maskset(&MaskParams::new(64, 8, 5.0), 2).unwrap();
    let (_, zf) = undersample(&c.full, &masks).unwrap();
    let _ = infer(&params, &zf, None, 0.02).unwrap();
    let start = Instant::now();
    let a = infer(&params, &zf, None, 0.02).unwrap();
    let took = start.elapsed();
    assert!(took.as_secs_f64() < 1.0, "{took:?}");
    assert_eq!(a.dim(), (64, 64));
    assert_eq!(a, infer(&params, &zf, None, 0.02).unwrap());
}
