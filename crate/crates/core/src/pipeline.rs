//! End-to-end comparison run: phantoms, mask libraries, training of the
//! MANTIS and CNN-Only networks, low-rank and zero-filled baselines, and the
//! evaluation report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::container::save;
use crate::data::{normalize_dataset, ParamMaps};
use crate::encoding::undersample;
use crate::error::{Error, Result};
use crate::exec;
use crate::fit::{fit_pixelwise, FitConfig};
use crate::lowrank::{recon_glr, recon_llr, IstaSchedule, Lambda};
use crate::metrics::nrmse;
use crate::net::{AdamConfig, NetParams, NetSpec};
use crate::phantom::{make_phantom, synthesize_echoes, PhantomSpec, KNEE_TE_MS};
use crate::report::{make_report, write_previews, EvalCase, EvalReport, MethodKey};
use crate::rng::derive_seed;
use crate::sampling::{make_mask_library, make_maskset, MaskParams, MaskSet};
use crate::train::{infer, train, LossWeights, TrainCase, TrainConfig, TrainOutcome};

pub const METHODS: [&str; 5] = ["zf", "glr", "llr", "cnn-only", "mantis"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproProfile {
    pub name: String,
    pub seed: u64,
    pub ny: usize,
    pub nx: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Complex noise SD per channel relative to the phantom's peak I0 of 1.
    pub noise_sd: f64,
    pub rates: Vec<f64>,
    pub center_frac: f64,
    pub library_size: usize,
    pub net: NetSpec,
    pub train: TrainConfig,
    pub lambda_data: f64,
    pub lambda_cnn: f64,
    pub ista: IstaSchedule,
    pub fit: FitConfig,
    /// Acceleration at which mask-set robustness is probed.
    pub robustness_r: f64,
}

impl ReproProfile {
    /// Laptop-scale run: 64x64 phantoms at SNR 40, R = 5 and 8. Many cheap
    /// phantoms and few epochs: at this scale unique training data helps far
    /// more than repeated passes.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            seed: 2024,
            ny: 64,
            nx: 64,
            n_train: 96,
            n_val: 4,
            n_test: 6,
            noise_sd: 1.0 / 40.0,
            rates: vec![5.0, 8.0],
            center_frac: 0.05,
            library_size: 64,
            net: NetSpec::new(KNEE_TE_MS.len()),
            train: TrainConfig {
                loss: LossWeights::default(),
                adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
                batch: 3,
                epochs: 20,
            },
            lambda_data: 0.1,
            lambda_cnn: 1.0,
            ista: IstaSchedule::default(),
            fit: FitConfig::default(),
            robustness_r: 5.0,
        }
    }

    /// Seconds-scale run used by tests.
    pub fn smoke() -> Self {
        Self {
            name: "smoke".into(),
            ny: 32,
            nx: 32,
            n_train: 3,
            n_val: 1,
            n_test: 2,
            library_size: 4,
            net: NetSpec::new(KNEE_TE_MS.len()).with_levels(2).with_base_filters(4),
            train: TrainConfig { epochs: 2, ..Self::desk().train },
            center_frac: 0.1,
            ista: IstaSchedule { glr_iterations: 10, llr_init_iterations: 5, llr_iterations: 5, ..IstaSchedule::default() },
            ..Self::desk()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::invalid(format!("unknown profile '{other}' (expected desk or smoke)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::invalid("profile needs training, validation and test phantoms"));
        }
        if self.rates.is_empty() || !self.rates.contains(&self.robustness_r) {
            return Err(Error::invalid("robustness rate must be one of the profile's rates"));
        }
        self.net.validate()?;
        self.net.check_input(self.ny, self.nx)?;
        self.train.validate()?;
        self.ista.validate()
    }

    pub fn mask_params(&self, r: f64) -> MaskParams {
        MaskParams::new(self.ny, KNEE_TE_MS.len(), r).with_center_frac(self.center_frac)
    }
}

/// A synthesized phantom: fully sampled unit-peak echoes, the fit of those
/// echoes restricted to the object (the reference), and the tissue labels of
/// the ground truth.
#[derive(Debug, Clone)]
pub struct Subject {
    pub case: TrainCase,
    pub labels: Array2<u32>,
}

impl Subject {
    pub fn reference(&self) -> &ParamMaps {
        &self.case.reference
    }
}

pub fn make_subject(profile: &ReproProfile, seed: u64) -> Result<Subject> {
    let truth = make_phantom(&PhantomSpec::knee(profile.ny, profile.nx, seed))?;
    let series = synthesize_echoes(&truth, &KNEE_TE_MS, profile.noise_sd, seed)?;
    let (full, _) = normalize_dataset(&series)?;
    let labels = truth.roi_labels().clone();
    let reference = fit_pixelwise(&full, &profile.fit)?.masked_to(&labels)?;
    Ok(Subject { case: TrainCase { full, reference }, labels })
}

/// Seed offsets of the training, validation and test subjects.
pub const TRAIN_BASE: u64 = 1_000;
pub const VAL_BASE: u64 = 2_000;
pub const TEST_BASE: u64 = 3_000;

/// Subjects `base..base + n` of the profile's seed stream.
pub fn subjects(profile: &ReproProfile, base: u64, n: usize) -> Result<Vec<Subject>> {
    exec::map_range(n, |i| make_subject(profile, derive_seed(profile.seed, base + i as u64)))
        .into_iter()
        .collect()
}

/// Estimates of the non-learned methods for one subject and mask-set.
pub fn baseline_maps(subject: &Subject, masks: &MaskSet, profile: &ReproProfile) -> Result<BTreeMap<&'static str, ParamMaps>> {
    let (k, zf) = undersample(&subject.case.full, masks)?;
    let mut out = BTreeMap::new();
    out.insert("zf", fit_pixelwise(&zf, &profile.fit)?);
    out.insert("glr", fit_pixelwise(&recon_glr(&k, &profile.ista)?, &profile.fit)?);
    out.insert("llr", fit_pixelwise(&recon_llr(&k, &profile.ista)?, &profile.fit)?);
    Ok(out)
}

pub fn network_maps(params: &NetParams, subject: &Subject, masks: &MaskSet, profile: &ReproProfile) -> Result<ParamMaps> {
    let (_, zf) = undersample(&subject.case.full, masks)?;
    infer(params, &zf, Some(&subject.labels), profile.fit.threshold_frac)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Robustness {
    pub r: f64,
    pub mask_a_seed: u64,
    pub mask_b_seed: u64,
    pub nrmse_a: f64,
    pub nrmse_b: f64,
}

impl Robustness {
    /// `|a - b| / min(a, b)`.
    pub fn relative_difference(&self) -> f64 {
        (self.nrmse_a - self.nrmse_b).abs() / self.nrmse_a.min(self.nrmse_b)
    }
}

pub struct ReproOutcome {
    pub report: EvalReport,
    pub robustness: Robustness,
    pub histories: BTreeMap<MethodKey, TrainOutcome>,
    pub seconds: f64,
}

/// Training mask library at rate `r`.
pub fn mask_library(profile: &ReproProfile, r: f64) -> Result<Vec<MaskSet>> {
    make_mask_library(profile.library_size, &profile.mask_params(r), derive_seed(profile.seed, 4_000 + r as u64))
}

/// Unseen test mask for subject `i` at rate `r`, drawn from a seed stream
/// disjoint from the training library.
fn test_mask(profile: &ReproProfile, r: f64, i: usize) -> Result<MaskSet> {
    make_maskset(&profile.mask_params(r), derive_seed(profile.seed, 50_000 + (r * 100.0) as u64 * 1000 + i as u64))
}

fn mean_nrmse(estimates: &[ParamMaps], subjects: &[Subject]) -> Result<f64> {
    let mut total = 0.0;
    for (e, s) in estimates.iter().zip(subjects) {
        let r = s.reference();
        total += nrmse(e.t2_ms(), r.t2_ms(), r.roi_labels())?;
    }
    Ok(total / subjects.len() as f64)
}

/// Runs the full comparison. When `out_dir` is given, writes `report.csv`,
/// `robustness.csv`, per-network loss histories and parameters, and previews
/// of the first test subject.
pub fn run_repro(profile: &ReproProfile, out_dir: Option<&Path>) -> Result<ReproOutcome> {
    profile.validate()?;
    let start = Instant::now();
    let train_set = subjects(profile, TRAIN_BASE, profile.n_train)?;
    let val_set = subjects(profile, VAL_BASE, profile.n_val)?;
    let test_set = subjects(profile, TEST_BASE, profile.n_test)?;
    let train_cases: Vec<TrainCase> = train_set.iter().map(|s| s.case.clone()).collect();
    let val_cases: Vec<TrainCase> = val_set.iter().map(|s| s.case.clone()).collect();

    let mut estimates: Vec<BTreeMap<MethodKey, ParamMaps>> = vec![BTreeMap::new(); profile.n_test];
    let mut histories = BTreeMap::new();
    let mut robustness = None;
    for &r in &profile.rates {
        let library = mask_library(profile, r)?;
        let masks = (0..profile.n_test).map(|i| test_mask(profile, r, i)).collect::<Result<Vec<_>>>()?;

        let base = exec::map_range(profile.n_test, |i| baseline_maps(&test_set[i], &masks[i], profile));
        for (i, b) in base.into_iter().enumerate() {
            for (m, maps) in b? {
                estimates[i].insert(MethodKey::new(m, r), maps);
            }
        }

        for (method, lambda_data) in [("cnn-only", 0.0), ("mantis", profile.lambda_data)] {
            let cfg = TrainConfig {
                loss: LossWeights { lambda_data, lambda_cnn: profile.lambda_cnn, ..profile.train.loss },
                ..profile.train
            };
            // Both networks share the initialization and data order for a given R.
            let outcome = train(&cfg, &train_cases, &val_cases, &library, &profile.net, derive_seed(profile.seed, 7_000 + r as u64))?;
            if let Some(msg) = &outcome.diverged {
                return Err(Error::Diverged(format!("{method} at R={r}: {msg}")));
            }
            for (i, s) in test_set.iter().enumerate() {
                estimates[i].insert(MethodKey::new(method, r), network_maps(&outcome.params, s, &masks[i], profile)?);
            }
            if method == "mantis" && r == profile.robustness_r {
                robustness = Some(mask_robustness(&outcome.params, &test_set, &library, profile)?);
            }
            histories.insert(MethodKey::new(method, r), outcome);
        }
    }

    let cases = test_set
        .iter()
        .zip(estimates)
        .map(|(s, e)| Ok(EvalCase { reference: s.reference().clone(), estimates: e }))
        .collect::<Result<Vec<_>>>()?;
    let report = make_report(&cases)?;
    let robustness = robustness.expect("robustness rate validated against rates");

    if let Some(dir) = out_dir {
        write_outputs(dir, &report, &robustness, &histories, &cases[0])?;
    }
    Ok(ReproOutcome { report, robustness, histories, seconds: start.elapsed().as_secs_f64() })
}

/// Evaluates a trained network on two mask-sets that are not in its training
/// library, each applied to every test subject.
pub fn mask_robustness(params: &NetParams, test_set: &[Subject], library: &[MaskSet], profile: &ReproProfile) -> Result<Robustness> {
    let r = profile.robustness_r;
    let mut seeds = Vec::new();
    let mut sets = Vec::new();
    let mut k = 0u64;
    while sets.len() < 2 {
        let seed = derive_seed(profile.seed, 60_000 + k);
        k += 1;
        let m = make_maskset(&profile.mask_params(r), seed)?;
        let unseen = library.iter().all(|l| l.lines() != m.lines());
        let distinct = sets.iter().all(|s: &MaskSet| s.lines() != m.lines());
        if unseen && distinct {
            seeds.push(seed);
            sets.push(m);
        }
    }
    let mut scores = Vec::new();
    for m in &sets {
        let est = test_set.iter().map(|s| network_maps(params, s, m, profile)).collect::<Result<Vec<_>>>()?;
        scores.push(mean_nrmse(&est, test_set)?);
    }
    Ok(Robustness { r, mask_a_seed: seeds[0], mask_b_seed: seeds[1], nrmse_a: scores[0], nrmse_b: scores[1] })
}

fn write_outputs(
    dir: &Path,
    report: &EvalReport,
    robustness: &Robustness,
    histories: &BTreeMap<MethodKey, TrainOutcome>,
    first: &EvalCase,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let p = dir.join("report.csv");
    report.save_csv(&p)?;
    written.push(p);
    let p = dir.join("robustness.csv");
    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.serialize(robustness)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    written.push(p);
    for (key, outcome) in histories {
        let stem = format!("{}_r{}", key.method, key.r());
        let p = dir.join(format!("{stem}_history.csv"));
        outcome.history.save_csv(&p)?;
        written.push(p);
        let p = dir.join(format!("{stem}.qmt"));
        save(&p, &outcome.params)?;
        written.push(p);
    }
    let previews = dir.join("previews");
    std::fs::create_dir_all(&previews).map_err(|e| Error::io(&previews, e))?;
    written.extend(write_previews(&previews, "test0", first)?);
    Ok(written)
}

/// Picks the relative GLR weight minimizing T2 nRMSE on `subject` at `r`.
pub fn tune_glr(profile: &ReproProfile, subject: &Subject, r: f64, candidates: &[f64]) -> Result<(f64, Vec<f64>)> {
    let masks = make_maskset(&profile.mask_params(r), derive_seed(profile.seed, 90_000))?;
    let (k, _) = undersample(&subject.case.full, &masks)?;
    let reference = subject.reference();
    crate::lowrank::tune_glr_lambda(&k, candidates, |x| {
        let maps = fit_pixelwise(x, &profile.fit)?;
        nrmse(maps.t2_ms(), reference.t2_ms(), reference.roi_labels())
    })
}

impl ReproProfile {
    pub fn with_glr_lambda(mut self, rel: f64) -> Self {
        self.ista.lambda_glr = Lambda::RelativeToSigmaMax(rel);
        self
    }
}
