//! `qmt`: command-line front end for the T2 mapping toolkit.
//!
//! Every subcommand is a pure function of its flags and seed. Each run writes
//! a JSON config echo next to its primary output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use qmt_core::container::{load, save};
use qmt_core::data::{normalize_dataset, EchoSeries, KSpaceSet, ParamMaps};
use qmt_core::encoding::{operator_for, undersample};
use qmt_core::error::{Error, ErrorKind, Result};
use qmt_core::fit::{fit_pixelwise, FitConfig};
use qmt_core::lowrank::{recon_glr, recon_llr, IstaSchedule, Lambda, DEFAULT_GLR_LAMBDA_REL};
use qmt_core::metrics::{nrmse, ssim};
use qmt_core::net::{AdamConfig, NetParams, NetSpec};
use qmt_core::phantom::{make_phantom, synthesize_echoes, PhantomSpec, KNEE_TE_MS};
use qmt_core::pipeline::{mask_library, subjects, ReproProfile, METHODS, TRAIN_BASE, VAL_BASE};
use qmt_core::report::{make_report, write_previews, EvalCase, MethodKey};
use qmt_core::rng::derive_seed;
use qmt_core::sampling::{make_mask_library, MaskParams, MaskSet, DEFAULT_ALPHA, DEFAULT_CENTER_FRAC};
use qmt_core::train::{infer, train, LossWeights, TrainCase, TrainConfig};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (bad flag or value, shape mismatch between inputs)
  3  I/O error (missing or malformed file)
  4  numeric failure (training diverged, degenerate data)

Environment:
  QMT_THREADS  maximum number of worker threads";

#[derive(Parser, Debug)]
#[command(name = "qmt", version, about = "Accelerated T2 mapping from undersampled multi-echo k-space")]
#[command(after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a knee-like ground-truth phantom (maps container).
    Phantom(PhantomArgs),
    /// Draw a library of ky-t variable-density mask-sets.
    Mask(MaskArgs),
    /// Synthesize noisy multi-echo data and undersample it with one mask-set.
    Simulate(SimulateArgs),
    /// Reconstruct echo images from undersampled k-space.
    Recon(ReconArgs),
    /// Pixelwise mono-exponential fit of an echo series.
    Fit(FitArgs),
    /// Train a MANTIS (or CNN-Only, with --lambda-data 0) network on phantoms.
    Train(TrainArgs),
    /// Estimate maps from undersampled k-space with a trained network.
    Infer(InferArgs),
    /// Compare estimated maps against a reference and write a CSV report.
    Eval(EvalArgs),
    /// Run the full method comparison for a named profile.
    Repro(ReproArgs),
}

#[derive(Args, Debug, Serialize)]
struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    ny: usize,
    #[arg(long, default_value_t = 64)]
    nx: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of objects placed inside the outer tissue.
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long, default_value = "phantom.qmt")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct MaskArgs {
    #[arg(long, default_value_t = 64)]
    ny: usize,
    #[arg(long, default_value_t = KNEE_TE_MS.len())]
    echoes: usize,
    /// Target acceleration.
    #[arg(long, default_value_t = 5.0)]
    r: f64,
    #[arg(long, default_value_t = DEFAULT_CENTER_FRAC)]
    center_frac: f64,
    /// Density decay exponent.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Number of mask-sets in the library.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "masks.qmt")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Ground-truth maps container.
    #[arg(long)]
    maps: PathBuf,
    /// Mask library container.
    #[arg(long)]
    masks: PathBuf,
    /// Which mask-set of the library to use.
    #[arg(long, default_value_t = 0)]
    mask_index: usize,
    /// Echo times in ms.
    #[arg(long, value_delimiter = ',', default_values_t = KNEE_TE_MS.to_vec())]
    te: Vec<f64>,
    /// Complex noise SD per channel, relative to a peak I0 of 1.
    #[arg(long, default_value_t = 1.0 / 40.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Undersampled k-space output.
    #[arg(long, default_value = "kspace.qmt")]
    out: PathBuf,
    /// Also write the fully sampled unit-peak echoes.
    #[arg(long)]
    out_full: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Zf,
    Glr,
    Llr,
}

#[derive(Args, Debug, Serialize)]
struct ReconArgs {
    #[arg(long)]
    kspace: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Zf)]
    method: Method,
    /// GLR weight as a fraction of the largest singular value of the
    /// zero-filled Casorati matrix. LLR uses half of it.
    #[arg(long, default_value_t = DEFAULT_GLR_LAMBDA_REL)]
    lambda: f64,
    /// ISTA iterations (GLR iterations, or LLR iterations after the GLR warm start).
    #[arg(long)]
    iters: Option<usize>,
    /// LLR block size and stride.
    #[arg(long, default_value_t = 8)]
    block: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, default_value = "echoes.qmt")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    /// Echo series container.
    #[arg(long)]
    echoes: PathBuf,
    /// Background threshold as a fraction of the peak mean magnitude.
    #[arg(long, default_value_t = FitConfig::default().threshold_frac)]
    threshold: f64,
    #[arg(long, default_value_t = FitConfig::default().max_iterations)]
    max_iters: usize,
    /// Take the region labels from this maps container instead of
    /// thresholding; the maps are cleared outside that region.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "maps.qmt")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Acceleration of the training masks.
    #[arg(long, default_value_t = 5.0)]
    r: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_data: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_cnn: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mask library container; drawn from the seed when absent.
    #[arg(long)]
    mask_lib: Option<PathBuf>,
    /// Size of the generated mask library.
    #[arg(long, default_value_t = 64)]
    library_size: usize,
    #[arg(long, default_value_t = DEFAULT_CENTER_FRAC)]
    center_frac: f64,
    #[arg(long, default_value_t = 64)]
    ny: usize,
    #[arg(long, default_value_t = 64)]
    nx: usize,
    #[arg(long, default_value_t = 96)]
    n_train: usize,
    #[arg(long, default_value_t = 4)]
    n_val: usize,
    #[arg(long, default_value_t = 1.0 / 40.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 16)]
    base_filters: usize,
    /// Parameters output; the loss history goes to `<out>.history.csv`.
    #[arg(long, default_value = "net.qmt")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    kspace: PathBuf,
    /// Take the region labels from this maps container.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = FitConfig::default().threshold_frac)]
    threshold: f64,
    #[arg(long, default_value = "maps.qmt")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Reference maps; its labels define the regions.
    #[arg(long)]
    reference: PathBuf,
    /// `method=path` or `method@R=path`, repeatable.
    #[arg(long = "estimate", required = true)]
    estimates: Vec<String>,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Directory for T2 and residual previews (PGM).
    #[arg(long)]
    previews: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ReproArgs {
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Override the profile's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "repro-out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("qmt: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qmt: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Io => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("QMT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid(format!("QMT_THREADS must be a positive integer, got '{raw}'")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom(a) => cmd_phantom(&a),
        Command::Mask(a) => cmd_mask(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Recon(a) => cmd_recon(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Repro(a) => cmd_repro(&a),
    }
}

/// `<out>.config.json`
fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn write_echo(path: &Path, command: &str, args: &impl Serialize, resolved: Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "resolved": resolved,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("config echo serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec { n_objects: a.objects, ..PhantomSpec::knee(a.ny, a.nx, a.seed) };
    let maps = make_phantom(&spec)?;
    save(&a.out, &maps)?;
    let tissues: Vec<Value> = spec
        .tissues
        .iter()
        .map(|t| json!({"label": t.label, "name": t.name, "t2_mean_ms": t.t2_mean_ms, "t2_sd_ms": t.t2_sd_ms}))
        .collect();
    write_echo(&echo_path(&a.out), "phantom", a, json!({ "tissues": tissues }))
}

fn cmd_mask(a: &MaskArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::invalid("--count must be at least 1"));
    }
    let params = MaskParams::new(a.ny, a.echoes, a.r).with_center_frac(a.center_frac).with_alpha(a.alpha);
    let library = make_mask_library(a.count, &params, a.seed)?;
    save(&a.out, &library)?;
    let seeds: Vec<u64> = library.iter().map(MaskSet::seed).collect();
    let resolved = json!({
        "center_lines": params.center_lines(),
        "lines_per_echo": params.budget(),
        "set_seeds": seeds,
    });
    write_echo(&echo_path(&a.out), "mask", a, resolved)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let truth: ParamMaps = load(&a.maps)?;
    let library: Vec<MaskSet> = load(&a.masks)?;
    let masks = library
        .get(a.mask_index)
        .ok_or_else(|| Error::invalid(format!("mask index {} out of range (library has {})", a.mask_index, library.len())))?;
    if masks.echoes() != a.te.len() {
        return Err(Error::shape(format!("mask-set has {} echoes but {} TEs were given", masks.echoes(), a.te.len())));
    }
    let series = synthesize_echoes(&truth, &a.te, a.noise_sd, a.seed)?;
    let (full, scale) = normalize_dataset(&series)?;
    let (k, _) = undersample(&full, masks)?;
    save(&a.out, &k)?;
    if let Some(p) = &a.out_full {
        save(p, &full)?;
    }
    let resolved = json!({ "scale": scale, "mask_seed": masks.seed(), "lines_per_echo": masks.lines_per_echo() });
    write_echo(&echo_path(&a.out), "simulate", a, resolved)
}

fn cmd_recon(a: &ReconArgs) -> Result<()> {
    let k: KSpaceSet = load(&a.kspace)?;
    let defaults = IstaSchedule::default();
    let sched = IstaSchedule {
        lambda_glr: Lambda::RelativeToSigmaMax(a.lambda),
        glr_iterations: match a.method {
            Method::Glr => a.iters.unwrap_or(defaults.glr_iterations),
            _ => defaults.glr_iterations,
        },
        llr_iterations: match a.method {
            Method::Llr => a.iters.unwrap_or(defaults.llr_iterations),
            _ => defaults.llr_iterations,
        },
        block: a.block,
        stride: a.stride,
        ..defaults
    };
    sched.validate()?;
    let echoes = match a.method {
        Method::Zf => operator_for(&k)?.adjoint(&k)?,
        Method::Glr => recon_glr(&k, &sched)?,
        Method::Llr => recon_llr(&k, &sched)?,
    };
    save(&a.out, &echoes)?;
    let resolved = match a.method {
        Method::Zf => json!({}),
        _ => serde_json::to_value(sched).expect("schedule serializes"),
    };
    write_echo(&echo_path(&a.out), "recon", a, json!({ "ista": resolved }))
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let series: EchoSeries = load(&a.echoes)?;
    let cfg = FitConfig { threshold_frac: a.threshold, max_iterations: a.max_iters, ..FitConfig::default() };
    let mut maps = fit_pixelwise(&series, &cfg)?;
    if let Some(p) = &a.labels {
        let source: ParamMaps = load(p)?;
        maps = maps.masked_to(source.roi_labels())?;
    }
    save(&a.out, &maps)?;
    write_echo(&echo_path(&a.out), "fit", a, json!({ "fit": cfg }))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let base = ReproProfile::desk();
    let profile = ReproProfile {
        name: "train".into(),
        seed: a.seed,
        ny: a.ny,
        nx: a.nx,
        n_train: a.n_train,
        n_val: a.n_val,
        noise_sd: a.noise_sd,
        rates: vec![a.r],
        robustness_r: a.r,
        center_frac: a.center_frac,
        library_size: a.library_size,
        net: NetSpec::new(KNEE_TE_MS.len()).with_levels(a.levels).with_base_filters(a.base_filters),
        train: TrainConfig {
            loss: LossWeights { lambda_data: a.lambda_data, lambda_cnn: a.lambda_cnn, ..LossWeights::default() },
            adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
            batch: a.batch,
            epochs: a.epochs,
        },
        lambda_data: a.lambda_data,
        lambda_cnn: a.lambda_cnn,
        ..base
    };
    profile.validate()?;
    let library = match &a.mask_lib {
        Some(p) => {
            let lib: Vec<MaskSet> = load(p)?;
            if lib.iter().any(|m| m.ny() != a.ny || m.echoes() != KNEE_TE_MS.len()) {
                return Err(Error::shape(format!("mask library must be {} echoes x {} lines", KNEE_TE_MS.len(), a.ny)));
            }
            lib
        }
        None => mask_library(&profile, a.r)?,
    };
    let cases = |base, n| -> Result<Vec<TrainCase>> {
        Ok(subjects(&profile, base, n)?.into_iter().map(|s| s.case).collect())
    };
    let train_set = cases(TRAIN_BASE, a.n_train)?;
    let val_set = cases(VAL_BASE, a.n_val)?;
    let outcome = train(&profile.train, &train_set, &val_set, &library, &profile.net, derive_seed(a.seed, 7_000 + a.r as u64))?;

    let mut history = a.out.as_os_str().to_owned();
    history.push(".history.csv");
    outcome.history.save_csv(PathBuf::from(history))?;
    let resolved = json!({
        "net": profile.net,
        "n_params": outcome.params.len(),
        "train": profile.train,
        "library_size": library.len(),
        "best_epoch": outcome.history.best_epoch,
        "diverged": outcome.diverged,
    });
    write_echo(&echo_path(&a.out), "train", a, resolved)?;
    if let Some(msg) = outcome.diverged {
        return Err(Error::Diverged(msg));
    }
    save(&a.out, &outcome.params)?;
    if let (Some(e), Some(best)) = (outcome.history.epochs.last(), outcome.history.best_epoch) {
        println!("epochs {} best {best} val loss {:.6}", e.epoch + 1, outcome.history.epochs[best].val_loss);
    }
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let params: NetParams = load(&a.params)?;
    let k: KSpaceSet = load(&a.kspace)?;
    let zf = operator_for(&k)?.adjoint(&k)?;
    let labels = a.labels.as_ref().map(load::<ParamMaps>).transpose()?;
    let maps = infer(&params, &zf, labels.as_ref().map(ParamMaps::roi_labels), a.threshold)?;
    save(&a.out, &maps)?;
    write_echo(&echo_path(&a.out), "infer", a, json!({ "net": params.spec() }))
}

/// `method=path` or `method@R=path`; R defaults to 1.
fn parse_estimate(s: &str) -> Result<(MethodKey, PathBuf)> {
    let (key, path) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("--estimate '{s}' is not method=path")))?;
    let (method, r) = match key.split_once('@') {
        Some((m, r)) => (m, r.parse::<f64>().map_err(|_| Error::invalid(format!("bad rate in '{key}'")))?),
        None => (key, 1.0),
    };
    if method.is_empty() || path.is_empty() {
        return Err(Error::invalid(format!("--estimate '{s}' is not method=path")));
    }
    Ok((MethodKey::new(method, r), PathBuf::from(path)))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let parsed = a.estimates.iter().map(|s| parse_estimate(s)).collect::<Result<Vec<_>>>()?;
    let reference: ParamMaps = load(&a.reference)?;
    let mut case = EvalCase { reference, estimates: Default::default() };
    for (key, path) in parsed {
        let est: ParamMaps = load(&path)?;
        if est.dim() != case.reference.dim() {
            return Err(Error::shape(format!("{} is {:?}, reference is {:?}", path.display(), est.dim(), case.reference.dim())));
        }
        if case.estimates.insert(key.clone(), est).is_some() {
            return Err(Error::invalid(format!("duplicate estimate {}@{}", key.method, key.r())));
        }
    }
    let report = make_report(std::slice::from_ref(&case))?;
    report.save_csv(&a.out)?;
    if let Some(dir) = &a.previews {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_previews(dir, "eval", &case)?;
    }
    let r = &case.reference;
    for (key, est) in &case.estimates {
        let e = nrmse(est.t2_ms(), r.t2_ms(), r.roi_labels())?;
        let s = ssim(est.t2_ms(), r.t2_ms(), r.roi_labels())?;
        println!("{:<10} R={:<4} T2 nRMSE {:6.2}%  SSIM {:.2}", key.method, key.r(), e, s);
    }
    write_echo(&echo_path(&a.out), "eval", a, json!({ "rows": report.rows.len() }))
}

fn cmd_repro(a: &ReproArgs) -> Result<()> {
    let mut profile = ReproProfile::by_name(&a.profile)?;
    if let Some(s) = a.seed {
        profile.seed = s;
    }
    profile.validate()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_echo(&a.out.join("config.json"), "repro", a, json!({ "profile": profile }))?;
    let outcome = qmt_core::pipeline::run_repro(&profile, Some(&a.out))?;
    println!("{:<10} {:>4} {:>10} {:>8}", "method", "R", "nRMSE %", "SSIM %");
    for &r in &profile.rates {
        for m in METHODS {
            let (Some(e), Some(s)) = (outcome.report.get(m, r, "nrmse", "all"), outcome.report.get(m, r, "ssim", "all")) else {
                continue;
            };
            println!("{m:<10} {r:>4} {:>10.2} {:>8.2}", e.value, s.value);
        }
    }
    let rb = &outcome.robustness;
    println!(
        "mask robustness at R={}: {:.2}% vs {:.2}% (relative difference {:.3})",
        rb.r,
        rb.nrmse_a,
        rb.nrmse_b,
        rb.relative_difference()
    );
    eprintln!("wall clock {:.0} s", outcome.seconds);
    Ok(())
}
