//! MANTIS objective, sampling-augmented training and inference.
//!
//! The network's second output channel is T2 in units of [`T2_SCALE_MS`].
//! Inside the loss both outputs pass through C1 exponential soft bounds so
//! the gradient is defined everywhere; inference applies hard clamps.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EchoSeries, KSpaceSet, ParamMaps, T2_MAX_MS, T2_MIN_MS};
use crate::encoding::EncodingOp;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::DecayModel;
use crate::net::{adam_step, backward_net, forward_net, init_params, AdamConfig, Mode, NetParams, NetSpec, Tape};
use crate::rng::{derive_seed, rng};
use crate::sampling::MaskSet;

pub const T2_SCALE_MS: f64 = 100.0;
/// Width of the soft lower bound on I0 (normalized intensity units).
pub const I0_SOFT_MARGIN: f64 = 0.01;
/// Width of the soft bounds on T2 in ms.
pub const T2_SOFT_MARGIN_MS: f64 = T2_MIN_MS / 2.0;

/// Identity at or above `lo`; below it saturates as
/// `lo - m (1 - exp((x - lo) / m))`, so the result stays above `lo - m`.
/// Returns value and derivative.
pub fn soft_floor(x: f64, lo: f64, m: f64) -> (f64, f64) {
    if x >= lo {
        (x, 1.0)
    } else {
        let e = ((x - lo) / m).exp();
        (lo - m * (1.0 - e), e)
    }
}

/// Mirror image of [`soft_floor`] at an upper bound.
pub fn soft_ceil(x: f64, hi: f64, m: f64) -> (f64, f64) {
    let (v, d) = soft_floor(-x, -hi, m);
    (-v, d)
}

fn soft_i0(raw: f64) -> (f64, f64) {
    soft_floor(raw, 0.0, I0_SOFT_MARGIN)
}

fn soft_t2(raw: f64) -> (f64, f64) {
    let ms = raw * T2_SCALE_MS;
    let (a, da) = soft_floor(ms, T2_MIN_MS, T2_SOFT_MARGIN_MS);
    let (b, db) = soft_ceil(a, T2_MAX_MS, T2_SOFT_MARGIN_MS);
    (b, da * db * T2_SCALE_MS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss2Form {
    /// Mean over pixels of the squared error.
    SquaredL2,
    /// Square root of the above.
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_data: f64,
    pub lambda_cnn: f64,
    /// Relative weight of the T2 term (after scaling by `T2_SCALE_MS`).
    pub t2_weight: f64,
    pub loss2_form: Loss2Form,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_data: 0.1, lambda_cnn: 1.0, t2_weight: 1.0, loss2_form: Loss2Form::SquaredL2 }
    }
}

impl LossWeights {
    pub fn cnn_only() -> Self {
        Self { lambda_data: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_data", self.lambda_data), ("lambda_cnn", self.lambda_cnn), ("t2_weight", self.t2_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// One training example: network input, measurements and reference maps, all
/// on the same intensity scale.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// Zero-filled echo magnitudes `[t, ny, nx]`, unit peak.
    pub input: Array3<f64>,
    pub kspace: KSpaceSet,
    pub reference: ParamMaps,
}

impl TrainSample {
    /// Undersamples a fully sampled series with `masks` and rescales input,
    /// measurements and reference I0 so the zero-filled magnitudes peak at 1.
    pub fn from_full(full: &EchoSeries, reference: &ParamMaps, masks: &MaskSet) -> Result<Self> {
        if reference.dim() != (full.ny(), full.nx()) {
            return Err(Error::shape("reference maps and echo series differ in size"));
        }
        let op = EncodingOp::new(full.ny(), full.nx(), masks.clone())?;
        let k = op.forward_array(full.data())?;
        let zf = op.adjoint_array(&k)?;
        let peak = zf.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::DegenerateDataset);
        }
        let s = 1.0 / peak;
        let kspace = KSpaceSet::new(full.te_ms().to_vec(), k.mapv(|v| v * s), masks.clone())?;
        let reference = ParamMaps::new(
            reference.i0().mapv(|v| v * s),
            reference.t2_ms().clone(),
            reference.roi_labels().clone(),
        )?;
        Ok(Self { input: zf.mapv(|v| v.norm() * s), kspace, reference })
    }
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub total: f64,
    pub loss1: f64,
    pub loss2: f64,
    /// Gradient of `total` with respect to the raw network output.
    pub grad: Array3<f64>,
}

/// Evaluates `lambda_data * loss1 + lambda_cnn * loss2` for one raw network
/// output `[2, ny, nx]`.
///
/// `loss1 = sum_j ||M_j F s_j - d_j||^2 / (ny nx)` with `s_j` synthesized
/// from the soft-bounded maps; `loss2` compares the same maps with the
/// reference, also averaged over pixels, so the weights do not depend on the
/// matrix size.
pub fn loss_mantis(output: &Array3<f64>, sample: &TrainSample, w: &LossWeights) -> Result<LossEval> {
    let (t, ny, nx) = sample.input.dim();
    if output.dim() != (2, ny, nx) {
        return Err(Error::shape(format!("network output {:?} is not [2, {ny}, {nx}]", output.dim())));
    }
    let npx = (ny * nx) as f64;
    let mut i0 = Array2::zeros((ny, nx));
    let mut di0 = Array2::zeros((ny, nx));
    let mut t2 = Array2::zeros((ny, nx));
    let mut dt2 = Array2::zeros((ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            (i0[[y, x]], di0[[y, x]]) = soft_i0(output[[0, y, x]]);
            (t2[[y, x]], dt2[[y, x]]) = soft_t2(output[[1, y, x]]);
        }
    }
    // Gradients w.r.t. the bounded maps, chained through the bounds at the end.
    let mut g_i0 = Array2::<f64>::zeros((ny, nx));
    let mut g_t2 = Array2::<f64>::zeros((ny, nx));

    let mut loss2 = 0.0;
    if w.lambda_cnn > 0.0 {
        let r_i0 = sample.reference.i0();
        let r_t2 = sample.reference.t2_ms();
        let tw = w.t2_weight / (T2_SCALE_MS * T2_SCALE_MS);
        let mut sq = 0.0;
        for ((&a, &b), (&c, &d)) in i0.iter().zip(r_i0.iter()).zip(t2.iter().zip(r_t2.iter())) {
            sq += (a - b) * (a - b) + tw * (c - d) * (c - d);
        }
        let mean = sq / npx;
        let (value, scale) = match w.loss2_form {
            Loss2Form::SquaredL2 => (mean, 1.0),
            Loss2Form::Rms => {
                let r = mean.sqrt();
                (r, if r > 0.0 { 0.5 / r } else { 0.0 })
            }
        };
        loss2 = value;
        let c = w.lambda_cnn * scale * 2.0 / npx;
        ndarray::Zip::from(&mut g_i0).and(&i0).and(r_i0).for_each(|g, &a, &b| *g += c * (a - b));
        ndarray::Zip::from(&mut g_t2).and(&t2).and(r_t2).for_each(|g, &a, &b| *g += c * tw * (a - b));
    }

    let mut loss1 = 0.0;
    if w.lambda_data > 0.0 {
        let model = DecayModel::new(sample.kspace.te_ms()).with_floor(T2_MIN_MS - T2_SOFT_MARGIN_MS);
        if model.echoes() != t {
            return Err(Error::shape("echo count of input and measurements differ"));
        }
        let mut s = Array3::<Complex64>::zeros((t, ny, nx));
        let mut sig = vec![0.0; t];
        for y in 0..ny {
            for x in 0..nx {
                model.signal_into(i0[[y, x]], t2[[y, x]], &mut sig);
                for j in 0..t {
                    s[[j, y, x]] = Complex64::new(sig[j], 0.0);
                }
            }
        }
        let op = EncodingOp::new(ny, nx, sample.kspace.masks().clone())?;
        let mut r = op.forward_array(&s)?;
        r -= sample.kspace.data();
        loss1 = r.iter().map(|v| v.norm_sqr()).sum::<f64>() / npx;
        let back = op.adjoint_array(&r)?;
        let (mut da, mut db) = (vec![0.0; t], vec![0.0; t]);
        let c = 2.0 * w.lambda_data / npx;
        for y in 0..ny {
            for x in 0..nx {
                model.jacobian_into(i0[[y, x]], t2[[y, x]], &mut da, &mut db);
                let (mut ga, mut gb) = (0.0, 0.0);
                for j in 0..t {
                    let g = back[[j, y, x]].re;
                    ga += g * da[j];
                    gb += g * db[j];
                }
                g_i0[[y, x]] += c * ga;
                g_t2[[y, x]] += c * gb;
            }
        }
    }
    if !loss1.is_finite() {
        return Err(Error::Diverged(format!("data-consistency loss is {loss1}")));
    }
    if !loss2.is_finite() {
        return Err(Error::Diverged(format!("mapping loss is {loss2}")));
    }
    let mut grad = Array3::zeros((2, ny, nx));
    ndarray::Zip::from(grad.index_axis_mut(Axis(0), 0)).and(&g_i0).and(&di0).for_each(|o, &g, &d| *o = g * d);
    ndarray::Zip::from(grad.index_axis_mut(Axis(0), 1)).and(&g_t2).and(&dt2).for_each(|o, &g, &d| *o = g * d);
    Ok(LossEval { total: w.lambda_data * loss1 + w.lambda_cnn * loss2, loss1, loss2, grad })
}

/// A fully sampled training or validation case: unit-peak echoes and the
/// maps fitted from them.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub full: EchoSeries,
    pub reference: ParamMaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { loss: LossWeights::default(), adam: AdamConfig::default(), batch: 3, epochs: 50 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub mask_index: usize,
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl LossHistory {
    /// Writes `kind,epoch,iteration,mask,loss,loss1,loss2` rows: one per
    /// iteration (`train`) and one per epoch (`epoch_train`, `epoch_val`).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "epoch", "iteration", "mask", "loss", "loss1", "loss2"])?;
        for r in &self.iterations {
            w.write_record([
                "train".to_string(),
                r.epoch.to_string(),
                r.iteration.to_string(),
                r.mask_index.to_string(),
                r.loss.to_string(),
                r.loss1.to_string(),
                r.loss2.to_string(),
            ])?;
        }
        for e in &self.epochs {
            for (kind, v) in [("epoch_train", e.train_loss), ("epoch_val", e.val_loss)] {
                w.write_record([kind.to_string(), e.epoch.to_string(), String::new(), String::new(), v.to_string(), String::new(), String::new()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss.
    pub params: NetParams,
    pub history: LossHistory,
    /// Set when training stopped on a non-finite loss or update.
    pub diverged: Option<String>,
}

fn batch_loss(params: &NetParams, samples: &[TrainSample], w: &LossWeights, mode: Mode) -> Result<(Vec<LossEval>, Tape)> {
    let inputs: Vec<Array3<f64>> = samples.iter().map(|s| s.input.clone()).collect();
    let (outs, tape) = forward_net(params, &inputs, mode)?;
    let evals = exec::map_range(samples.len(), |i| loss_mantis(&outs[i], &samples[i], w));
    Ok((evals.into_iter().collect::<Result<Vec<_>>>()?, tape))
}

/// Result of [`objective`]: the mini-batch mean of the per-sample losses and
/// its gradient with respect to every network parameter.
pub struct Objective {
    pub total: f64,
    pub evals: Vec<LossEval>,
    pub grad: Vec<f64>,
    pub tape: Tape,
}

/// Mean MANTIS objective over a mini-batch and its exact parameter gradient.
pub fn objective(params: &NetParams, samples: &[TrainSample], w: &LossWeights, mode: Mode) -> Result<Objective> {
    let (evals, tape) = batch_loss(params, samples, w, mode)?;
    let b = evals.len() as f64;
    let grads: Vec<Array3<f64>> = evals.iter().map(|e| &e.grad / b).collect();
    let grad = backward_net(params, &tape, &grads)?;
    let total = evals.iter().map(|e| e.total).sum::<f64>() / b;
    Ok(Objective { total, evals, grad, tape })
}

/// Mean validation loss in inference mode.
pub fn validation_loss(params: &NetParams, samples: &[TrainSample], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (e, _) = batch_loss(params, std::slice::from_ref(s), w, Mode::Infer)?;
        total += e[0].total;
    }
    Ok(total / samples.len() as f64)
}

/// Trains a mapping network.
///
/// Every iteration draws a mini-batch from a per-epoch shuffle of `train_set`
/// and one mask-set uniformly from `library`. Validation case `i` always uses
/// `library[i % len]`. The returned parameters are those of the epoch with the
/// lowest validation loss.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[TrainCase],
    val_set: &[TrainCase],
    library: &[MaskSet],
    spec: &NetSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs at least one training and one validation case"));
    }
    if library.is_empty() {
        return Err(Error::invalid("empty mask library"));
    }
    let mut params = init_params(spec, derive_seed(seed, 0))?;
    let mut mask_rng = rng(derive_seed(seed, 1));
    let val_samples = val_set
        .iter()
        .enumerate()
        .map(|(i, c)| TrainSample::from_full(&c.full, &c.reference, &library[i % library.len()]))
        .collect::<Result<Vec<_>>>()?;

    let mut history = LossHistory::default();
    let mut best: Option<(f64, NetParams)> = None;
    let mut diverged = None;
    let mut iteration = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng(derive_seed(seed, 2 + epoch as u64)));
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mask_index = mask_rng.random_range(0..library.len());
            let masks = &library[mask_index];
            let samples = chunk
                .iter()
                .map(|&i| TrainSample::from_full(&train_set[i].full, &train_set[i].reference, masks))
                .collect::<Result<Vec<_>>>()?;
            let (evals, tape, g) = match objective(&params, &samples, &cfg.loss, Mode::Train) {
                Ok(o) => (o.evals, o.tape, o.grad),
                Err(e @ Error::Diverged(_)) => {
                    diverged = Some(format!("epoch {epoch}, iteration {iteration}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let b = evals.len() as f64;
            let rec = IterationRecord {
                epoch,
                iteration,
                mask_index,
                loss: evals.iter().map(|e| e.total).sum::<f64>() / b,
                loss1: evals.iter().map(|e| e.loss1).sum::<f64>() / b,
                loss2: evals.iter().map(|e| e.loss2).sum::<f64>() / b,
            };
            history.iterations.push(rec);
            epoch_sum += rec.loss * b;
            if let Err(e) = adam_step(&mut params, &g, &cfg.adam) {
                diverged = Some(format!("epoch {epoch}, iteration {iteration}: {e}"));
                break 'epochs;
            }
            params.update_running_stats(&tape);
            iteration += 1;
        }
        let val_loss = match validation_loss(&params, &val_samples, &cfg.loss) {
            Ok(v) => v,
            Err(e @ Error::Diverged(_)) => {
                diverged = Some(format!("epoch {epoch} validation: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        history.epochs.push(EpochRecord { epoch, train_loss: epoch_sum / train_set.len() as f64, val_loss });
        if best.as_ref().is_none_or(|(v, _)| val_loss < *v) {
            best = Some((val_loss, params.clone()));
            history.best_epoch = Some(epoch);
        }
    }
    let params = best.map(|(_, p)| p).unwrap_or(params);
    Ok(TrainOutcome { params, history, diverged })
}

/// Maps undersampled echoes to parameter maps with the network in inference
/// mode. Magnitudes are scaled to unit peak first and I0 is scaled back.
///
/// Labels come from `labels` when given; otherwise pixels whose mean input
/// magnitude exceeds `threshold_frac` of the peak get label 1.
pub fn infer(params: &NetParams, zero_filled: &EchoSeries, labels: Option<&Array2<u32>>, threshold_frac: f64) -> Result<ParamMaps> {
    let mags = zero_filled.magnitudes();
    let peak = mags.iter().fold(0.0f64, |m, &v| m.max(v));
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::DegenerateDataset);
    }
    let input = mags.mapv(|v| v / peak);
    let (out, _) = forward_net(params, std::slice::from_ref(&input), Mode::Infer)?;
    let out = &out[0];
    let (_, ny, nx) = input.dim();
    let i0 = out.index_axis(Axis(0), 0).mapv(|v| v.max(0.0) * peak);
    let t2 = out.index_axis(Axis(0), 1).mapv(|v| (v * T2_SCALE_MS).clamp(T2_MIN_MS, T2_MAX_MS));
    let labels = match labels {
        Some(l) if l.dim() == (ny, nx) => l.clone(),
        Some(l) => return Err(Error::shape(format!("labels {:?} do not match {ny}x{nx}", l.dim()))),
        None => {
            let mean = input.mean_axis(Axis(0)).expect("at least one echo");
            mean.mapv(|v| u32::from(v > threshold_frac))
        }
    };
    ParamMaps::from_estimate(i0, t2, labels)
}
