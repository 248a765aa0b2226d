//! Pixelwise mono-exponential fitting: log-linear initialization followed by
//! Levenberg-Marquardt on the squared residual.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{EchoSeries, ParamMaps, T2_MAX_MS, T2_MIN_MS};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{DecayModel, T2_FLOOR_MS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Pixels whose mean magnitude is below this fraction of the dataset
    /// maximum are treated as background.
    pub threshold_frac: f64,
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub t2_floor_ms: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            threshold_frac: 0.02,
            max_iterations: 50,
            grad_tol: 1e-10,
            t2_floor_ms: T2_FLOOR_MS,
        }
    }
}

/// Least-squares line through `(TE, ln y)`; returns `(i0, t2)` clamped to the
/// valid range.
pub fn log_linear_init(te_ms: &[f64], y: &[f64]) -> (f64, f64) {
    let peak = y.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak <= 0.0 {
        return (0.0, T2_MIN_MS);
    }
    let floor = peak * 1e-12;
    let n = te_ms.len() as f64;
    let logs: Vec<f64> = y.iter().map(|&v| v.max(floor).ln()).collect();
    let mt = te_ms.iter().sum::<f64>() / n;
    let ml = logs.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&t, &l) in te_ms.iter().zip(&logs) {
        sxy += (t - mt) * (l - ml);
        sxx += (t - mt) * (t - mt);
    }
    let slope = sxy / sxx;
    let t2 = if slope < 0.0 {
        (-1.0 / slope).clamp(T2_MIN_MS, T2_MAX_MS)
    } else {
        T2_MAX_MS
    };
    let i0 = (ml - slope * mt).exp();
    (i0, t2)
}

fn cost(model: &DecayModel, i0: f64, t2: f64, y: &[f64], s: &mut [f64]) -> f64 {
    model.signal_into(i0, t2, s);
    0.5 * s.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Fits one pixel's magnitudes. Returns `(i0, t2_ms)`.
///
/// The data are scaled to unit peak before fitting so the gradient stopping
/// rule, and therefore the result, is independent of the intensity scale.
pub fn fit_pixel(model: &DecayModel, y: &[f64], cfg: &FitConfig) -> (f64, f64) {
    let peak = y.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if !(peak > 0.0 && peak.is_finite()) {
        return (0.0, cfg.t2_floor_ms.max(T2_MIN_MS));
    }
    let scaled: Vec<f64> = y.iter().map(|v| v / peak).collect();
    let (i0, t2) = fit_unit(model, &scaled, cfg);
    (i0 * peak, t2)
}

fn fit_unit(model: &DecayModel, y: &[f64], cfg: &FitConfig) -> (f64, f64) {
    let n = y.len();
    let (mut i0, mut t2) = log_linear_init(model.te_ms(), y);
    let t2_lo = cfg.t2_floor_ms.max(T2_MIN_MS);
    t2 = t2.clamp(t2_lo, T2_MAX_MS);
    let mut s = vec![0.0; n];
    let (mut da, mut db) = (vec![0.0; n], vec![0.0; n]);
    let mut c = cost(model, i0, t2, y, &mut s);
    let mut mu = 1e-3;

    for _ in 0..cfg.max_iterations {
        model.signal_into(i0, t2, &mut s);
        model.jacobian_into(i0, t2, &mut da, &mut db);
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..n {
            let r = s[j] - y[j];
            a11 += da[j] * da[j];
            a12 += da[j] * db[j];
            a22 += db[j] * db[j];
            g1 += da[j] * r;
            g2 += db[j] * r;
        }
        if (g1 * g1 + g2 * g2).sqrt() < cfg.grad_tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..16 {
            let (b11, b22) = (a11 * (1.0 + mu), a22 * (1.0 + mu));
            let det = b11 * b22 - a12 * a12;
            if !(det.is_finite() && det > 0.0) {
                mu *= 10.0;
                continue;
            }
            let d1 = -(b22 * g1 - a12 * g2) / det;
            let d2 = -(b11 * g2 - a12 * g1) / det;
            let (ni0, nt2) = (i0 + d1, (t2 + d2).clamp(t2_lo, T2_MAX_MS));
            let nc = cost(model, ni0, nt2, y, &mut s);
            if nc.is_finite() && nc <= c {
                let moved = (ni0 - i0).abs() + (nt2 - t2).abs();
                i0 = ni0;
                t2 = nt2;
                c = nc;
                mu = (mu * 0.3).max(1e-15);
                accepted = moved > 0.0;
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    if i0 <= 0.0 || !i0.is_finite() {
        return (0.0, t2_lo);
    }
    (i0, t2.clamp(T2_MIN_MS, T2_MAX_MS))
}

/// Fits echo magnitudes `[t, ny, nx]`. Pixels at or below the threshold get
/// `i0 = 0`, `t2 = floor` and label 0; fitted pixels get label 1.
pub fn fit_magnitudes(mags: &Array3<f64>, te_ms: &[f64], cfg: &FitConfig) -> Result<ParamMaps> {
    let (t, ny, nx) = mags.dim();
    if t < 2 || te_ms.len() != t {
        return Err(Error::invalid(format!(
            "fitting needs at least 2 echoes with matching echo times, got {t} images and {} times",
            te_ms.len()
        )));
    }
    let model = DecayModel::new(te_ms).with_floor(cfg.t2_floor_ms);
    let peak = mags.iter().fold(0.0f64, |m, &v| m.max(v));
    let threshold = cfg.threshold_frac * peak;
    let floor = cfg.t2_floor_ms.max(T2_MIN_MS);

    let rows = exec::map_range(ny, |y| {
        let mut out = Vec::with_capacity(nx);
        let mut px = vec![0.0; t];
        for x in 0..nx {
            for (j, v) in px.iter_mut().enumerate() {
                *v = mags[[j, y, x]];
            }
            let mean = px.iter().sum::<f64>() / t as f64;
            if peak > 0.0 && mean > threshold {
                out.push(fit_pixel(&model, &px, cfg));
            } else {
                out.push((0.0, floor));
            }
        }
        out
    });
    let mut i0 = Array2::zeros((ny, nx));
    let mut t2 = Array2::from_elem((ny, nx), floor);
    let mut labels = Array2::zeros((ny, nx));
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (a, b)) in row.into_iter().enumerate() {
            i0[[y, x]] = a;
            t2[[y, x]] = b;
            labels[[y, x]] = u32::from(a > 0.0);
        }
    }
    ParamMaps::from_estimate(i0, t2, labels)
}

/// Fits the magnitudes of a (possibly complex) echo series.
pub fn fit_pixelwise(series: &EchoSeries, cfg: &FitConfig) -> Result<ParamMaps> {
    fit_magnitudes(&series.magnitudes(), series.te_ms(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, synthesize_echoes, PhantomSpec, KNEE_TE_MS};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn noiseless_pixel_is_recovered() {
        let model = DecayModel::new(&KNEE_TE_MS);
        let cfg = FitConfig::default();
        for &(i0, t2) in &[(0.8, 40.0), (0.3, 12.0), (1.0, 250.0), (0.05, 27.5)] {
            let y = model.signal(i0, t2);
            let (a, b) = fit_pixel(&model, &y, &cfg);
            assert!((a / i0 - 1.0).abs() < 1e-6, "i0 {a} vs {i0}");
            assert!((b / t2 - 1.0).abs() < 1e-6, "t2 {b} vs {t2}");
        }
    }

    #[test]
    fn log_linear_is_exact_on_clean_decay() {
        let y = DecayModel::new(&KNEE_TE_MS).signal(0.7, 33.0);
        let (a, b) = log_linear_init(&KNEE_TE_MS, &y);
        assert!((a - 0.7).abs() < 1e-12 && (b - 33.0).abs() < 1e-9);
    }

    #[test]
    fn zero_pixel_is_background() {
        let mags = Array3::zeros((8, 2, 2));
        let maps = fit_magnitudes(&mags, &KNEE_TE_MS, &FitConfig::default()).unwrap();
        assert!(maps.i0().iter().all(|&v| v == 0.0));
        assert!(maps.roi_labels().iter().all(|&v| v == 0));
    }

    #[test]
    fn fewer_than_two_echoes_is_an_error() {
        assert!(fit_magnitudes(&Array3::zeros((1, 2, 2)), &[7.0], &FitConfig::default()).is_err());
    }

    #[test]
    fn monte_carlo_mean_is_unbiased_at_snr_50() {
        let model = DecayModel::new(&KNEE_TE_MS);
        let cfg = FitConfig::default();
        let (i0, t2) = (1.0, 40.0);
        let clean = model.signal(i0, t2);
        let noise = Normal::new(0.0, i0 / 50.0).unwrap();
        let mut rng = crate::rng::rng(99);
        let mut sum = 0.0;
        for _ in 0..1000 {
            let y: Vec<f64> = clean.iter().map(|&v| (v + noise.sample(&mut rng)).abs()).collect();
            sum += fit_pixel(&model, &y, &cfg).1;
        }
        let mean = sum / 1000.0;
        assert!((mean / t2 - 1.0).abs() < 0.02, "mean t2 {mean}");
    }

    #[test]
    fn noiseless_phantom_round_trip() {
        let maps = make_phantom(&PhantomSpec::knee(32, 32, 2)).unwrap();
        let s = synthesize_echoes(&maps, &KNEE_TE_MS, 0.0, 0).unwrap();
        let fit = fit_pixelwise(&s, &FitConfig::default()).unwrap();
        for ((&a, &b), (&ta, &tb)) in maps.i0().iter().zip(fit.i0().iter()).zip(maps.t2_ms().iter().zip(fit.t2_ms().iter())) {
            if a > 0.0 {
                assert!((b / a - 1.0).abs() < 1e-5);
                assert!((tb / ta - 1.0).abs() < 1e-5);
            } else {
                assert_eq!(b, 0.0);
            }
        }
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let model = DecayModel::new(&KNEE_TE_MS);
        let cfg = FitConfig::default();
        let noise = Normal::new(0.0, 0.02).unwrap();
        let mut rng = crate::rng::rng(5);
        for _ in 0..50 {
            let y: Vec<f64> = model.signal(0.9, 35.0).iter().map(|&v| (v + noise.sample(&mut rng)).abs()).collect();
            let (a, b) = fit_pixel(&model, &y, &cfg);
            for c in [0.1, 3.0, 250.0] {
                let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
                let (ac, bc) = fit_pixel(&model, &yc, &cfg);
                assert!((ac / (c * a) - 1.0).abs() < 1e-6, "c {c}");
                assert!((bc / b - 1.0).abs() < 1e-6, "c {c}");
            }
        }
    }
}
