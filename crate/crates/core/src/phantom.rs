//! Synthetic knee-like phantoms with known I0 / T2 ground truth.
//!
//! Tissue T2 statistics default to regional reference values measured in knee
//! cartilage and meniscus; shapes are random ellipses and half-annuli.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{check_echo_times, clamp_t2, EchoSeries, ParamMaps, T2_MAX_MS, T2_MIN_MS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

/// Multi-echo spin-echo echo times of the knee protocol, in ms.
pub const KNEE_TE_MS: [f64; 8] = [7.0, 16.0, 25.0, 34.0, 43.0, 52.0, 62.0, 71.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Tissue {
    pub label: u32,
    pub name: String,
    pub t2_mean_ms: f64,
    pub t2_sd_ms: f64,
    pub i0_range: (f64, f64),
}

impl Tissue {
    pub fn new(label: u32, name: &str, t2_mean_ms: f64, t2_sd_ms: f64, i0_range: (f64, f64)) -> Self {
        Self {
            label,
            name: name.to_string(),
            t2_mean_ms,
            t2_sd_ms,
            i0_range,
        }
    }
}

/// Label of the short-T2 filler class that forms the bulk of each phantom.
pub const FILLER_LABEL: u32 = 7;

/// Knee tissue classes: six cartilage/meniscus regions plus a short-T2 filler.
pub fn default_tissues() -> Vec<Tissue> {
    vec![
        Tissue::new(1, "patellar", 39.6, 3.5, (0.55, 0.85)),
        Tissue::new(2, "femoral", 46.0, 3.4, (0.55, 0.85)),
        Tissue::new(3, "tibial", 42.5, 5.5, (0.55, 0.85)),
        Tissue::new(4, "superficial", 53.4, 3.8, (0.6, 0.95)),
        Tissue::new(5, "deep", 32.0, 2.3, (0.5, 0.8)),
        Tissue::new(6, "meniscus", 27.5, 4.0, (0.45, 0.75)),
        Tissue::new(FILLER_LABEL, "filler", 15.0, 1.5, (0.7, 1.0)),
    ]
}

/// Name of a tissue label in the default table, or `label<N>`.
pub fn tissue_name(label: u32) -> String {
    default_tissues()
        .into_iter()
        .find(|t| t.label == label)
        .map(|t| t.name)
        .unwrap_or_else(|| format!("label{label}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub ny: usize,
    pub nx: usize,
    pub n_objects: usize,
    pub tissues: Vec<Tissue>,
    pub seed: u64,
}

impl PhantomSpec {
    /// Default knee-like phantom: 8 objects over the default tissue table.
    pub fn knee(ny: usize, nx: usize, seed: u64) -> Self {
        Self {
            ny,
            nx,
            n_objects: 8,
            tissues: default_tissues(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ny == 0 || self.nx == 0 {
            return Err(Error::invalid("phantom grid must be non-empty"));
        }
        if self.n_objects == 0 {
            return Err(Error::invalid("phantom needs at least one object"));
        }
        if self.tissues.is_empty() {
            return Err(Error::invalid("phantom needs at least one tissue"));
        }
        for t in &self.tissues {
            if t.label == 0 {
                return Err(Error::invalid("tissue label 0 is reserved for background"));
            }
            let lo = t.t2_mean_ms - 3.0 * t.t2_sd_ms;
            let hi = t.t2_mean_ms + 3.0 * t.t2_sd_ms;
            if t.t2_sd_ms < 0.0 || lo < T2_MIN_MS || hi > T2_MAX_MS {
                return Err(Error::invalid(format!(
                    "tissue {:?}: mean +- 3 sd outside [{T2_MIN_MS}, {T2_MAX_MS}] ms",
                    t.name
                )));
            }
            let (a, b) = t.i0_range;
            if !(a > 0.0 && a <= b && b <= 1.0) {
                return Err(Error::invalid(format!("tissue {:?}: i0 range must lie in (0, 1]", t.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ay: f64, ax: f64 },
    HalfAnnulus { cy: f64, cx: f64, r_out: f64, r_in: f64, upper: bool },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ay, ax } => {
                let (dy, dx) = ((y - cy) / ay, (x - cx) / ax);
                dy * dy + dx * dx <= 1.0
            }
            Shape::HalfAnnulus { cy, cx, r_out, r_in, upper } => {
                let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                let side = if upper { y <= cy } else { y >= cy };
                side && r <= r_out && r >= r_in
            }
        }
    }
}

/// Draws a phantom. Object 0 is a large filler ellipse; the rest cycle
/// through the non-filler tissues. Later objects overwrite earlier ones.
pub fn make_phantom(spec: &PhantomSpec) -> Result<ParamMaps> {
    spec.validate()?;
    let (ny, nx) = (spec.ny, spec.nx);
    let mut rng = rng(spec.seed);
    let filler = spec
        .tissues
        .iter()
        .find(|t| t.label == FILLER_LABEL)
        .unwrap_or(&spec.tissues[spec.tissues.len() - 1]);
    let others: Vec<&Tissue> = spec.tissues.iter().filter(|t| t.label != filler.label).collect();

    let mut i0 = Array2::zeros((ny, nx));
    let mut t2 = Array2::from_elem((ny, nx), T2_MIN_MS);
    let mut labels = Array2::zeros((ny, nx));
    let (fy, fx) = (ny as f64, nx as f64);

    for obj in 0..spec.n_objects {
        let tissue = if obj == 0 || others.is_empty() {
            filler
        } else {
            others[(obj - 1) % others.len()]
        };
        let shape = if obj == 0 {
            Shape::Ellipse {
                cy: fy * rng.random_range(0.45..0.55),
                cx: fx * rng.random_range(0.45..0.55),
                ay: fy * rng.random_range(0.3..0.42),
                ax: fx * rng.random_range(0.3..0.42),
            }
        } else if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy: fy * rng.random_range(0.3..0.7),
                cx: fx * rng.random_range(0.3..0.7),
                ay: fy * rng.random_range(0.05..0.18),
                ax: fx * rng.random_range(0.05..0.18),
            }
        } else {
            let r_out = fy.min(fx) * rng.random_range(0.12..0.3);
            Shape::HalfAnnulus {
                cy: fy * rng.random_range(0.35..0.65),
                cx: fx * rng.random_range(0.35..0.65),
                r_out,
                r_in: r_out * rng.random_range(0.55..0.8),
                upper: rng.random_bool(0.5),
            }
        };
        let t2_value = if tissue.t2_sd_ms > 0.0 {
            let n = Normal::new(tissue.t2_mean_ms, tissue.t2_sd_ms)
                .map_err(|e| Error::invalid(e.to_string()))?;
            clamp_t2(n.sample(&mut rng))
        } else {
            clamp_t2(tissue.t2_mean_ms)
        };
        let (a, b) = tissue.i0_range;
        let i0_value = if b > a { rng.random_range(a..=b) } else { a };

        for y in 0..ny {
            for x in 0..nx {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    i0[[y, x]] = i0_value;
                    t2[[y, x]] = t2_value;
                    labels[[y, x]] = tissue.label;
                }
            }
        }
    }
    ParamMaps::new(i0, t2, labels)
}

/// Renders `I0 exp(-TE / T2)` for every echo as a zero-phase complex image
/// and adds i.i.d. complex Gaussian noise with `noise_sd` per channel.
pub fn synthesize_echoes(maps: &ParamMaps, te_ms: &[f64], noise_sd: f64, seed: u64) -> Result<EchoSeries> {
    check_echo_times(te_ms)?;
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(Error::invalid(format!("noise sd must be non-negative, got {noise_sd}")));
    }
    let (ny, nx) = maps.dim();
    let mut data = Array3::from_shape_fn((te_ms.len(), ny, nx), |(j, y, x)| {
        let t2 = maps.t2_ms[[y, x]].max(T2_MIN_MS);
        Complex64::new(maps.i0[[y, x]] * (-te_ms[j] / t2).exp(), 0.0)
    });
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = rng(derive_seed(seed, 0x6e6f_6973));
        for v in data.iter_mut() {
            v.re += normal.sample(&mut rng);
            v.im += normal.sample(&mut rng);
        }
    }
    EchoSeries::new(te_ms.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_sd_zero_tissue_is_constant() {
        let mut spec = PhantomSpec::knee(64, 64, 3);
        for t in &mut spec.tissues {
            t.t2_sd_ms = 0.0;
        }
        let maps = make_phantom(&spec).unwrap();
        let mut seen = 0;
        for (&l, &t) in maps.roi_labels().iter().zip(maps.t2_ms().iter()) {
            if l == 6 {
                assert_eq!(t, 27.5);
                seen += 1;
            }
        }
        assert!(seen > 0, "meniscus object visible");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_phantom(&PhantomSpec::knee(64, 64, 7)).unwrap();
        let b = make_phantom(&PhantomSpec::knee(64, 64, 7)).unwrap();
        let c = make_phantom(&PhantomSpec::knee(64, 64, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn background_and_labels_are_consistent() {
        let maps = make_phantom(&PhantomSpec::knee(48, 40, 1)).unwrap();
        for ((&i0, &l), &t2) in maps.i0().iter().zip(maps.roi_labels().iter()).zip(maps.t2_ms().iter()) {
            assert_eq!(i0 == 0.0, l == 0);
            assert!((T2_MIN_MS..=T2_MAX_MS).contains(&t2));
        }
        let fg = maps.i0().iter().filter(|&&v| v > 0.0).count();
        assert!(fg > 48 * 40 / 5);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = PhantomSpec::knee(16, 16, 0);
        spec.n_objects = 0;
        assert!(make_phantom(&spec).is_err());
        let mut spec = PhantomSpec::knee(16, 16, 0);
        spec.tissues[0].t2_sd_ms = 20.0;
        assert!(make_phantom(&spec).is_err());
        let mut spec = PhantomSpec::knee(16, 16, 0);
        spec.tissues[0].i0_range = (0.0, 0.5);
        assert!(make_phantom(&spec).is_err());
    }

    fn uniform_maps(i0: f64, t2: f64, n: usize) -> ParamMaps {
        ParamMaps::new(
            Array2::from_elem((n, n), i0),
            Array2::from_elem((n, n), t2),
            Array2::from_elem((n, n), if i0 > 0.0 { 1 } else { 0 }),
        )
        .unwrap()
    }

    #[test]
    fn noiseless_closed_form() {
        let s = synthesize_echoes(&uniform_maps(1.0, 40.0, 2), &[7.0, 16.0], 0.0, 0).unwrap();
        assert!((s.data()[[0, 0, 0]].re - 0.839_457_021_2).abs() < 1e-9);
        assert_eq!(s.data()[[0, 1, 1]].im, 0.0);
    }

    #[test]
    fn knee_protocol_is_monotone_and_exact() {
        let maps = make_phantom(&PhantomSpec::knee(32, 32, 5)).unwrap();
        let s = synthesize_echoes(&maps, &KNEE_TE_MS, 0.0, 0).unwrap();
        assert_eq!(s.echoes(), 8);
        for y in 0..32 {
            for x in 0..32 {
                let (i0, t2) = (maps.i0()[[y, x]], maps.t2_ms()[[y, x]]);
                for j in 0..8 {
                    let expect = i0 * (-KNEE_TE_MS[j] / t2).exp();
                    assert!((s.data()[[j, y, x]].re - expect).abs() < 1e-12);
                    if i0 > 0.0 && j > 0 {
                        assert!(s.data()[[j, y, x]].re < s.data()[[j - 1, y, x]].re);
                    }
                }
            }
        }
    }

    #[test]
    fn long_t2_barely_decays() {
        let s = synthesize_echoes(&uniform_maps(1.0, T2_MAX_MS, 2), &KNEE_TE_MS, 0.0, 0).unwrap();
        let floor = (-71.0f64 / 2000.0).exp();
        assert!(s.data().iter().all(|v| v.re <= 1.0 && v.re >= floor - 1e-15));
    }

    #[test]
    fn noise_level_matches_request() {
        let maps = uniform_maps(0.0, T2_MIN_MS, 64);
        let sd = 0.03;
        let s = synthesize_echoes(&maps, &KNEE_TE_MS, sd, 11).unwrap();
        let n = s.data().len() as f64 * 2.0;
        let var = s.data().iter().map(|v| v.re * v.re + v.im * v.im).sum::<f64>() / n;
        assert!((var.sqrt() / sd - 1.0).abs() < 0.05);
        let again = synthesize_echoes(&maps, &KNEE_TE_MS, sd, 11).unwrap();
        assert_eq!(s, again);
        assert!(synthesize_echoes(&maps, &KNEE_TE_MS, -1.0, 11).is_err());
    }
}
