//! Time-varying 1D variable-density random ky undersampling.
//!
//! Each mask-set holds one binary ky-line mask per echo. The central block of
//! lines is always acquired; the rest of the per-echo budget is drawn without
//! replacement with weight `(1 - |k - k_c| / k_max)^alpha`, independently for
//! every echo, so the aliasing pattern changes along the echo dimension.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

/// Default polynomial exponent of the density law.
pub const DEFAULT_ALPHA: f64 = 2.0;
/// Default fully sampled center fraction.
pub const DEFAULT_CENTER_FRAC: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    pub ny: usize,
    pub echoes: usize,
    pub r_target: f64,
    pub center_frac: f64,
    pub alpha: f64,
}

impl MaskParams {
    pub fn new(ny: usize, echoes: usize, r_target: f64) -> Self {
        Self {
            ny,
            echoes,
            r_target,
            center_frac: DEFAULT_CENTER_FRAC,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn with_center_frac(mut self, center_frac: f64) -> Self {
        self.center_frac = center_frac;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Number of fully sampled central lines, `ceil(center_frac * ny)`.
    pub fn center_lines(&self) -> usize {
        // Guard against products like 0.05 * 20 = 1.0000000000000002.
        ((self.center_frac * self.ny as f64) - 1e-9).ceil().max(0.0) as usize
    }

    /// Lines acquired per echo, `round(ny / r_target)`.
    pub fn budget(&self) -> usize {
        (self.ny as f64 / self.r_target).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.ny == 0 || self.echoes == 0 {
            return Err(Error::invalid("mask-set needs ny >= 1 and at least one echo"));
        }
        if !(self.r_target.is_finite() && self.r_target >= 1.0) {
            return Err(Error::invalid(format!(
                "acceleration must be >= 1, got {}",
                self.r_target
            )));
        }
        if !(0.0..=1.0).contains(&self.center_frac) {
            return Err(Error::invalid("center fraction must lie in [0, 1]"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("density exponent must be non-negative"));
        }
        let (center, budget) = (self.center_lines(), self.budget());
        if budget < center {
            return Err(Error::CenterExceedsBudget { center, budget });
        }
        Ok(())
    }
}

/// Per-echo ky sampling masks, `lines[[echo, ky]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    lines: Array2<bool>,
    r_target: f64,
    center_frac: f64,
    alpha: f64,
    seed: u64,
}

impl MaskSet {
    /// Assembles a mask-set from explicit lines (e.g. when reading a file).
    pub fn from_lines(lines: Array2<bool>, r_target: f64, center_frac: f64, alpha: f64, seed: u64) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::shape("empty mask-set"));
        }
        Ok(Self {
            lines,
            r_target,
            center_frac,
            alpha,
            seed,
        })
    }

    /// Every line sampled in every echo.
    pub fn full(ny: usize, echoes: usize) -> Self {
        Self {
            lines: Array2::from_elem((echoes, ny), true),
            r_target: 1.0,
            center_frac: 1.0,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }

    pub fn lines(&self) -> &Array2<bool> {
        &self.lines
    }

    pub fn echoes(&self) -> usize {
        self.lines.dim().0
    }

    pub fn ny(&self) -> usize {
        self.lines.dim().1
    }

    pub fn r_target(&self) -> f64 {
        self.r_target
    }

    pub fn center_frac(&self) -> f64 {
        self.center_frac
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_sampled(&self, echo: usize, ky: usize) -> bool {
        self.lines[[echo, ky]]
    }

    pub fn lines_per_echo(&self) -> Vec<usize> {
        self.lines
            .axis_iter(Axis(0))
            .map(|row| row.iter().filter(|&&b| b).count())
            .collect()
    }

    /// Zeroes every unsampled ky line of `kspace` (`[t, ny, nx]`).
    pub fn apply(&self, kspace: &mut Array3<Complex64>) {
        for (echo, mut img) in kspace.axis_iter_mut(Axis(0)).enumerate() {
            for (ky, mut row) in img.axis_iter_mut(Axis(0)).enumerate() {
                if !self.lines[[echo, ky]] {
                    row.fill(Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    /// Same as [`MaskSet::apply`] on one echo stored row-major `[ny, nx]`.
    pub fn apply_echo(&self, echo: usize, kspace: &mut [Complex64], nx: usize) {
        for (ky, row) in kspace.chunks_mut(nx).enumerate() {
            if !self.lines[[echo, ky]] {
                row.fill(Complex64::new(0.0, 0.0));
            }
        }
    }
}

/// Index of the first of the `center` central lines around `ny / 2`.
fn center_start(ny: usize, center: usize) -> usize {
    (ny / 2).saturating_sub(center / 2)
}

/// Draws one mask-set. Deterministic in `(seed, echo index)`.
pub fn make_maskset(params: &MaskParams, seed: u64) -> Result<MaskSet> {
    params.validate()?;
    let ny = params.ny;
    let center = params.center_lines();
    let budget = params.budget();
    let c0 = center_start(ny, center);
    let kc = (ny / 2) as f64;
    let kmax = kc + 1.0;

    let mut lines = Array2::from_elem((params.echoes, ny), false);
    for echo in 0..params.echoes {
        let mut row = lines.row_mut(echo);
        for ky in c0..c0 + center {
            row[ky] = true;
        }
        let free = budget - center;
        if free == 0 {
            continue;
        }
        // Efraimidis-Spirakis weighted sampling without replacement:
        // keep the `free` largest keys ln(u) / w.
        let mut rng = stream(seed, echo as u64);
        let mut keyed: Vec<(f64, usize)> = (0..ny)
            .filter(|ky| !(c0..c0 + center).contains(ky))
            .map(|ky| {
                let w = (1.0 - (ky as f64 - kc).abs() / kmax).powf(params.alpha);
                let u: f64 = rng.random::<f64>();
                let key = if w > 0.0 { (1.0 - u).ln() / w } else { f64::NEG_INFINITY };
                (key, ky)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, ky) in keyed.iter().take(free) {
            row[ky] = true;
        }
    }
    Ok(MaskSet {
        lines,
        r_target: params.r_target,
        center_frac: params.center_frac,
        alpha: params.alpha,
        seed,
    })
}

/// `n_sets` independent mask-sets; set `i` uses seed `derive_seed(seed, i)`.
pub fn make_mask_library(n_sets: usize, params: &MaskParams, seed: u64) -> Result<Vec<MaskSet>> {
    if n_sets == 0 {
        return Err(Error::invalid("mask library needs at least one set"));
    }
    (0..n_sets)
        .map(|i| make_maskset(params, derive_seed(seed, i as u64)))
        .collect()
}

/// `ny / mean sampled lines per echo`.
pub fn achieved_acceleration(masks: &MaskSet) -> f64 {
    let counts = masks.lines_per_echo();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    masks.ny() as f64 / mean
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_budget_at_r5() {
        let p = MaskParams::new(256, 8, 5.0);
        assert_eq!(p.center_lines(), 13);
        assert_eq!(p.budget(), 51);
        let m = make_maskset(&p, 3).unwrap();
        assert!(m.lines_per_echo().iter().all(|&c| c == 51));
        let c0 = center_start(256, 13);
        assert_eq!(c0, 122);
        for e in 0..8 {
            assert!((c0..c0 + 13).all(|ky| m.is_sampled(e, ky)));
        }
        assert!((achieved_acceleration(&m) - 256.0 / 51.0).abs() < 1e-12);
    }

    #[test]
    fn full_sampling_at_r1() {
        let m = make_maskset(&MaskParams::new(64, 8, 1.0), 9).unwrap();
        assert!(m.lines().iter().all(|&b| b));
        assert_eq!(achieved_acceleration(&m), 1.0);
    }

    #[test]
    fn seeds_change_the_random_part() {
        let p = MaskParams::new(64, 8, 8.0);
        let a = make_maskset(&p, 1).unwrap();
        let b = make_maskset(&p, 2).unwrap();
        assert_ne!(a.lines(), b.lines());
        let acc = achieved_acceleration(&a);
        assert!((7.5..=8.5).contains(&acc), "{acc}");
    }

    #[test]
    fn center_over_budget_is_rejected() {
        let p = MaskParams::new(64, 8, 8.0).with_center_frac(0.5);
        assert!(matches!(
            make_maskset(&p, 0),
            Err(Error::CenterExceedsBudget { center: 32, budget: 8 })
        ));
    }

    #[test]
    fn echoes_are_incoherent() {
        for r in [5.0, 8.0] {
            let p = MaskParams::new(64, 8, r);
            for seed in 0..100 {
                let m = make_maskset(&p, seed).unwrap();
                let union = (0..64)
                    .filter(|&ky| (0..8).any(|e| m.is_sampled(e, ky)))
                    .count();
                assert!(union > p.budget(), "seed {seed} R {r}");
            }
        }
    }

    #[test]
    fn library_is_reproducible_and_distinct() {
        let p = MaskParams::new(64, 8, 5.0);
        let a = make_mask_library(100, &p, 11).unwrap();
        let b = make_mask_library(100, &p, 11).unwrap();
        assert_eq!(a, b);
        let mut dup = 0;
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                if a[i].lines() == a[j].lines() {
                    dup += 1;
                }
            }
        }
        assert_eq!(dup, 0);
        assert_eq!(make_mask_library(1, &p, 11).unwrap().len(), 1);
        assert!(make_mask_library(0, &p, 11).is_err());
    }

    #[test]
    fn density_favours_the_center() {
        let p = MaskParams::new(128, 8, 4.0);
        let mut near = 0usize;
        let mut far = 0usize;
        for seed in 0..50 {
            let m = make_maskset(&p, seed).unwrap();
            for e in 0..8 {
                near += (40..88).filter(|&k| m.is_sampled(e, k)).count();
                far += (0..24).chain(104..128).filter(|&k| m.is_sampled(e, k)).count();
            }
        }
        assert!(near > 2 * far, "near {near} far {far}");
    }

    #[test]
    fn apply_zeroes_unsampled_lines() {
        let m = make_maskset(&MaskParams::new(16, 2, 4.0), 5).unwrap();
        let mut k = Array3::from_elem((2, 16, 3), Complex64::new(1.0, 1.0));
        m.apply(&mut k);
        for e in 0..2 {
            for ky in 0..16 {
                let expect = if m.is_sampled(e, ky) { 1.0 } else { 0.0 };
                assert!(k.slice(ndarray::s![e, ky, ..]).iter().all(|v| v.re == expect));
            }
        }
        let before = k.clone();
        m.apply(&mut k);
        assert_eq!(before, k);
    }
}
