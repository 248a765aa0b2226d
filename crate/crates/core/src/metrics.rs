//! Map-quality and agreement statistics: nRMSE, SSIM, ROI statistics,
//! Bland-Altman limits and the Wilcoxon signed-rank test.

use std::collections::BTreeMap;

use ndarray::Array2;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn check_same(a: &Array2<f64>, b: &Array2<f64>, region: &Array2<u32>) -> Result<()> {
    if a.dim() != b.dim() || a.dim() != region.dim() {
        return Err(Error::shape(format!(
            "maps {:?} / {:?} and region {:?} differ",
            a.dim(),
            b.dim(),
            region.dim()
        )));
    }
    Ok(())
}

/// `100 ||ref - est||_2 / ||ref||_2` over pixels with a non-zero label.
pub fn nrmse(estimate: &Array2<f64>, reference: &Array2<f64>, region: &Array2<u32>) -> Result<f64> {
    check_same(estimate, reference, region)?;
    let (mut num, mut den, mut n) = (0.0, 0.0, 0usize);
    for ((&e, &r), &l) in estimate.iter().zip(reference.iter()).zip(region.iter()) {
        if l > 0 {
            num += (r - e) * (r - e);
            den += r * r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("nRMSE over an empty region"));
    }
    if den == 0.0 {
        return Err(Error::invalid("nRMSE against a zero-norm reference"));
    }
    Ok(100.0 * (num / den).sqrt())
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized separable Gaussian weights of the 8x8 window (sigma 1.5, centered
/// between the two middle pixels).
pub fn ssim_window() -> Array2<f64> {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(y, x)| g[y] * g[x] / (total * total))
}

/// SSIM of `estimate` against `reference`, in percent. Both maps are zeroed
/// outside the region; the score is the mean over every 8x8 window that
/// intersects it. `L` is the reference dynamic range over the region.
pub fn ssim(estimate: &Array2<f64>, reference: &Array2<f64>, region: &Array2<u32>) -> Result<f64> {
    check_same(estimate, reference, region)?;
    let (ny, nx) = region.dim();
    let inside: Vec<(usize, usize)> = region
        .indexed_iter()
        .filter(|(_, &l)| l > 0)
        .map(|(i, _)| i)
        .collect();
    if inside.is_empty() {
        return Err(Error::invalid("SSIM over an empty region"));
    }
    let (y_lo, y_hi) = inside.iter().fold((usize::MAX, 0), |(a, b), &(y, _)| (a.min(y), b.max(y)));
    let (x_lo, x_hi) = inside.iter().fold((usize::MAX, 0), |(a, b), &(_, x)| (a.min(x), b.max(x)));
    if y_hi - y_lo + 1 < SSIM_WINDOW || x_hi - x_lo + 1 < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "region {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            y_hi - y_lo + 1,
            x_hi - x_lo + 1
        )));
    }
    let (lo, hi) = inside.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| {
        (a.min(reference[i]), b.max(reference[i]))
    });
    let mut range = hi - lo;
    if range <= 0.0 {
        range = hi.abs().max(1.0);
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let a = Array2::from_shape_fn((ny, nx), |i| if region[i] > 0 { estimate[i] } else { 0.0 });
    let b = Array2::from_shape_fn((ny, nx), |i| if region[i] > 0 { reference[i] } else { 0.0 });
    let w = ssim_window();

    let (mut total, mut count) = (0.0, 0usize);
    for y0 in 0..=ny - SSIM_WINDOW {
        for x0 in 0..=nx - SSIM_WINDOW {
            let mut touches = false;
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let p = (y0 + dy, x0 + dx);
                    touches |= region[p] > 0;
                    let wt = w[[dy, dx]];
                    ma += wt * a[p];
                    mb += wt * b[p];
                    saa += wt * a[p] * a[p];
                    sbb += wt * b[p] * b[p];
                    sab += wt * a[p] * b[p];
                }
            }
            if !touches {
                continue;
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(100.0 * total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiStat {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single pixel.
    pub sd: f64,
    pub n: usize,
}

impl RoiStat {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

/// Mean, SD and pixel count of `map` for every non-zero label.
pub fn roi_stats(map: &Array2<f64>, labels: &Array2<u32>) -> Result<BTreeMap<u32, RoiStat>> {
    if map.dim() != labels.dim() {
        return Err(Error::shape("map and label image differ in shape"));
    }
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (&v, &l) in map.iter().zip(labels.iter()) {
        if l > 0 {
            groups.entry(l).or_default().push(v);
        }
    }
    Ok(groups
        .into_iter()
        .filter_map(|(l, v)| RoiStat::from_values(&v).map(|s| (l, s)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlandAltman {
    pub mean_diff: f64,
    /// Sample SD of the differences.
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
}

/// Agreement of `(a, b)` pairs: mean of `a - b` with limits `+-1.96 SD`.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(Error::invalid("Bland-Altman analysis needs at least 2 pairs"));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let s = RoiStat::from_values(&diffs).expect("non-empty");
    Ok(BlandAltman {
        mean_diff: s.mean,
        sd: s.sd,
        lower: s.mean - 1.96 * s.sd,
        upper: s.mean + 1.96 * s.sd,
        n: s.n,
    })
}

/// Largest sample size (after dropping zero differences) for which the
/// signed-rank null distribution is enumerated exactly.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Non-zero differences with their average ranks, doubled so ties stay integral.
fn signed_doubled_ranks(pairs: &[(f64, f64)]) -> Vec<(u64, bool)> {
    let mut d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut out = Vec::with_capacity(d.len());
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len() && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // ranks i+1..=j+1, average doubled = i + j + 2
        let doubled = (i + j + 2) as u64;
        for v in &d[i..=j] {
            out.push((doubled, *v > 0.0));
        }
        i = j + 1;
    }
    out
}

/// Two-sided Wilcoxon signed-rank p-value for paired samples `(a, b)`.
///
/// Zero differences are dropped and ties get average ranks. Up to
/// [`WILCOXON_EXACT_MAX`] non-zero differences the null distribution is
/// enumerated exactly; above that the tie-corrected normal approximation
/// (no continuity correction) is used.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> f64 {
    let ranks = signed_doubled_ranks(pairs);
    let n = ranks.len();
    if n == 0 {
        return 1.0;
    }
    let w_plus: u64 = ranks.iter().filter(|r| r.1).map(|r| r.0).sum();
    if n <= WILCOXON_EXACT_MAX {
        // Distribution of the doubled W+ by dynamic programming over ranks.
        let total: u64 = ranks.iter().map(|r| r.0).sum();
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        for &(r, _) in &ranks {
            for s in (r as usize..=total as usize).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let all = (1u64 << n) as f64;
        let le: u64 = counts[..=w_plus as usize].iter().sum();
        let ge: u64 = counts[w_plus as usize..].iter().sum();
        return (2.0 * le.min(ge) as f64 / all).min(1.0);
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && ranks[j + 1].0 == ranks[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus as f64 / 2.0 - mean) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z.abs())).min(1.0)
}
