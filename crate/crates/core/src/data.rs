//! Shared data containers and dataset normalization.

use ndarray::{Array2, Array3, Zip};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::sampling::MaskSet;

/// Lower bound for every stored T2 value, in milliseconds.
pub const T2_MIN_MS: f64 = 1.0;
/// Upper bound for every stored T2 value, in milliseconds.
pub const T2_MAX_MS: f64 = 2000.0;

/// Complex multi-echo image stack, echo-major `[t, ny, nx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoSeries {
    te_ms: Vec<f64>,
    data: Array3<Complex64>,
}

pub(crate) fn check_echo_times(te_ms: &[f64]) -> Result<()> {
    if te_ms.len() < 2 {
        return Err(Error::invalid(format!(
            "at least 2 echo times required, got {}",
            te_ms.len()
        )));
    }
    if te_ms.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
        return Err(Error::invalid("echo times must be finite and positive"));
    }
    if te_ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("echo times must be strictly increasing"));
    }
    Ok(())
}

impl EchoSeries {
    pub fn new(te_ms: Vec<f64>, data: Array3<Complex64>) -> Result<Self> {
        check_echo_times(&te_ms)?;
        let (t, ny, nx) = data.dim();
        if t != te_ms.len() {
            return Err(Error::shape(format!(
                "{} echo images but {} echo times",
                t,
                te_ms.len()
            )));
        }
        if ny == 0 || nx == 0 {
            return Err(Error::shape("empty image"));
        }
        if data.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::invalid("echo data contains non-finite values"));
        }
        Ok(Self { te_ms, data })
    }

    pub fn te_ms(&self) -> &[f64] {
        &self.te_ms
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    pub fn echoes(&self) -> usize {
        self.data.dim().0
    }

    pub fn ny(&self) -> usize {
        self.data.dim().1
    }

    pub fn nx(&self) -> usize {
        self.data.dim().2
    }

    /// Per-sample magnitudes, same layout as the data.
    pub fn magnitudes(&self) -> Array3<f64> {
        self.data.mapv(|v| v.norm())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }
}

/// Divides the series by its maximum magnitude. Returns the normalized series
/// and the scale that was divided out.
pub fn normalize_dataset(series: &EchoSeries) -> Result<(EchoSeries, f64)> {
    let scale = series.max_magnitude();
    if scale <= 0.0 {
        return Err(Error::DegenerateDataset);
    }
    let data = series.data.mapv(|v| v / scale);
    Ok((
        EchoSeries {
            te_ms: series.te_ms.clone(),
            data,
        },
        scale,
    ))
}

/// Undersampled k-space with the mask-set that produced it. Lines the mask
/// does not sample are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceSet {
    te_ms: Vec<f64>,
    data: Array3<Complex64>,
    masks: MaskSet,
}

impl KSpaceSet {
    /// Wraps k-space data, zeroing every unsampled line.
    pub fn new(te_ms: Vec<f64>, mut data: Array3<Complex64>, masks: MaskSet) -> Result<Self> {
        check_echo_times(&te_ms)?;
        let (t, ny, _) = data.dim();
        if t != masks.echoes() || ny != masks.ny() || t != te_ms.len() {
            return Err(Error::shape(format!(
                "k-space [{t}, {ny}, _] does not match mask-set [{}, {}] / {} echo times",
                masks.echoes(),
                masks.ny(),
                te_ms.len()
            )));
        }
        masks.apply(&mut data);
        Ok(Self { te_ms, data, masks })
    }

    pub fn te_ms(&self) -> &[f64] {
        &self.te_ms
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn ny(&self) -> usize {
        self.data.dim().1
    }

    pub fn nx(&self) -> usize {
        self.data.dim().2
    }
}

/// Proton-density and T2 maps with a tissue label map. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMaps {
    pub(crate) i0: Array2<f64>,
    pub(crate) t2_ms: Array2<f64>,
    pub(crate) roi_labels: Array2<u32>,
}

impl ParamMaps {
    /// Validating constructor.
    pub fn new(i0: Array2<f64>, t2_ms: Array2<f64>, roi_labels: Array2<u32>) -> Result<Self> {
        if i0.dim() != t2_ms.dim() || i0.dim() != roi_labels.dim() {
            return Err(Error::shape("i0, t2 and label maps differ in shape"));
        }
        if i0.is_empty() {
            return Err(Error::shape("empty maps"));
        }
        let mut bad = None;
        Zip::from(&i0)
            .and(&t2_ms)
            .and(&roi_labels)
            .for_each(|&a, &t, &l| {
                if bad.is_some() {
                    return;
                }
                if !(a.is_finite() && a >= 0.0) {
                    bad = Some("i0 must be finite and non-negative");
                } else if !t.is_finite() {
                    bad = Some("t2 must be finite");
                } else if a > 0.0 && !(T2_MIN_MS..=T2_MAX_MS).contains(&t) {
                    bad = Some("t2 outside [T2_MIN, T2_MAX] on a foreground pixel");
                } else if a == 0.0 && l != 0 {
                    bad = Some("labelled pixel with zero i0");
                }
            });
        match bad {
            Some(msg) => Err(Error::invalid(msg)),
            None => Ok(Self {
                i0,
                t2_ms,
                roi_labels,
            }),
        }
    }

    /// Builds maps from raw estimates: negative or non-finite i0 becomes 0,
    /// T2 is clamped into range, labels are dropped where i0 is 0.
    pub fn from_estimate(i0: Array2<f64>, t2_ms: Array2<f64>, roi_labels: Array2<u32>) -> Result<Self> {
        if i0.dim() != t2_ms.dim() || i0.dim() != roi_labels.dim() {
            return Err(Error::shape("i0, t2 and label maps differ in shape"));
        }
        let i0 = i0.mapv(|v| if v.is_finite() && v > 0.0 { v } else { 0.0 });
        let t2_ms = t2_ms.mapv(clamp_t2);
        let mut labels = roi_labels;
        Zip::from(&mut labels).and(&i0).for_each(|l, &a| {
            if a == 0.0 {
                *l = 0;
            }
        });
        Self::new(i0, t2_ms, labels)
    }

    pub fn i0(&self) -> &Array2<f64> {
        &self.i0
    }

    pub fn t2_ms(&self) -> &Array2<f64> {
        &self.t2_ms
    }

    pub fn roi_labels(&self) -> &Array2<u32> {
        &self.roi_labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.i0.dim()
    }

    /// Same maps with a different label map (used to evaluate estimates on
    /// the ground-truth region).
    pub fn with_labels(&self, labels: &Array2<u32>) -> Result<Self> {
        Self::from_estimate(self.i0.clone(), self.t2_ms.clone(), labels.clone())
    }

    /// Like [`with_labels`](Self::with_labels), but also clears the maps
    /// outside the labelled region (i0 = 0, T2 at the floor). Fits of pure
    /// noise are not a meaningful training target.
    pub fn masked_to(&self, labels: &Array2<u32>) -> Result<Self> {
        if labels.dim() != self.dim() {
            return Err(Error::shape("label map differs in shape from the maps"));
        }
        let mut i0 = self.i0.clone();
        let mut t2 = self.t2_ms.clone();
        Zip::from(&mut i0).and(&mut t2).and(labels).for_each(|a, t, &l| {
            if l == 0 {
                *a = 0.0;
                *t = T2_MIN_MS;
            }
        });
        Self::from_estimate(i0, t2, labels.clone())
    }
}

/// Clamps a T2 value into `[T2_MIN_MS, T2_MAX_MS]`; NaN maps to the floor.
pub fn clamp_t2(t2: f64) -> f64 {
    if t2.is_nan() {
        T2_MIN_MS
    } else {
        t2.clamp(T2_MIN_MS, T2_MAX_MS)
    }
}
