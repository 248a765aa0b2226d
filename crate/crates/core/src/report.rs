//! Evaluation report: per-method metric table, CSV round trip and 8-bit
//! portable graymap previews.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ParamMaps;
use crate::error::{Error, Result};
use crate::metrics::{bland_altman, nrmse, roi_stats, ssim, wilcoxon_signed_rank, RoiStat};
use crate::phantom::tissue_name;

pub const T2_WINDOW_MS: (f64, f64) = (0.0, 100.0);
pub const RESIDUAL_WINDOW_MS: (f64, f64) = (-20.0, 20.0);
pub const REFERENCE_METHOD: &str = "reference";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub r: f64,
    pub metric: String,
    pub roi: String,
    pub value: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

/// Key of one evaluated reconstruction: method name and acceleration.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MethodKey {
    pub method: String,
    /// Acceleration times 1000, so keys order and compare exactly.
    pub r_milli: u64,
}

impl MethodKey {
    pub fn new(method: &str, r: f64) -> Self {
        Self { method: method.to_string(), r_milli: (r * 1000.0).round() as u64 }
    }

    pub fn r(&self) -> f64 {
        self.r_milli as f64 / 1000.0
    }
}

/// One test case: reference maps (whose labels define the region) and the
/// estimates of every method.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub reference: ParamMaps,
    pub estimates: BTreeMap<MethodKey, ParamMaps>,
}

fn mean_sd(values: &[f64]) -> (f64, f64, usize) {
    let s = RoiStat::from_values(values).expect("at least one case");
    (s.mean, s.sd, s.n)
}

impl EvalReport {
    fn push(&mut self, method: &str, r: f64, metric: &str, roi: &str, (value, sd, n): (f64, f64, usize)) {
        self.rows.push(ReportRow { method: method.into(), r, metric: metric.into(), roi: roi.into(), value, sd, n });
    }

    pub fn get(&self, method: &str, r: f64, metric: &str, roi: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|row| row.method == method && row.r == r && row.metric == metric && row.roi == roi)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(["method", "r", "metric", "roi", "value", "sd", "n"])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Builds the comparison table.
///
/// For every method and acceleration: T2 nRMSE and SSIM (mean and SD over
/// cases), per-ROI T2 (mean and SD of per-case ROI means), and agreement of
/// per-case ROI means with the reference (Bland-Altman mean difference and
/// limits, Wilcoxon p). Reference ROI rows use method `reference`, r = 1.
pub fn make_report(cases: &[EvalCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::invalid("report needs at least one case"));
    }
    let keys: Vec<MethodKey> = cases[0].estimates.keys().cloned().collect();
    if cases.iter().any(|c| c.estimates.keys().ne(keys.iter())) {
        return Err(Error::invalid("every case must have estimates for the same methods"));
    }
    let ref_rois: Vec<BTreeMap<u32, RoiStat>> = cases
        .iter()
        .map(|c| roi_stats(c.reference.t2_ms(), c.reference.roi_labels()))
        .collect::<Result<_>>()?;
    let labels: Vec<u32> = {
        let mut l: Vec<u32> = ref_rois.iter().flat_map(|m| m.keys().copied()).collect();
        l.sort_unstable();
        l.dedup();
        l
    };

    let mut report = EvalReport::default();
    for &label in &labels {
        let means: Vec<f64> = ref_rois.iter().filter_map(|m| m.get(&label)).map(|s| s.mean).collect();
        report.push(REFERENCE_METHOD, 1.0, "roi_t2", &tissue_name(label), mean_sd(&means));
    }

    for key in &keys {
        let (method, r) = (key.method.as_str(), key.r());
        let mut errs = Vec::with_capacity(cases.len());
        let mut sims = Vec::with_capacity(cases.len());
        let mut pairs = Vec::new();
        let mut per_label: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (case, rr) in cases.iter().zip(&ref_rois) {
            let est = &case.estimates[key];
            let region = case.reference.roi_labels();
            errs.push(nrmse(est.t2_ms(), case.reference.t2_ms(), region)?);
            sims.push(ssim(est.t2_ms(), case.reference.t2_ms(), region)?);
            let er = roi_stats(est.t2_ms(), region)?;
            for (label, s) in &er {
                per_label.entry(*label).or_default().push(s.mean);
                pairs.push((s.mean, rr[label].mean));
            }
        }
        report.push(method, r, "nrmse", "all", mean_sd(&errs));
        report.push(method, r, "ssim", "all", mean_sd(&sims));
        for (label, means) in &per_label {
            report.push(method, r, "roi_t2", &tissue_name(*label), mean_sd(means));
        }
        if pairs.len() >= 2 {
            let ba = bland_altman(&pairs)?;
            report.push(method, r, "ba_mean_diff", "all", (ba.mean_diff, ba.sd, ba.n));
            report.push(method, r, "ba_lower", "all", (ba.lower, ba.sd, ba.n));
            report.push(method, r, "ba_upper", "all", (ba.upper, ba.sd, ba.n));
            report.push(method, r, "wilcoxon_p", "all", (wilcoxon_signed_rank(&pairs), 0.0, pairs.len()));
        }
    }
    Ok(report)
}

/// Maps `[lo, hi]` linearly onto 0..=255, clamping outside the window.
pub fn to_gray(map: &Array2<f64>, (lo, hi): (f64, f64)) -> Array2<u8> {
    map.mapv(|v| {
        let g = ((v - lo) / (hi - lo) * 255.0).round();
        if g.is_nan() {
            0
        } else {
            g.clamp(0.0, 255.0) as u8
        }
    })
}

/// Binary portable graymap (P5), 8-bit.
pub fn encode_pgm(img: &Array2<u8>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.iter());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Array2<u8>> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Header("truncated graymap header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Header(e.to_string()));
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Header("not an 8-bit binary graymap".into()));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos..pos + w * h).ok_or(Error::TruncatedPayload { expected: w * h, found: bytes.len().saturating_sub(pos) })?;
    Array2::from_shape_vec((h, w), data.to_vec()).map_err(|e| Error::shape(e.to_string()))
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Array2<u8>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// T2 map at the fixed display window.
pub fn t2_preview(maps: &ParamMaps) -> Array2<u8> {
    to_gray(maps.t2_ms(), T2_WINDOW_MS)
}

/// `estimate - reference` inside the region, zero (mid-gray) elsewhere.
pub fn residual_preview(estimate: &ParamMaps, reference: &ParamMaps) -> Array2<u8> {
    let mut d = estimate.t2_ms() - reference.t2_ms();
    ndarray::Zip::from(&mut d).and(reference.roi_labels()).for_each(|v, &l| {
        if l == 0 {
            *v = 0.0;
        }
    });
    to_gray(&d, RESIDUAL_WINDOW_MS)
}

/// Writes `<prefix>_reference_t2.pgm` and, per method,
/// `<prefix>_<method>_r<R>_t2.pgm` and `..._residual.pgm`. Returns the paths.
pub fn write_previews(dir: impl AsRef<Path>, prefix: &str, case: &EvalCase) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    let p = dir.join(format!("{prefix}_reference_t2.pgm"));
    write_pgm(&p, &t2_preview(&case.reference))?;
    written.push(p);
    for (key, est) in &case.estimates {
        let stem = format!("{prefix}_{}_r{}", key.method, key.r());
        let p = dir.join(format!("{stem}_t2.pgm"));
        write_pgm(&p, &t2_preview(est))?;
        written.push(p);
        let p = dir.join(format!("{stem}_residual.pgm"));
        write_pgm(&p, &residual_preview(est, &case.reference))?;
        written.push(p);
    }
    Ok(written)
}
