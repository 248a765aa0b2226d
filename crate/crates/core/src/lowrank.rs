//! Globally and locally low-rank reconstruction by ISTA with singular-value
//! soft-thresholding of Casorati (pixels x echoes) matrices.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::{EchoSeries, KSpaceSet};
use crate::encoding::{operator_for, EncodingOp};
use crate::error::{Error, Result};
use crate::exec;

/// Regularization weight, either absolute or as a fraction of the largest
/// singular value of the zero-filled Casorati matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    Absolute(f64),
    RelativeToSigmaMax(f64),
}

impl Lambda {
    fn resolve(self, x0: &Array3<Complex64>) -> f64 {
        match self {
            Lambda::Absolute(v) => v,
            Lambda::RelativeToSigmaMax(f) => f * sigma_max(&casorati(x0)),
        }
    }
}

/// Frozen GLR weight (fraction of sigma_max of the zero-filled series),
/// picked once by [`tune_glr_lambda`] on a held-out phantom.
pub const DEFAULT_GLR_LAMBDA_REL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IstaSchedule {
    pub glr_iterations: usize,
    pub lambda_glr: Lambda,
    pub llr_init_iterations: usize,
    pub llr_iterations: usize,
    /// `lambda_llr = llr_reduction * lambda_glr`.
    pub llr_reduction: f64,
    pub block: usize,
    pub stride: usize,
}

impl Default for IstaSchedule {
    fn default() -> Self {
        Self {
            glr_iterations: 50,
            lambda_glr: Lambda::RelativeToSigmaMax(DEFAULT_GLR_LAMBDA_REL),
            llr_init_iterations: 20,
            llr_iterations: 30,
            llr_reduction: 0.5,
            block: 8,
            stride: 4,
        }
    }
}

impl IstaSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.glr_iterations == 0 || self.llr_init_iterations == 0 || self.llr_iterations == 0 {
            return Err(Error::invalid("iteration counts must be at least 1"));
        }
        let l = match self.lambda_glr {
            Lambda::Absolute(v) | Lambda::RelativeToSigmaMax(v) => v,
        };
        if !(l >= 0.0 && self.llr_reduction >= 0.0) {
            return Err(Error::invalid("regularization weights must be non-negative"));
        }
        if self.block == 0 || self.stride == 0 {
            return Err(Error::invalid("block size and stride must be positive"));
        }
        Ok(())
    }
}

/// `[t, ny, nx]` -> `(ny nx) x t`, one column per echo.
pub fn casorati(x: &Array3<Complex64>) -> DMatrix<Complex64> {
    let (t, ny, nx) = x.dim();
    DMatrix::from_fn(ny * nx, t, |p, j| x[[j, p / nx, p % nx]])
}

pub fn from_casorati(m: &DMatrix<Complex64>, ny: usize, nx: usize) -> Array3<Complex64> {
    let t = m.ncols();
    Array3::from_shape_fn((t, ny, nx), |(j, y, x)| m[(y * nx + x, j)])
}

pub fn singular_values(m: &DMatrix<Complex64>) -> Vec<f64> {
    m.clone().svd(false, false).singular_values.iter().copied().collect()
}

fn sigma_max(m: &DMatrix<Complex64>) -> f64 {
    singular_values(m).into_iter().fold(0.0, f64::max)
}

/// Singular-value soft-thresholding `U max(S - lambda, 0) V^H`. Also returns
/// the nuclear norm of the result.
pub fn svt_with_norm(m: &DMatrix<Complex64>, lambda: f64) -> (DMatrix<Complex64>, f64) {
    if m.is_empty() {
        return (m.clone(), 0.0);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut nuclear = 0.0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let shrunk = s - lambda;
        if shrunk <= 0.0 {
            continue;
        }
        nuclear += shrunk;
        let uk = u.column(k) * Complex64::new(shrunk, 0.0);
        out += uk * v_t.row(k);
    }
    (out, nuclear)
}

pub fn svt(m: &DMatrix<Complex64>, lambda: f64) -> DMatrix<Complex64> {
    svt_with_norm(m, lambda).0
}

/// Overlapping `b x b` blocks at stride `s`, with the last block flush with
/// the image edge. Synthesis averages overlapping block estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct LlrBlocks {
    ny: usize,
    nx: usize,
    block: usize,
    origins: Vec<(usize, usize)>,
    weights: Array2<f64>,
}

fn block_starts(n: usize, block: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=n - block).step_by(stride).collect();
    if *v.last().unwrap() != n - block {
        v.push(n - block);
    }
    v
}

impl LlrBlocks {
    pub fn new(ny: usize, nx: usize, block: usize, stride: usize) -> Result<Self> {
        if block == 0 || stride == 0 {
            return Err(Error::invalid("block size and stride must be positive"));
        }
        if block > ny || block > nx {
            return Err(Error::invalid(format!("block {block} larger than image {ny}x{nx}")));
        }
        let ys = block_starts(ny, block, stride);
        let xs = block_starts(nx, block, stride);
        let origins: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
        let mut count = Array2::<f64>::zeros((ny, nx));
        for &(y0, x0) in &origins {
            for y in y0..y0 + block {
                for x in x0..x0 + block {
                    count[[y, x]] += 1.0;
                }
            }
        }
        let weights = count.mapv(|c| 1.0 / c);
        Ok(Self {
            ny,
            nx,
            block,
            origins,
            weights,
        })
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    /// Per-pixel synthesis weight of one block (1 / number of covering blocks).
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Sum over covering blocks of the per-pixel weight; exactly 1 everywhere.
    pub fn weight_sums(&self) -> Array2<f64> {
        let mut s = Array2::zeros((self.ny, self.nx));
        for &(y0, x0) in &self.origins {
            for y in y0..y0 + self.block {
                for x in x0..x0 + self.block {
                    s[[y, x]] += self.weights[[y, x]];
                }
            }
        }
        s
    }

    fn extract(&self, x: &Array3<Complex64>, (y0, x0): (usize, usize)) -> DMatrix<Complex64> {
        let b = self.block;
        DMatrix::from_fn(b * b, x.dim().0, |p, j| x[[j, y0 + p / b, x0 + p % b]])
    }

    /// Applies `svt(., lambda)` to every block and synthesizes by weighted
    /// overlap-average.
    pub fn prox(&self, x: &Array3<Complex64>, lambda: f64) -> Array3<Complex64> {
        let b = self.block;
        let blocks = exec::map_slice(&self.origins, |&o| svt(&self.extract(x, o), lambda));
        let mut out = Array3::zeros(x.dim());
        for (m, &(y0, x0)) in blocks.iter().zip(&self.origins) {
            for j in 0..x.dim().0 {
                for p in 0..b * b {
                    let (y, xx) = (y0 + p / b, x0 + p % b);
                    out[[j, y, xx]] += m[(p, j)] * self.weights[[y, xx]];
                }
            }
        }
        out
    }
}

fn check_finite(x: &Array3<Complex64>, iteration: usize) -> Result<()> {
    if x.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::Diverged(format!("non-finite iterate at iteration {iteration}")));
    }
    Ok(())
}

fn data_residual(op: &EncodingOp, x: &Array3<Complex64>, d: &Array3<Complex64>) -> Result<(Array3<Complex64>, f64)> {
    let mut r = op.forward_array(x)?;
    r -= d;
    let e = 0.5 * r.iter().map(|v| v.norm_sqr()).sum::<f64>();
    Ok((r, e))
}

/// Result of a traced GLR run.
#[derive(Debug, Clone)]
pub struct GlrTrace {
    pub images: Array3<Complex64>,
    pub lambda: f64,
    /// Objective `0.5 ||Ex - d||^2 + lambda ||Tx||_*` at x0 and after every iteration.
    pub objective: Vec<f64>,
    /// `||M(Ex - d)||` after every iteration.
    pub residual_norms: Vec<f64>,
}

fn glr_iterations(op: &EncodingOp, d: &Array3<Complex64>, mut x: Array3<Complex64>, lambda: f64, iterations: usize, trace: bool) -> Result<GlrTrace> {
    let (_, ny, nx) = x.dim();
    let mut objective = Vec::new();
    let mut residual_norms = Vec::new();
    let (mut r, mut data_term) = data_residual(op, &x, d)?;
    if trace {
        objective.push(data_term + lambda * singular_values(&casorati(&x)).iter().sum::<f64>());
    }
    for it in 0..iterations {
        let grad = op.adjoint_array(&r)?;
        let step = &x - &grad;
        let (m, nuclear) = svt_with_norm(&casorati(&step), lambda);
        x = from_casorati(&m, ny, nx);
        check_finite(&x, it)?;
        (r, data_term) = data_residual(op, &x, d)?;
        if trace {
            objective.push(data_term + lambda * nuclear);
            residual_norms.push((2.0 * data_term).sqrt());
        }
    }
    Ok(GlrTrace {
        images: x,
        lambda,
        objective,
        residual_norms,
    })
}

/// GLR with the objective recorded per iteration.
pub fn recon_glr_traced(k: &KSpaceSet, sched: &IstaSchedule) -> Result<GlrTrace> {
    sched.validate()?;
    let op = operator_for(k)?;
    let x0 = op.adjoint_array(k.data())?;
    let lambda = sched.lambda_glr.resolve(&x0);
    glr_iterations(&op, k.data(), x0, lambda, sched.glr_iterations, true)
}

/// Globally low-rank ISTA from the zero-filled start, unit step.
pub fn recon_glr(k: &KSpaceSet, sched: &IstaSchedule) -> Result<EchoSeries> {
    sched.validate()?;
    let op = operator_for(k)?;
    let x0 = op.adjoint_array(k.data())?;
    let lambda = sched.lambda_glr.resolve(&x0);
    let out = glr_iterations(&op, k.data(), x0, lambda, sched.glr_iterations, false)?;
    EchoSeries::new(k.te_ms().to_vec(), out.images)
}

/// GLR warm start followed by locally low-rank ISTA on overlapping blocks.
pub fn recon_llr(k: &KSpaceSet, sched: &IstaSchedule) -> Result<EchoSeries> {
    sched.validate()?;
    let blocks = LlrBlocks::new(k.ny(), k.nx(), sched.block, sched.stride)?;
    let op = operator_for(k)?;
    let d = k.data();
    let x0 = op.adjoint_array(d)?;
    let lambda_glr = sched.lambda_glr.resolve(&x0);
    let lambda_llr = sched.llr_reduction * lambda_glr;
    let mut x = glr_iterations(&op, d, x0, lambda_glr, sched.llr_init_iterations, false)?.images;
    for it in 0..sched.llr_iterations {
        let (r, _) = data_residual(&op, &x, d)?;
        let grad = op.adjoint_array(&r)?;
        let step = &x - &grad;
        x = blocks.prox(&step, lambda_llr);
        check_finite(&x, sched.llr_init_iterations + it)?;
    }
    EchoSeries::new(k.te_ms().to_vec(), x)
}

/// Grid search of the relative GLR weight over `candidates`; `score` rates a
/// reconstruction (lower is better). Returns `(best fraction, scores)`.
pub fn tune_glr_lambda(
    k: &KSpaceSet,
    candidates: &[f64],
    score: impl Fn(&EchoSeries) -> Result<f64>,
) -> Result<(f64, Vec<f64>)> {
    let mut scores = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let sched = IstaSchedule {
            lambda_glr: Lambda::RelativeToSigmaMax(c),
            ..IstaSchedule::default()
        };
        scores.push(score(&recon_glr(k, &sched)?)?);
    }
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| candidates[i])
        .ok_or_else(|| Error::invalid("no lambda candidates"))?;
    Ok((best, scores))
}
