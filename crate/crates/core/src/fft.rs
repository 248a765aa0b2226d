//! Centered, unitary 2D FFT.
//!
//! `forward = fftshift . FFT . ifftshift / sqrt(ny nx)`, so DC sits at index
//! `(ny / 2, nx / 2)` and the transform preserves the l2 norm.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Fft2 {
    ny: usize,
    nx: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("ny", &self.ny).field("nx", &self.nx).finish()
    }
}

impl Fft2 {
    pub fn new(ny: usize, nx: usize) -> Result<Self> {
        if ny == 0 || nx == 0 {
            return Err(Error::shape("FFT of a zero-size array"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            ny,
            nx,
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
        })
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn len(&self) -> usize {
        self.ny * self.nx
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place centered unitary forward transform of a row-major `[ny, nx]` image.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    /// In-place centered unitary inverse transform.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    fn transform(&self, data: &mut [Complex64], forward: bool) {
        let (ny, nx) = (self.ny, self.nx);
        assert_eq!(data.len(), ny * nx, "buffer does not match FFT size");
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        let (hy, hx) = (ny / 2, nx / 2);

        // ifftshift into a transposed scratch buffer: scratch[x][y] = data[(y+hy)%ny][(x+hx)%nx]
        let mut t = vec![Complex64::new(0.0, 0.0); ny * nx];
        for y in 0..ny {
            let sy = (y + hy) % ny;
            for x in 0..nx {
                t[x * ny + y] = data[sy * nx + (x + hx) % nx];
            }
        }
        col.process(&mut t);
        // back to row-major
        for x in 0..nx {
            for y in 0..ny {
                data[y * nx + x] = t[x * ny + y];
            }
        }
        row.process(data);
        // fftshift: out[(y+hy)%ny][(x+hx)%nx] = data[y][x]; the shift moves index
        // 0 to floor(n/2), the inverse mapping of the ifftshift above.
        let scale = 1.0 / ((ny * nx) as f64).sqrt();
        t.copy_from_slice(data);
        let (sy, sx) = (ny - hy, nx - hx);
        for y in 0..ny {
            let src_y = (y + sy) % ny;
            for x in 0..nx {
                data[y * nx + x] = t[src_y * nx + (x + sx) % nx] * scale;
            }
        }
    }
}

pub fn fft2_centered(image: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let (ny, nx) = image.dim();
    let plan = Fft2::new(ny, nx)?;
    let mut buf: Vec<Complex64> = image.iter().copied().collect();
    plan.forward(&mut buf);
    Ok(Array2::from_shape_vec((ny, nx), buf).expect("shape preserved"))
}

pub fn ifft2_centered(kspace: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let (ny, nx) = kspace.dim();
    let plan = Fft2::new(ny, nx)?;
    let mut buf: Vec<Complex64> = kspace.iter().copied().collect();
    plan.inverse(&mut buf);
    Ok(Array2::from_shape_vec((ny, nx), buf).expect("shape preserved"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(ny: usize, nx: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = crate::rng::rng(seed);
        Array2::from_shape_fn((ny, nx), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn norm(a: &Array2<Complex64>) -> f64 {
        a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Direct O(N^2) centered DFT used as an independent reference.
    fn naive(image: &Array2<Complex64>) -> Array2<Complex64> {
        let (ny, nx) = image.dim();
        let (cy, cx) = ((ny / 2) as f64, (nx / 2) as f64);
        let s = 1.0 / ((ny * nx) as f64).sqrt();
        Array2::from_shape_fn((ny, nx), |(ky, kx)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..ny {
                for x in 0..nx {
                    let ph = -2.0 * std::f64::consts::PI
                        * ((ky as f64 - cy) * (y as f64 - cy) / ny as f64
                            + (kx as f64 - cx) * (x as f64 - cx) / nx as f64);
                    acc += image[[y, x]] * Complex64::from_polar(1.0, ph);
                }
            }
            acc * s
        })
    }

    #[test]
    fn centered_delta_gives_constant() {
        for (ny, nx) in [(8, 8), (6, 10), (5, 7)] {
            let mut img = Array2::zeros((ny, nx));
            img[[ny / 2, nx / 2]] = Complex64::new(1.0, 0.0);
            let k = fft2_centered(&img).unwrap();
            let c = 1.0 / ((ny * nx) as f64).sqrt();
            assert!(k.iter().all(|v| (v - Complex64::new(c, 0.0)).norm() < 1e-14), "{ny}x{nx}");
        }
    }

    #[test]
    fn matches_direct_dft_and_round_trips() {
        for (ny, nx, seed) in [(8, 8, 1), (6, 10, 2), (5, 7, 3), (1, 4, 4)] {
            let x = random(ny, nx, seed);
            let k = fft2_centered(&x).unwrap();
            let reference = naive(&x);
            for (a, b) in k.iter().zip(reference.iter()) {
                assert!((a - b).norm() < 1e-12, "{ny}x{nx}");
            }
            assert!((norm(&x) - norm(&k)).abs() < 1e-10 * norm(&x));
            let back = ifft2_centered(&k).unwrap();
            let err: f64 = back.iter().zip(x.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            assert!(err < 1e-6 * norm(&x));
        }
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(fft2_centered(&Array2::zeros((0, 4))).is_err());
        assert!(Fft2::new(4, 0).is_err());
    }
}
