//! Masked Fourier encoding `E = M F` per echo, its adjoint, and zero-filled
//! reconstruction.

use ndarray::{Array3, Axis};
use num_complex::Complex64;

use crate::data::{EchoSeries, KSpaceSet};
use crate::error::{Error, Result};
use crate::exec;
use crate::fft::Fft2;
use crate::sampling::MaskSet;

#[derive(Debug, Clone)]
pub struct EncodingOp {
    fft: Fft2,
    masks: MaskSet,
}

impl EncodingOp {
    pub fn new(ny: usize, nx: usize, masks: MaskSet) -> Result<Self> {
        if masks.ny() != ny {
            return Err(Error::shape(format!("mask has {} ky lines, image has {ny}", masks.ny())));
        }
        Ok(Self {
            fft: Fft2::new(ny, nx)?,
            masks,
        })
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    fn check(&self, dim: (usize, usize, usize)) -> Result<()> {
        let (t, ny, nx) = dim;
        if t != self.masks.echoes() {
            return Err(Error::shape(format!(
                "{t} echoes but the mask-set has {}",
                self.masks.echoes()
            )));
        }
        if ny != self.fft.ny() || nx != self.fft.nx() {
            return Err(Error::shape(format!(
                "image {ny}x{nx} does not match operator {}x{}",
                self.fft.ny(),
                self.fft.nx()
            )));
        }
        Ok(())
    }

    /// `d_j = M_j F x_j` on a raw `[t, ny, nx]` array.
    pub fn forward_array(&self, images: &Array3<Complex64>) -> Result<Array3<Complex64>> {
        self.check(images.dim())?;
        let mut out = images.as_standard_layout().into_owned();
        let nx = self.fft.nx();
        let plane = self.fft.len();
        exec::for_each_chunk_mut(out.as_slice_mut().expect("standard layout"), plane, |echo, buf| {
            self.fft.forward(buf);
            self.masks.apply_echo(echo, buf, nx);
        });
        Ok(out)
    }

    /// `x_j = F^H M_j d_j` on a raw `[t, ny, nx]` array.
    pub fn adjoint_array(&self, kspace: &Array3<Complex64>) -> Result<Array3<Complex64>> {
        self.check(kspace.dim())?;
        let mut out = kspace.as_standard_layout().into_owned();
        let nx = self.fft.nx();
        let plane = self.fft.len();
        exec::for_each_chunk_mut(out.as_slice_mut().expect("standard layout"), plane, |echo, buf| {
            self.masks.apply_echo(echo, buf, nx);
            self.fft.inverse(buf);
        });
        Ok(out)
    }

    /// `E^H E x`, the normal operator.
    pub fn normal_array(&self, images: &Array3<Complex64>) -> Result<Array3<Complex64>> {
        let k = self.forward_array(images)?;
        self.adjoint_array(&k)
    }

    pub fn forward(&self, series: &EchoSeries) -> Result<KSpaceSet> {
        let k = self.forward_array(series.data())?;
        KSpaceSet::new(series.te_ms().to_vec(), k, self.masks.clone())
    }

    /// Zero-filled reconstruction `F^H M d`.
    pub fn adjoint(&self, k: &KSpaceSet) -> Result<EchoSeries> {
        let x = self.adjoint_array(k.data())?;
        EchoSeries::new(k.te_ms().to_vec(), x)
    }
}

/// Operator matching a k-space set's own mask.
pub fn operator_for(k: &KSpaceSet) -> Result<EncodingOp> {
    EncodingOp::new(k.ny(), k.nx(), k.masks().clone())
}

/// Retrospective undersampling of a fully sampled series; returns the
/// measurements and their zero-filled reconstruction.
pub fn undersample(series: &EchoSeries, masks: &MaskSet) -> Result<(KSpaceSet, EchoSeries)> {
    let op = EncodingOp::new(series.ny(), series.nx(), masks.clone())?;
    let k = op.forward(series)?;
    let zf = op.adjoint(&k)?;
    Ok((k, zf))
}

/// `sum conj(a) b` over all samples.
pub fn inner(a: &Array3<Complex64>, b: &Array3<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &Array3<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Energy per ky line of echo `echo`, summed over kx.
pub fn line_energy(k: &Array3<Complex64>, echo: usize) -> Vec<f64> {
    k.index_axis(Axis(0), echo)
        .outer_iter()
        .map(|row| row.iter().map(|v| v.norm_sqr()).sum())
        .collect()
}
