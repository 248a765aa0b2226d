//! Per-sample layer kernels on channel-major buffers `[c, h, w]`.

/// `c[m, n] = alpha * a[m, k] b[k, n] + beta * c`, with explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe row/column-major views lying entirely
    // inside `a`, `b` and `c`, whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds `x` into columns `[cin*k*k, ho*wo]`; rows ordered `(ci, ky, kx)`.
pub fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns `(output [cout, ho, wo], cols)`.
pub fn conv_forward(g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.patch();
    let mut cols = vec![0.0; kk * p];
    im2col(g, x, &mut cols);
    let mut out = vec![0.0; g.cout * p];
    gemm(g.cout, kk, p, weight, (kk as isize, 1), &cols, (p as isize, 1), 0.0, &mut out);
    if let Some(b) = bias {
        for (co, row) in out.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    (out, cols)
}

/// Convolution backward for one sample. Accumulates into `dweight` and
/// `dbias`; returns the input gradient.
pub fn conv_backward(
    g: &ConvGeom,
    weight: &[f64],
    cols: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.patch();
    // dW[cout, kk] += dout[cout, p] * cols^T
    gemm(g.cout, p, kk, dout, (p as isize, 1), cols, (1, p as isize), 1.0, dweight);
    if let Some(db) = dbias {
        for (co, row) in dout.chunks_exact(p).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
    }
    // dcols[kk, p] = W^T * dout
    let mut dcols = vec![0.0; kk * p];
    gemm(kk, g.cout, p, weight, (1, kk as isize), dout, (p as isize, 1), 0.0, &mut dcols);
    let mut dx = vec![0.0; g.cin * g.h * g.w];
    col2im(g, &dcols, &mut dx);
    dx
}

/// 2x2 stride-2 transposed convolution. `weight` is `[cout, 2, 2, cin]`;
/// input `[cin, h, w]`, output `[cout, 2h, 2w]`.
pub fn convt_forward(cin: usize, cout: usize, h: usize, w: usize, weight: &[f64], x: &[f64]) -> Vec<f64> {
    let p = h * w;
    let mut taps = vec![0.0; cout * 4 * p];
    gemm(cout * 4, cin, p, weight, (cin as isize, 1), x, (p as isize, 1), 0.0, &mut taps);
    let mut out = vec![0.0; cout * 4 * p];
    let w2 = 2 * w;
    for co in 0..cout {
        for t in 0..4 {
            let (dy, dx) = (t / 2, t % 2);
            let src = &taps[(co * 4 + t) * p..][..p];
            let dst = &mut out[co * 4 * p..][..4 * p];
            for y in 0..h {
                for x in 0..w {
                    dst[(2 * y + dy) * w2 + 2 * x + dx] = src[y * w + x];
                }
            }
        }
    }
    out
}

/// Backward of [`convt_forward`]; accumulates into `dweight`, returns `dx`.
pub fn convt_backward(
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    x: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
) -> Vec<f64> {
    let p = h * w;
    let w2 = 2 * w;
    let mut dtaps = vec![0.0; cout * 4 * p];
    for co in 0..cout {
        for t in 0..4 {
            let (dy, dx) = (t / 2, t % 2);
            let src = &dout[co * 4 * p..][..4 * p];
            let dst = &mut dtaps[(co * 4 + t) * p..][..p];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(2 * y + dy) * w2 + 2 * x + dx];
                }
            }
        }
    }
    // dW[cout*4, cin] += dtaps[cout*4, p] * x^T
    gemm(cout * 4, p, cin, &dtaps, (p as isize, 1), x, (1, p as isize), 1.0, dweight);
    // dx[cin, p] = W^T * dtaps
    let mut dx = vec![0.0; cin * p];
    gemm(cin, cout * 4, p, weight, (1, cin as isize), &dtaps, (p as isize, 1), 0.0, &mut dx);
    dx
}
