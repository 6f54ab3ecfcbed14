//! Shared computational kernels for the off-resonance EPI operator.
//!
//! The forward operator evaluates, for each phase-encode line `l` acquired
//! at time `t_l`, line `l` of `fft2c(img .* exp(+i*2*pi*f*t_l))`. Rather
//! than running a full 2-D FFT per line, each output line is formed by a
//! direct centered DFT along y at frequency `l` followed by a 1-D centered
//! FFT along x; this is algebraically identical and costs O(ny^2 * nx) per
//! image for all lines.
//!
//! The table below premultiplies the per-line off-resonance phase with the
//! y-DFT kernel, so both the forward and the exact adjoint reduce to one
//! complex multiply-add per element per line.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::numerics::cfft1_inplace;
use crate::tensor::{CTensor, RTensor};

use super::EpiTiming;

/// Precomputed per-line tables for one (field, timing) pair.
pub struct LinePhases {
    pub ny: usize,
    pub nx: usize,
    /// Acquisition time of each PE line (seconds, polarity folded in).
    pub t: Vec<f64>,
    /// `pw[l][y*nx+x] = exp(+i*2*pi*f[y,x]*t_l) * omega_l[y]` where
    /// `omega_l[y] = exp(-i*2*pi*(l-c)(y-c)/ny) / sqrt(ny)`.
    pw: Vec<Complex64>,
}

impl LinePhases {
    pub fn build(field: &RTensor, timing: &EpiTiming) -> LinePhases {
        let ny = field.shape[0];
        let nx = field.shape[1];
        let c = ny as f64 / 2.0;
        let t: Vec<f64> = (0..ny).map(|l| timing.line_time(l)).collect();
        let inv_sqrt_ny = 1.0 / (ny as f64).sqrt();
        let mut pw = vec![Complex64::new(0.0, 0.0); ny * ny * nx];
        for l in 0..ny {
            let base = l * ny * nx;
            for y in 0..ny {
                let ang_w = -2.0 * PI * (l as f64 - c) * (y as f64 - c) / ny as f64;
                let w = Complex64::new(ang_w.cos(), ang_w.sin()) * inv_sqrt_ny;
                for x in 0..nx {
                    let ph = 2.0 * PI * field.data[y * nx + x] * t[l];
                    pw[base + y * nx + x] = Complex64::new(ph.cos(), ph.sin()) * w;
                }
            }
        }
        LinePhases { ny, nx, t, pw }
    }

    #[inline]
    pub fn line(&self, l: usize) -> &[Complex64] {
        &self.pw[l * self.ny * self.nx..(l + 1) * self.ny * self.nx]
    }
}

fn batch_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 2].iter().product()
}

/// Forward kernel: rows in `lines` get line `l` of
/// `fft2c(x .* exp(i*2*pi*f*t_l))`; all other rows are zero. Leading axes
/// of `x` are independent channels.
pub fn offres_fwd_kernel(x: &CTensor, ph: &LinePhases, lines: &[usize]) -> CTensor {
    let (ny, nx) = (ph.ny, ph.nx);
    let batch = batch_of(&x.shape);
    let mut out = CTensor::zeros(&x.shape);
    let mut acc = vec![Complex64::new(0.0, 0.0); nx];
    for b in 0..batch {
        let xb = &x.data[b * ny * nx..(b + 1) * ny * nx];
        for &l in lines {
            acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            let pw = ph.line(l);
            for y in 0..ny {
                let row = &xb[y * nx..(y + 1) * nx];
                let pwr = &pw[y * nx..(y + 1) * nx];
                for xx in 0..nx {
                    acc[xx] += row[xx] * pwr[xx];
                }
            }
            cfft1_inplace(&mut acc, false);
            out.data[b * ny * nx + l * nx..b * ny * nx + (l + 1) * nx]
                .copy_from_slice(&acc);
        }
    }
    out
}

/// Exact adjoint of [`offres_fwd_kernel`] over the same line set.
pub fn offres_adj_kernel(k: &CTensor, ph: &LinePhases, lines: &[usize]) -> CTensor {
    let (ny, nx) = (ph.ny, ph.nx);
    let batch = batch_of(&k.shape);
    let mut out = CTensor::zeros(&k.shape);
    let mut u = vec![Complex64::new(0.0, 0.0); nx];
    for b in 0..batch {
        let kb = &k.data[b * ny * nx..(b + 1) * ny * nx];
        let ob = &mut out.data[b * ny * nx..(b + 1) * ny * nx];
        for &l in lines {
            u.copy_from_slice(&kb[l * nx..(l + 1) * nx]);
            cfft1_inplace(&mut u, true);
            let pw = ph.line(l);
            for y in 0..ny {
                let orow = &mut ob[y * nx..(y + 1) * nx];
                let pwr = &pw[y * nx..(y + 1) * nx];
                for xx in 0..nx {
                    orow[xx] += pwr[xx].conj() * u[xx];
                }
            }
        }
    }
    out
}

/// Gradient of a real loss w.r.t. the field map through the forward kernel.
///
/// Given the cotangent `g_out` of the kernel output and the input `x`,
/// accumulates `df[y,x] -= 2*pi*t_l * Im(conj(u_l[x]) * x[y,x] * pw_l[y,x])`
/// with `u_l = icfft1(g_out[l,:])`, summed over lines and channels.
pub fn offres_fwd_field_grad(
    x: &CTensor,
    g_out: &CTensor,
    ph: &LinePhases,
    lines: &[usize],
    df: &mut RTensor,
) {
    let (ny, nx) = (ph.ny, ph.nx);
    let batch = batch_of(&x.shape);
    let mut u = vec![Complex64::new(0.0, 0.0); nx];
    for b in 0..batch {
        let xb = &x.data[b * ny * nx..(b + 1) * ny * nx];
        let gb = &g_out.data[b * ny * nx..(b + 1) * ny * nx];
        for &l in lines {
            u.copy_from_slice(&gb[l * nx..(l + 1) * nx]);
            cfft1_inplace(&mut u, true);
            let scale = 2.0 * PI * ph.t[l];
            if scale == 0.0 {
                continue;
            }
            let pw = ph.line(l);
            for y in 0..ny {
                for xx in 0..nx {
                    let z = u[xx].conj() * xb[y * nx + xx] * pw[y * nx + xx];
                    df.data[y * nx + xx] -= scale * z.im;
                }
            }
        }
    }
}

/// Gradient of a real loss w.r.t. the field map through the adjoint kernel.
///
/// `df[y,x] += 2*pi*t_l * Im(conj(g_out[y,x]) * conj(pw_l[y,x]) * u_l[x])`
/// with `u_l = icfft1(k[l,:])`, summed over lines and channels.
pub fn offres_adj_field_grad(
    k: &CTensor,
    g_out: &CTensor,
    ph: &LinePhases,
    lines: &[usize],
    df: &mut RTensor,
) {
    let (ny, nx) = (ph.ny, ph.nx);
    let batch = batch_of(&k.shape);
    let mut u = vec![Complex64::new(0.0, 0.0); nx];
    for b in 0..batch {
        let kb = &k.data[b * ny * nx..(b + 1) * ny * nx];
        let gb = &g_out.data[b * ny * nx..(b + 1) * ny * nx];
        for &l in lines {
            u.copy_from_slice(&kb[l * nx..(l + 1) * nx]);
            cfft1_inplace(&mut u, true);
            let scale = 2.0 * PI * ph.t[l];
            if scale == 0.0 {
                continue;
            }
            let pw = ph.line(l);
            for y in 0..ny {
                for xx in 0..nx {
                    let z = gb[y * nx + xx].conj() * pw[y * nx + xx].conj() * u[xx];
                    df.data[y * nx + xx] += scale * z.im;
                }
            }
        }
    }
}
