//! Centered, orthonormal 2-D discrete Fourier transforms.
//!
//! Convention fixed for the whole crate: `fft2c(x)(j,k)` is the unitary DFT
//! with the DC bin at `(ny/2, nx/2)`,
//!
//! ```text
//! fft2c(x)[j,k] = (1/sqrt(ny*nx)) * sum_{y,x} img[y,x]
//!                  * exp(-i*2*pi*((j-cy)(y-cy)/ny + (k-cx)(x-cx)/nx))
//! ```
//!
//! with `cy = ny/2`, `cx = nx/2`. `ifft2c` is the exact inverse (and adjoint).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::CTensor;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// In-place 1-D centered unitary transform of a contiguous line.
///
/// `inverse = false`: divide by sqrt(n) after the raw forward FFT;
/// `inverse = true`: rustfft's unscaled inverse, likewise divided by sqrt(n).
pub fn cfft1_inplace(line: &mut [Complex64], inverse: bool) {
    let n = line.len();
    let c = n / 2;
    // ifftshift: rotate left by c (for even n, shift and inverse shift agree)
    line.rotate_left(c);
    plan(n, inverse).process(line);
    line.rotate_left(c);
    let s = 1.0 / (n as f64).sqrt();
    for v in line.iter_mut() {
        *v *= s;
    }
}

fn transform_rows(data: &mut [Complex64], ny: usize, nx: usize, inverse: bool) {
    for row in 0..ny {
        cfft1_inplace(&mut data[row * nx..(row + 1) * nx], inverse);
    }
}

fn transform_cols(data: &mut [Complex64], ny: usize, nx: usize, inverse: bool) {
    let mut col = vec![Complex64::new(0.0, 0.0); ny];
    for x in 0..nx {
        for y in 0..ny {
            col[y] = data[y * nx + x];
        }
        cfft1_inplace(&mut col, inverse);
        for y in 0..ny {
            data[y * nx + x] = col[y];
        }
    }
}

fn fft2c_plane(data: &mut [Complex64], ny: usize, nx: usize, inverse: bool) {
    transform_cols(data, ny, nx, inverse);
    transform_rows(data, ny, nx, inverse);
}

fn last2(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::validation("expected at least a 2-D tensor"));
    }
    let nx = shape[shape.len() - 1];
    let ny = shape[shape.len() - 2];
    let batch: usize = shape[..shape.len() - 2].iter().product();
    Ok((batch, ny, nx))
}

/// Centered orthonormal forward 2-D DFT over the last two axes.
pub fn fft2c(img: &CTensor) -> Result<CTensor> {
    img.check_finite("fft2c input")?;
    Ok(fft2c_unchecked(img, false))
}

/// Centered orthonormal inverse 2-D DFT over the last two axes.
pub fn ifft2c(k: &CTensor) -> Result<CTensor> {
    k.check_finite("ifft2c input")?;
    Ok(fft2c_unchecked(k, true))
}

/// Transform without the finite-value gate; internal hot paths only.
pub(crate) fn fft2c_unchecked(t: &CTensor, inverse: bool) -> CTensor {
    let (batch, ny, nx) = last2(&t.shape).expect("tensor must be at least 2-D");
    let mut out = t.clone();
    for b in 0..batch {
        fft2c_plane(&mut out.data[b * ny * nx..(b + 1) * ny * nx], ny, nx, inverse);
    }
    out
}
