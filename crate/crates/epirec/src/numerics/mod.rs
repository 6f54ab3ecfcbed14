//! Deterministic array utilities shared by all modules: centered 2-D DFTs,
//! finite-difference gradients, windowed statistics, and a seedable random
//! source.

mod fft;
mod rng;

pub use fft::{cfft1_inplace, fft2c, ifft2c};
pub(crate) use fft::fft2c_unchecked;
pub use rng::RandomSource;

use crate::error::{Error, Result};
use crate::tensor::RTensor;

/// 2-D Cartesian image grid. `ny` is the phase-encode axis (rows), `nx`
/// the readout axis (columns).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2D {
    pub ny: usize,
    pub nx: usize,
    pub fov_y_mm: f64,
    pub fov_x_mm: f64,
}

impl Grid2D {
    pub fn new(ny: usize, nx: usize, fov_y_mm: f64, fov_x_mm: f64) -> Result<Self> {
        if ny < 8 || nx < 8 || ny % 2 != 0 || nx % 2 != 0 {
            return Err(Error::validation(format!(
                "grid must be at least 8x8 with even sides, got {ny}x{nx}"
            )));
        }
        if fov_y_mm <= 0.0 || fov_x_mm <= 0.0 {
            return Err(Error::validation("field of view must be positive"));
        }
        Ok(Grid2D {
            ny,
            nx,
            fov_y_mm,
            fov_x_mm,
        })
    }

    pub fn square(n: usize, fov_mm: f64) -> Result<Self> {
        Grid2D::new(n, n, fov_mm, fov_mm)
    }

    pub fn numel(&self) -> usize {
        self.ny * self.nx
    }

    /// Normalized coordinate of pixel row `i` in [-1, 1); zero at `ny/2`,
    /// matching the DFT center.
    #[inline]
    pub fn norm_y(&self, i: usize) -> f64 {
        (i as f64 - self.ny as f64 / 2.0) / (self.ny as f64 / 2.0)
    }

    #[inline]
    pub fn norm_x(&self, j: usize) -> f64 {
        (j as f64 - self.nx as f64 / 2.0) / (self.nx as f64 / 2.0)
    }

    /// Physical position (mm) of pixel (i, j) relative to the FOV center.
    #[inline]
    pub fn pos_mm(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.norm_y(i) * self.fov_y_mm / 2.0,
            self.norm_x(j) * self.fov_x_mm / 2.0,
        )
    }
}

/// Forward finite differences along y and x with a zero-padded last
/// row/column, so the output shapes match the input.
pub fn grad2(img: &RTensor) -> (RTensor, RTensor) {
    assert_eq!(img.shape.len(), 2, "grad2 expects a 2-D image");
    let (ny, nx) = (img.shape[0], img.shape[1]);
    let mut gy = RTensor::zeros(&img.shape);
    let mut gx = RTensor::zeros(&img.shape);
    for i in 0..ny {
        for j in 0..nx {
            if i + 1 < ny {
                *gy.at2_mut(i, j) = img.at2(i + 1, j) - img.at2(i, j);
            }
            if j + 1 < nx {
                *gx.at2_mut(i, j) = img.at2(i, j + 1) - img.at2(i, j);
            }
        }
    }
    (gy, gx)
}

/// Mean and variance over a rectangular window clipped to the image,
/// centered at (i, j) with half-width `half`.
pub fn window_stats(img: &RTensor, i: usize, j: usize, half: usize) -> (f64, f64) {
    let (ny, nx) = (img.shape[0], img.shape[1]);
    let y0 = i.saturating_sub(half);
    let y1 = (i + half + 1).min(ny);
    let x0 = j.saturating_sub(half);
    let x1 = (j + half + 1).min(nx);
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let v = img.at2(y, x);
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    (mean, (sq / n - mean * mean).max(0.0))
}

/// Convenience constructor for the crate's random source.
pub fn seeded_rng(seed: u64) -> RandomSource {
    RandomSource::from_seed(seed)
}

/// Gaussian elimination with partial pivoting; `b` is overwritten with the
/// solution. For the small dense systems in the initializer and tensor fit.
pub(crate) fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<()> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::numerical("singular dense system"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * b[c];
        }
        b[col] = acc / a[col][col];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rel_err_c, CTensor};
    use num_complex::Complex64;

    fn random_cimage(rng: &mut RandomSource, ny: usize, nx: usize) -> CTensor {
        let data = (0..ny * nx)
            .map(|_| Complex64::new(rng.normal(), rng.normal()))
            .collect();
        CTensor::from_vec(&[ny, nx], data)
    }

    #[test]
    fn fft_round_trip_and_parseval() {
        let mut rng = seeded_rng(3);
        let x = random_cimage(&mut rng, 16, 12);
        let k = fft2c(&x).unwrap();
        let back = ifft2c(&k).unwrap();
        assert!(rel_err_c(&back, &x) < 1e-12);
        assert!((k.norm2() - x.norm2()).abs() / x.norm2() < 1e-12);
    }

    #[test]
    fn fft_adjoint_identity() {
        let mut rng = seeded_rng(4);
        let a = random_cimage(&mut rng, 12, 16);
        let b = random_cimage(&mut rng, 12, 16);
        let lhs = fft2c(&a).unwrap().dot(&b);
        let rhs = a.dot(&ifft2c(&b).unwrap());
        assert!((lhs - rhs).norm() < 1e-12 * a.norm2() * b.norm2());
    }

    #[test]
    fn grad2_constant_is_zero() {
        let img = RTensor::full(&[8, 8], 3.25);
        let (gy, gx) = grad2(&img);
        assert!(gy.data.iter().all(|&v| v == 0.0));
        assert!(gx.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad2_ramp() {
        let mut img = RTensor::zeros(&[8, 8]);
        for i in 0..8 {
            for j in 0..8 {
                *img.at2_mut(i, j) = i as f64;
            }
        }
        let (gy, _) = grad2(&img);
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == 7 { 0.0 } else { 1.0 };
                assert_eq!(gy.at2(i, j), expect);
            }
        }
    }

    #[test]
    fn grad2_matches_direct_subtraction() {
        let mut rng = seeded_rng(5);
        let data: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let img = RTensor::from_vec(&[8, 8], data);
        let (gy, gx) = grad2(&img);
        for i in 0..8 {
            for j in 0..8 {
                let ey = if i < 7 { img.at2(i + 1, j) - img.at2(i, j) } else { 0.0 };
                let ex = if j < 7 { img.at2(i, j + 1) - img.at2(i, j) } else { 0.0 };
                assert_eq!(gy.at2(i, j), ey);
                assert_eq!(gx.at2(i, j), ex);
            }
        }
    }

    #[test]
    fn grid_validation() {
        assert!(Grid2D::new(6, 8, 220.0, 220.0).is_err());
        assert!(Grid2D::new(9, 8, 220.0, 220.0).is_err());
        assert!(Grid2D::new(8, 8, 0.0, 220.0).is_err());
        assert!(Grid2D::new(64, 64, 220.0, 220.0).is_ok());
    }
}
