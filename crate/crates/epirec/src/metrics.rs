//! Quantitative evaluation against ground truth: image metrics (NRMSE,
//! windowed correlation, SSIM, high-frequency error norm), field RMSE,
//! real-value shot combination, and a voxelwise diffusion-tensor fit with
//! fractional anisotropy.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::solve_dense;
use crate::phantom::DiffusionDirection;
use crate::tensor::{CTensor, RTensor};

/// `|| |x| - |ref| ||_2 / || |ref| ||_2`. Reference-normalized, so
/// intentionally asymmetric in its arguments.
pub fn nrmse(x: &RTensor, reference: &RTensor) -> Result<f64> {
    if x.shape != reference.shape {
        return Err(Error::validation("nrmse inputs must share a grid"));
    }
    let den = reference.norm2();
    if den == 0.0 {
        return Err(Error::validation("nrmse reference is all zero"));
    }
    Ok(x.sub(reference).norm2() / den)
}

/// Mean windowed Pearson correlation of magnitudes over all fully interior
/// windows; zero-variance windows are excluded from the mean.
pub fn lcc(x: &RTensor, reference: &RTensor, window: usize) -> Result<f64> {
    if x.shape != reference.shape {
        return Err(Error::validation("lcc inputs must share a grid"));
    }
    if window % 2 == 0 || window < 3 {
        return Err(Error::validation("lcc window must be odd and >= 3"));
    }
    let (ny, nx) = (x.shape[0], x.shape[1]);
    let h = window / 2;
    if ny < window || nx < window {
        return Err(Error::validation("image smaller than the lcc window"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for cy in h..ny - h {
        for cx in h..nx - h {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            let n = (window * window) as f64;
            for dy in 0..window {
                for dx in 0..window {
                    let a = x.at2(cy - h + dy, cx - h + dx);
                    let b = reference.at2(cy - h + dy, cx - h + dx);
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let va = saa - sa * sa / n;
            let vb = sbb - sb * sb / n;
            if va <= 1e-24 || vb <= 1e-24 {
                continue;
            }
            sum += (sab - sa * sb / n) / (va * vb).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::validation("lcc: no windows with variance"));
    }
    Ok(sum / count as f64)
}

fn gaussian_kernel_2d(size: usize, sigma: f64) -> Vec<f64> {
    let h = (size / 2) as isize;
    let mut k = Vec::with_capacity(size * size);
    let mut sum = 0.0;
    for y in -h..=h {
        for x in -h..=h {
            let v = (-((y * y + x * x) as f64) / (2.0 * sigma * sigma)).exp();
            k.push(v);
            sum += v;
        }
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// SSIM on magnitudes jointly normalized to [0, 1]: 11x11 Gaussian window
/// (sigma 1.5), k1 = 0.01, k2 = 0.03, averaged over interior windows.
pub fn ssim(x: &RTensor, reference: &RTensor) -> Result<f64> {
    if x.shape != reference.shape {
        return Err(Error::validation("ssim inputs must share a grid"));
    }
    let (ny, nx) = (x.shape[0], x.shape[1]);
    let size = 11usize;
    let h = size / 2;
    if ny < size || nx < size {
        return Err(Error::validation("image smaller than the ssim window"));
    }
    let peak = x.max_abs().max(reference.max_abs()).max(1e-300);
    let a = x.scale(1.0 / peak);
    let b = reference.scale(1.0 / peak);
    let kern = gaussian_kernel_2d(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));

    let mut sum = 0.0;
    let mut count = 0usize;
    for cy in h..ny - h {
        for cx in h..nx - h {
            let mut ma = 0.0;
            let mut mb = 0.0;
            for dy in 0..size {
                for dx in 0..size {
                    let w = kern[dy * size + dx];
                    ma += w * a.at2(cy - h + dy, cx - h + dx);
                    mb += w * b.at2(cy - h + dy, cx - h + dx);
                }
            }
            let mut va = 0.0;
            let mut vb = 0.0;
            let mut cov = 0.0;
            for dy in 0..size {
                for dx in 0..size {
                    let w = kern[dy * size + dx];
                    let da = a.at2(cy - h + dy, cx - h + dx) - ma;
                    let db = b.at2(cy - h + dy, cx - h + dx) - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

fn log_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let h = (size / 2) as isize;
    let s2 = sigma * sigma;
    let mut k = Vec::with_capacity(size * size);
    for y in -h..=h {
        for x in -h..=h {
            let r2 = (y * y + x * x) as f64;
            k.push((r2 / (2.0 * s2) - 1.0) * (-r2 / (2.0 * s2)).exp());
        }
    }
    // zero sum so constant offsets vanish exactly
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    for v in k.iter_mut() {
        *v -= mean;
    }
    k
}

fn convolve_valid(img: &RTensor, kernel: &[f64], size: usize) -> RTensor {
    let (ny, nx) = (img.shape[0], img.shape[1]);
    let out_y = ny - size + 1;
    let out_x = nx - size + 1;
    let mut out = RTensor::zeros(&[out_y, out_x]);
    for y in 0..out_y {
        for x in 0..out_x {
            let mut acc = 0.0;
            for dy in 0..size {
                for dx in 0..size {
                    acc += kernel[dy * size + dx] * img.at2(y + dy, x + dx);
                }
            }
            *out.at2_mut(y, x) = acc;
        }
    }
    out
}

/// High-frequency error norm: Laplacian-of-Gaussian (sigma 1.5, 15x15,
/// valid region) responses compared in relative L2.
pub fn hfen(x: &RTensor, reference: &RTensor) -> Result<f64> {
    if x.shape != reference.shape {
        return Err(Error::validation("hfen inputs must share a grid"));
    }
    let size = 15usize;
    if x.shape[0] < size || x.shape[1] < size {
        return Err(Error::validation("image smaller than the LoG kernel"));
    }
    let kern = log_kernel(size, 1.5);
    let lx = convolve_valid(x, &kern, size);
    let lr = convolve_valid(reference, &kern, size);
    let den = lr.norm2();
    if den <= 1e-300 {
        return Err(Error::validation("hfen reference has no high-frequency content"));
    }
    Ok(lx.sub(&lr).norm2() / den)
}

/// RMSE in Hz over a support mask.
pub fn field_rmse(f: &RTensor, f_ref: &RTensor, support: &[bool]) -> Result<f64> {
    if f.shape != f_ref.shape || support.len() != f.len() {
        return Err(Error::validation("field_rmse inputs must share a grid"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..f.len() {
        if support[i] {
            let d = f.data[i] - f_ref.data[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::validation("field_rmse: empty support"));
    }
    Ok((sum / count as f64).sqrt())
}

/// Support mask from a magnitude image: everything above `frac` of the peak.
pub fn support_mask(mag: &RTensor, frac: f64) -> Vec<bool> {
    let thresh = frac * mag.max_abs();
    mag.data.iter().map(|&v| v > thresh).collect()
}

fn gaussian_blur_complex(img: &CTensor, sigma: f64) -> CTensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kern = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kern.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let (ny, nx) = (img.shape[0] as isize, img.shape[1] as isize);
    // separable, renormalized at the borders
    let mut tmp = CTensor::zeros(&img.shape);
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut wsum = 0.0;
            for (ki, w) in kern.iter().enumerate() {
                let yy = y + ki as isize - radius;
                if yy >= 0 && yy < ny {
                    acc += img.at2(yy as usize, x as usize) * *w;
                    wsum += w;
                }
            }
            *tmp.at2_mut(y as usize, x as usize) = acc / wsum;
        }
    }
    let mut out = CTensor::zeros(&img.shape);
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut wsum = 0.0;
            for (ki, w) in kern.iter().enumerate() {
                let xx = x + ki as isize - radius;
                if xx >= 0 && xx < nx {
                    acc += tmp.at2(y as usize, xx as usize) * *w;
                    wsum += w;
                }
            }
            *out.at2_mut(y as usize, x as usize) = acc / wsum;
        }
    }
    out
}

/// Real-value combination across shots: remove each shot's smooth background
/// phase (the phase of a Gaussian-blurred copy, sigma 2 px), keep the real
/// part, and average.
pub fn real_value_combine(shot_images: &[CTensor]) -> Result<RTensor> {
    if shot_images.is_empty() {
        return Err(Error::validation("need at least one shot image"));
    }
    let shape = shot_images[0].shape.clone();
    let mut acc = RTensor::zeros(&shape);
    for img in shot_images {
        if img.shape != shape {
            return Err(Error::validation("shot images must share a grid"));
        }
        let smooth = gaussian_blur_complex(img, 2.0);
        for i in 0..img.len() {
            let ph = smooth.data[i].arg();
            let rot = img.data[i] * Complex64::from_polar(1.0, -ph);
            acc.data[i] += rot.re;
        }
    }
    Ok(acc.scale(1.0 / shot_images.len() as f64))
}

/// Fractional anisotropy from the eigenvalues of a symmetric tensor;
/// negative eigenvalues are clamped to zero first.
pub fn fa_from_eigenvalues(l: [f64; 3]) -> f64 {
    let l = [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)];
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let num: f64 = l.iter().map(|v| (v - mean) * (v - mean)).sum();
    let den: f64 = l.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        0.0
    } else {
        (1.5 * num / den).sqrt()
    }
}

/// Eigenvalues of a symmetric 3x3 matrix (analytic, descending order).
pub fn sym3_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| y.partial_cmp(x).unwrap());
        return d;
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let detb = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (detb / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    [l1, l2, l3]
}

/// Voxelwise log-linear least-squares diffusion tensor fit and FA map.
///
/// Solves `ln(S_d / S_0) = -b_d * g_d^T D g_d` for the six tensor
/// components at every voxel with positive signal, then derives FA from the
/// tensor eigenvalues.
pub fn dti_fit(
    dwis: &[RTensor],
    dirs: &[DiffusionDirection],
    b0: &RTensor,
) -> Result<RTensor> {
    if dwis.len() != dirs.len() {
        return Err(Error::validation("one image per direction required"));
    }
    if dwis.len() < 6 {
        return Err(Error::validation("need at least 6 diffusion directions"));
    }
    for img in dwis {
        if img.shape != b0.shape {
            return Err(Error::validation("dwi shape mismatch"));
        }
    }
    // design matrix rows: b * [gx^2, gy^2, gz^2, 2gxgy, 2gxgz, 2gygz]
    let rows: Vec<[f64; 6]> = dirs
        .iter()
        .map(|d| {
            let g = d.g;
            [
                d.b * g[0] * g[0],
                d.b * g[1] * g[1],
                d.b * g[2] * g[2],
                d.b * 2.0 * g[0] * g[1],
                d.b * 2.0 * g[0] * g[2],
                d.b * 2.0 * g[1] * g[2],
            ]
        })
        .collect();
    // normal matrix, shared by all voxels; rank failure is a direction-set
    // problem, caught once
    let mut ata = vec![vec![0.0; 6]; 6];
    for r in &rows {
        for i in 0..6 {
            for j in 0..6 {
                ata[i][j] += r[i] * r[j];
            }
        }
    }
    {
        let mut probe = ata.clone();
        let mut unit = vec![1.0; 6];
        solve_dense(&mut probe, &mut unit)
            .map_err(|_| Error::validation("rank-deficient diffusion direction set"))?;
    }

    let mut fa = RTensor::zeros(&b0.shape);
    for v in 0..b0.len() {
        let s0 = b0.data[v];
        if s0 <= 0.0 {
            continue;
        }
        let mut atb = [0.0; 6];
        let mut ok = true;
        for (r, img) in rows.iter().zip(dwis) {
            let s = img.data[v];
            if s <= 0.0 {
                ok = false;
                break;
            }
            let y = -(s / s0).ln();
            for i in 0..6 {
                atb[i] += r[i] * y;
            }
        }
        if !ok {
            continue;
        }
        let mut m = ata.clone();
        let mut rhs = atb.to_vec();
        if solve_dense(&mut m, &mut rhs).is_err() {
            continue;
        }
        let d = [
            [rhs[0], rhs[3], rhs[4]],
            [rhs[3], rhs[1], rhs[5]],
            [rhs[4], rhs[5], rhs[2]],
        ];
        fa.data[v] = fa_from_eigenvalues(sym3_eigenvalues(&d));
    }
    Ok(fa)
}

/// Fit the tensor at one voxel and return it; the refit-residual check in
/// the tests uses this.
pub fn dti_fit_voxel(
    signals: &[f64],
    dirs: &[DiffusionDirection],
    s0: f64,
) -> Result<[[f64; 3]; 3]> {
    if signals.len() != dirs.len() || signals.len() < 6 {
        return Err(Error::validation("need >= 6 signals"));
    }
    let rows: Vec<[f64; 6]> = dirs
        .iter()
        .map(|d| {
            let g = d.g;
            [
                d.b * g[0] * g[0],
                d.b * g[1] * g[1],
                d.b * g[2] * g[2],
                d.b * 2.0 * g[0] * g[1],
                d.b * 2.0 * g[0] * g[2],
                d.b * 2.0 * g[1] * g[2],
            ]
        })
        .collect();
    let mut ata = vec![vec![0.0; 6]; 6];
    let mut atb = vec![0.0; 6];
    for (r, &s) in rows.iter().zip(signals) {
        let y = -(s / s0).ln();
        for i in 0..6 {
            atb[i] += r[i] * y;
            for j in 0..6 {
                ata[i][j] += r[i] * r[j];
            }
        }
    }
    solve_dense(&mut ata, &mut atb)?;
    Ok([
        [atb[0], atb[3], atb[4]],
        [atb[3], atb[1], atb[5]],
        [atb[4], atb[5], atb[2]],
    ])
}

/// One method's metric row.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricSet {
    pub nrmse: f64,
    pub lcc: f64,
    pub ssim: f64,
    pub hfen: f64,
    pub field_rmse_hz: Option<f64>,
}

/// Full evaluation report: the mean metrics plus a per-direction breakdown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean: MetricSet,
    pub per_direction: Vec<MetricSet>,
}

/// Compare a reconstructed magnitude against the reference.
pub fn evaluate_images(x: &RTensor, reference: &RTensor) -> Result<MetricSet> {
    Ok(MetricSet {
        nrmse: nrmse(x, reference)?,
        lcc: lcc(x, reference, 9)?,
        ssim: ssim(x, reference)?,
        hfen: hfen(x, reference)?,
        field_rmse_hz: None,
    })
}
