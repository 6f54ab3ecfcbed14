//! Field-map initialization from reversed-polarity images: CG-SENSE
//! per-polarity reconstruction, symmetric 1-D displacement estimation
//! between the blip-up/down magnitudes, Jacobian intensity modulation, and
//! the displacement-to-Hz conversion.
//!
//! Displacement convention, matching the forward operator: `d` is the total
//! up-vs-down displacement in pixels such that `up(y - d/2)` aligns with
//! `down(y + d/2)`; a constant field `f0` yields `d = 2 * f0 * esp * ny`.

use crate::cg::{solve_dc, DcProblem};
use crate::epi::{adjoint_ah, forward_a, EpiTiming, FieldMap, KSpaceShot, SensitivityMaps};
use crate::error::{Error, Result};
use crate::numerics::solve_dense;
use crate::tensor::{CTensor, RTensor};

/// Per-voxel up-vs-down displacement in pixels along the phase-encode axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementMap {
    pub d: RTensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DisplacementConfig {
    pub levels: usize,
    pub control_spacing_px: usize,
    pub smooth_alpha: f64,
    pub gn_iters: usize,
    pub max_disp_px: f64,
}

impl Default for DisplacementConfig {
    fn default() -> Self {
        DisplacementConfig {
            levels: 3,
            control_spacing_px: 8,
            smooth_alpha: 0.05,
            gn_iters: 6,
            max_disp_px: 10.0,
        }
    }
}

/// CG-SENSE under a zero field: solves
/// `(A0^H A0 + lambda I) x = A0^H y` over the given shots of one polarity,
/// returning the (distorted) image.
pub fn sense_recon(
    shots: &[&KSpaceShot],
    coils: &SensitivityMaps,
    n_cg: usize,
    lambda_tik: f64,
) -> Result<CTensor> {
    if shots.is_empty() {
        return Err(Error::validation("sense_recon needs at least one shot"));
    }
    let (ny, nx) = (coils.ny(), coils.nx());
    let zero_field = FieldMap::zeros(ny, nx);
    let mut rhs = CTensor::zeros(&[ny, nx]);
    for s in shots {
        rhs = rhs.add(&adjoint_ah(s, coils, &zero_field)?);
    }
    let problem = DcProblem {
        operator: Box::new(|x: &CTensor| {
            let mut acc = CTensor::zeros(&x.shape);
            for s in shots {
                let ax = forward_a(x, coils, &zero_field, &s.timing, &s.mask)
                    .expect("shapes validated");
                acc = acc.add(&adjoint_ah(&ax, coils, &zero_field).expect("shapes validated"));
            }
            acc
        }),
        rhs,
        lambdas: vec![(lambda_tik, CTensor::zeros(&[ny, nx]))],
    };
    let (x, _) = solve_dc(&problem, n_cg, 1e-9)?;
    Ok(x)
}

/// Sample `img` at `(y + delta[y,x], x)` with linear interpolation and edge
/// clamping.
fn warp_pe(img: &RTensor, delta: &RTensor) -> RTensor {
    let (ny, nx) = (img.shape[0], img.shape[1]);
    let mut out = RTensor::zeros(&img.shape);
    for y in 0..ny {
        for x in 0..nx {
            let pos = y as f64 + delta.at2(y, x);
            let pos = pos.clamp(0.0, ny as f64 - 1.0);
            let y0 = pos.floor() as usize;
            let y1 = (y0 + 1).min(ny - 1);
            let frac = pos - y0 as f64;
            *out.at2_mut(y, x) = img.at2(y0, x) * (1.0 - frac) + img.at2(y1, x) * frac;
        }
    }
    out
}

fn d_dy_central(img: &RTensor) -> RTensor {
    let (ny, nx) = (img.shape[0], img.shape[1]);
    let mut out = RTensor::zeros(&img.shape);
    for y in 0..ny {
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(ny - 1));
        let h = (yp - ym) as f64;
        for x in 0..nx {
            *out.at2_mut(y, x) = (img.at2(yp, x) - img.at2(ym, x)) / h.max(1.0);
        }
    }
    out
}

fn downsample2(img: &RTensor) -> RTensor {
    let (ny, nx) = (img.shape[0], img.shape[1]);
    let (hy, hx) = (ny / 2, nx / 2);
    let mut out = RTensor::zeros(&[hy, hx]);
    for y in 0..hy {
        for x in 0..hx {
            *out.at2_mut(y, x) = 0.25
                * (img.at2(2 * y, 2 * x)
                    + img.at2(2 * y + 1, 2 * x)
                    + img.at2(2 * y, 2 * x + 1)
                    + img.at2(2 * y + 1, 2 * x + 1));
        }
    }
    out
}

fn upsample2(img: &RTensor, ny: usize, nx: usize) -> RTensor {
    let (sy, sx) = (img.shape[0], img.shape[1]);
    let mut out = RTensor::zeros(&[ny, nx]);
    for y in 0..ny {
        for x in 0..nx {
            let fy = (y as f64 + 0.5) / 2.0 - 0.5;
            let fx = (x as f64 + 0.5) / 2.0 - 0.5;
            let fy = fy.clamp(0.0, sy as f64 - 1.0);
            let fx = fx.clamp(0.0, sx as f64 - 1.0);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(sy - 1), (x0 + 1).min(sx - 1));
            let (ay, ax) = (fy - y0 as f64, fx - x0 as f64);
            *out.at2_mut(y, x) = img.at2(y0, x0) * (1.0 - ay) * (1.0 - ax)
                + img.at2(y1, x0) * ay * (1.0 - ax)
                + img.at2(y0, x1) * (1.0 - ay) * ax
                + img.at2(y1, x1) * ay * ax;
        }
    }
    out
}

fn pearson(a: &RTensor, b: &RTensor) -> f64 {
    let n = a.len() as f64;
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = b.data.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va.sqrt() * vb.sqrt()).max(1e-300)
}

/// Linear B-spline control grid over an image: node positions and the two
/// interpolation weights per pixel per axis.
struct ControlGrid {
    ncy: usize,
    ncx: usize,
    spacing: f64,
}

impl ControlGrid {
    fn new(ny: usize, nx: usize, spacing_px: usize) -> ControlGrid {
        let spacing = spacing_px.max(2) as f64;
        let ncy = ((ny - 1) as f64 / spacing).ceil() as usize + 1;
        let ncx = ((nx - 1) as f64 / spacing).ceil() as usize + 1;
        ControlGrid { ncy, ncx, spacing }
    }

    fn n(&self) -> usize {
        self.ncy * self.ncx
    }

    /// Up to 4 (node index, weight) pairs for a pixel.
    fn weights(&self, y: usize, x: usize) -> [(usize, f64); 4] {
        let fy = y as f64 / self.spacing;
        let fx = x as f64 / self.spacing;
        let (iy, ix) = (
            (fy.floor() as usize).min(self.ncy - 1),
            (fx.floor() as usize).min(self.ncx - 1),
        );
        let (jy, jx) = ((iy + 1).min(self.ncy - 1), (ix + 1).min(self.ncx - 1));
        let (ay, ax) = (fy - iy as f64, fx - ix as f64);
        [
            (iy * self.ncx + ix, (1.0 - ay) * (1.0 - ax)),
            (jy * self.ncx + ix, ay * (1.0 - ax)),
            (iy * self.ncx + jx, (1.0 - ay) * ax),
            (jy * self.ncx + jx, ay * ax),
        ]
    }

    fn render(&self, coeffs: &[f64], ny: usize, nx: usize) -> RTensor {
        let mut out = RTensor::zeros(&[ny, nx]);
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (k, w) in self.weights(y, x) {
                    acc += coeffs[k] * w;
                }
                *out.at2_mut(y, x) = acc;
            }
        }
        out
    }

    /// Graph-Laplacian smoothness penalty on the control coefficients.
    fn laplacian(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut l = vec![vec![0.0; n]; n];
        for iy in 0..self.ncy {
            for ix in 0..self.ncx {
                let k = iy * self.ncx + ix;
                let mut neighbors = Vec::new();
                if iy > 0 {
                    neighbors.push(k - self.ncx);
                }
                if iy + 1 < self.ncy {
                    neighbors.push(k + self.ncx);
                }
                if ix > 0 {
                    neighbors.push(k - 1);
                }
                if ix + 1 < self.ncx {
                    neighbors.push(k + 1);
                }
                l[k][k] += neighbors.len() as f64;
                for nb in neighbors {
                    l[k][nb] -= 1.0;
                }
            }
        }
        l
    }
}

/// One Gauss-Newton refinement of the control coefficients at one level.
fn gn_step(
    up: &RTensor,
    down: &RTensor,
    grid: &ControlGrid,
    coeffs: &mut [f64],
    alpha: f64,
) -> Result<()> {
    let (ny, nx) = (up.shape[0], up.shape[1]);
    let d = grid.render(coeffs, ny, nx);
    let half = d.scale(0.5);
    let neg_half = d.scale(-0.5);
    let w_up = warp_pe(up, &neg_half);
    let w_dn = warp_pe(down, &half);
    let gy_up = d_dy_central(&w_up);
    let gy_dn = d_dy_central(&w_dn);

    let n = grid.n();
    let scale = up.max_abs().max(1e-12);
    let mut ata = grid.laplacian();
    for row in ata.iter_mut() {
        for v in row.iter_mut() {
            *v *= alpha;
        }
    }
    let mut atb = vec![0.0; n];
    for y in 0..ny {
        for x in 0..nx {
            let r = (w_up.at2(y, x) - w_dn.at2(y, x)) / scale;
            let j = -0.5 * (gy_up.at2(y, x) + gy_dn.at2(y, x)) / scale;
            if j == 0.0 && r == 0.0 {
                continue;
            }
            let wts = grid.weights(y, x);
            for (ka, wa) in wts {
                if wa == 0.0 {
                    continue;
                }
                atb[ka] -= wa * j * r;
                for (kb, wb) in wts {
                    if wb != 0.0 {
                        ata[ka][kb] += wa * j * j * wb;
                    }
                }
            }
        }
    }
    solve_dense(&mut ata, &mut atb)?;
    for (c, dc) in coeffs.iter_mut().zip(&atb) {
        *c += dc;
    }
    Ok(())
}

/// Estimate the symmetric per-voxel displacement between the blip-up and
/// blip-down magnitude images by coarse-to-fine regularized least squares
/// on a linear B-spline control grid. Non-overlapping inputs (correlation
/// below 0.1) produce a zero map and a warning.
pub fn estimate_displacement(
    up: &RTensor,
    down: &RTensor,
    cfg: &DisplacementConfig,
) -> Result<(DisplacementMap, Option<String>)> {
    if up.shape != down.shape || up.shape.len() != 2 {
        return Err(Error::validation("displacement inputs must share a 2-D grid"));
    }
    up.check_finite("blip-up image")?;
    down.check_finite("blip-down image")?;
    let (ny, nx) = (up.shape[0], up.shape[1]);

    let corr = pearson(up, down);
    if corr < 0.1 {
        return Ok((
            DisplacementMap {
                d: RTensor::zeros(&[ny, nx]),
            },
            Some(format!(
                "blip-up/down correlation {corr:.3} below 0.1; returning zero displacement"
            )),
        ));
    }

    // image pyramid, coarse to fine
    let mut pyr_up = vec![up.clone()];
    let mut pyr_dn = vec![down.clone()];
    for _ in 1..cfg.levels {
        let u = pyr_up.last().unwrap();
        if u.shape[0] < 8 || u.shape[1] < 8 {
            break;
        }
        pyr_up.push(downsample2(pyr_up.last().unwrap()));
        pyr_dn.push(downsample2(pyr_dn.last().unwrap()));
    }

    let coarsest = pyr_up.len() - 1;
    let mut d = RTensor::zeros(&pyr_up[coarsest].shape);
    for level in (0..=coarsest).rev() {
        let u = &pyr_up[level];
        let v = &pyr_dn[level];
        let (lny, lnx) = (u.shape[0], u.shape[1]);
        if d.shape != [lny, lnx] {
            d = upsample2(&d, lny, lnx).scale(2.0);
        }
        let spacing = cfg.control_spacing_px.max(2);
        let grid = ControlGrid::new(lny, lnx, spacing);
        // seed the control coefficients from the current displacement
        let mut coeffs = vec![0.0; grid.n()];
        let mut counts = vec![0.0; grid.n()];
        for y in 0..lny {
            for x in 0..lnx {
                for (k, w) in grid.weights(y, x) {
                    coeffs[k] += w * d.at2(y, x);
                    counts[k] += w;
                }
            }
        }
        for (c, n) in coeffs.iter_mut().zip(&counts) {
            if *n > 0.0 {
                *c /= n;
            }
        }
        for _ in 0..cfg.gn_iters {
            gn_step(u, v, &grid, &mut coeffs, cfg.smooth_alpha)?;
            for c in coeffs.iter_mut() {
                *c = c.clamp(-cfg.max_disp_px, cfg.max_disp_px);
            }
        }
        d = grid.render(&coeffs, lny, lnx);
    }

    Ok((DisplacementMap { d }, None))
}

/// Convert the total up-vs-down displacement to off-resonance:
/// `f = d / (2 * esp * ny)` Hz.
pub fn displacement_to_field(d: &DisplacementMap, timing: &EpiTiming) -> Result<FieldMap> {
    if !(timing.esp_s > 0.0) {
        return Err(Error::validation("echo spacing must be positive"));
    }
    let ny = d.d.shape[0] as f64;
    FieldMap::new(d.d.scale(1.0 / (2.0 * timing.esp_s * ny)))
}

/// Undo the geometric distortion of one polarity: sample the image at
/// `y - polarity*d/2` and apply the first-order Jacobian intensity factor
/// `(1 - polarity * d'(y)/2)` so integrated signal is conserved.
pub fn jacobian_correct(
    img: &RTensor,
    d: &DisplacementMap,
    polarity: crate::epi::Polarity,
) -> Result<RTensor> {
    if img.shape != d.d.shape {
        return Err(Error::validation("image and displacement shapes differ"));
    }
    let sign = polarity.sign();
    let half = d.d.scale(0.5 * -sign);
    let slope = d_dy_central(&d.d.scale(0.5));
    if slope.max_abs() >= 1.0 {
        return Err(Error::numerical(
            "displacement gradient too steep: warp not invertible",
        ));
    }
    let warped = warp_pe(img, &half);
    let mut out = warped;
    for (o, s) in out.data.iter_mut().zip(&slope.data) {
        *o *= 1.0 - sign * s;
    }
    Ok(out)
}
