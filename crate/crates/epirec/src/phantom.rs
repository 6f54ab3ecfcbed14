//! Synthetic ground truth: ellipse phantoms with diffusion contrast, smooth
//! coil sensitivities, B0 field maps, per-shot phase corruption, and noisy
//! blip-up/down multi-shot k-space through the exact forward model.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::epi::{
    kernels::offres_fwd_kernel, EpiTiming, FieldMap, KSpaceShot, LinePhases, SamplingMask,
    SensitivityMaps,
};
use crate::error::{Error, Result};
use crate::numerics::{Grid2D, RandomSource};
use crate::tensor::{CTensor, RTensor};

/// One elliptical compartment: geometry, proton density and its diffusion
/// tensor (mm^2/s, symmetric PSD).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_mm: [f64; 2],
    pub semi_axes_mm: [f64; 2],
    pub rotation_rad: f64,
    pub proton_density: f64,
    pub d_tensor: [[f64; 3]; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: [usize; 2],
    pub fov_mm: [f64; 2],
    pub ellipses: Vec<Ellipse>,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    pub fn grid2d(&self) -> Result<Grid2D> {
        Grid2D::new(self.grid[0], self.grid[1], self.fov_mm[0], self.fov_mm[1])
    }

    pub fn validate(&self) -> Result<()> {
        self.grid2d()?;
        for e in &self.ellipses {
            if e.proton_density < 0.0 {
                return Err(Error::validation("proton density must be >= 0"));
            }
            if !sym_psd(&e.d_tensor) {
                return Err(Error::validation(
                    "diffusion tensor must be symmetric positive semi-definite",
                ));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::validation("noise sigma must be >= 0"));
        }
        Ok(())
    }

    /// Brain-like default scene: background disc, two anisotropic tracts,
    /// an isotropic ventricle-like core.
    pub fn default_scene(ny: usize, nx: usize, fov_mm: f64, noise_sigma: f64) -> Self {
        let iso = |d: f64| [[d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]];
        PhantomSpec {
            grid: [ny, nx],
            fov_mm: [fov_mm, fov_mm],
            ellipses: vec![
                Ellipse {
                    center_mm: [0.0, 0.0],
                    semi_axes_mm: [0.42 * fov_mm, 0.36 * fov_mm],
                    rotation_rad: 0.0,
                    proton_density: 0.8,
                    d_tensor: iso(0.8e-3),
                },
                Ellipse {
                    center_mm: [0.10 * fov_mm, -0.08 * fov_mm],
                    semi_axes_mm: [0.16 * fov_mm, 0.07 * fov_mm],
                    rotation_rad: 0.5,
                    proton_density: 0.35,
                    d_tensor: diag3(1.7e-3, 0.3e-3, 0.3e-3),
                },
                Ellipse {
                    center_mm: [-0.12 * fov_mm, 0.10 * fov_mm],
                    semi_axes_mm: [0.07 * fov_mm, 0.15 * fov_mm],
                    rotation_rad: -0.3,
                    proton_density: 0.35,
                    d_tensor: diag3(0.3e-3, 1.7e-3, 0.3e-3),
                },
                Ellipse {
                    center_mm: [0.0, 0.12 * fov_mm],
                    semi_axes_mm: [0.06 * fov_mm, 0.05 * fov_mm],
                    rotation_rad: 0.0,
                    proton_density: 0.5,
                    d_tensor: iso(2.5e-3),
                },
            ],
            noise_sigma,
        }
    }
}

fn diag3(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]]
}

fn sym_psd(d: &[[f64; 3]; 3]) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            if (d[i][j] - d[j][i]).abs() > 1e-12 {
                return false;
            }
        }
    }
    // leading principal minors
    let m1 = d[0][0];
    let m2 = d[0][0] * d[1][1] - d[0][1] * d[1][0];
    let m3 = d[0][0] * (d[1][1] * d[2][2] - d[1][2] * d[2][1])
        - d[0][1] * (d[1][0] * d[2][2] - d[1][2] * d[2][0])
        + d[0][2] * (d[1][0] * d[2][1] - d[1][1] * d[2][0]);
    m1 >= -1e-15 && m2 >= -1e-12 && m3 >= -1e-12
}

/// Diffusion gradient direction and b-value.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DiffusionDirection {
    pub g: [f64; 3],
    pub b: f64,
}

impl DiffusionDirection {
    pub fn b0() -> Self {
        DiffusionDirection {
            g: [0.0, 0.0, 1.0],
            b: 0.0,
        }
    }

    pub fn new(g: [f64; 3], b: f64) -> Result<Self> {
        if b < 0.0 {
            return Err(Error::validation("b-value must be >= 0"));
        }
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if b > 0.0 && (norm - 1.0).abs() > 1e-9 {
            return Err(Error::validation("gradient direction must be unit length"));
        }
        Ok(DiffusionDirection { g, b })
    }

    pub fn attenuation(&self, d: &[[f64; 3]; 3]) -> f64 {
        let g = self.g;
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += g[i] * d[i][j] * g[j];
            }
        }
        (-self.b * q).exp()
    }

    /// The classic 6-direction DTI scheme, enough for a tensor fit.
    pub fn six_scheme(b: f64) -> Vec<DiffusionDirection> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [s, s, 0.0],
            [s, 0.0, s],
            [0.0, s, s],
        ]
        .iter()
        .map(|&g| DiffusionDirection { g, b })
        .collect()
    }

    /// Deterministic n-direction scheme: the classic six for n <= 6, a
    /// golden-spiral hemisphere covering for larger n.
    pub fn scheme(n: usize, b: f64) -> Vec<DiffusionDirection> {
        if n <= 6 {
            return DiffusionDirection::six_scheme(b).into_iter().take(n).collect();
        }
        let golden = PI * (3.0 - 5.0_f64.sqrt());
        (0..n)
            .map(|i| {
                let z = (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                DiffusionDirection {
                    g: [r * phi.cos(), r * phi.sin(), z],
                    b,
                }
            })
            .collect()
    }
}

/// Per-shot smooth phase corruption: 2-D polynomial up to order 2 in
/// normalized coordinates, radians.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ShotPhase {
    pub coeffs: [f64; 6],
}

impl ShotPhase {
    pub fn zero() -> Self {
        ShotPhase::default()
    }

    /// Random coefficients in [-max_rad, max_rad].
    pub fn random(rng: &mut RandomSource, max_rad: f64) -> Self {
        let mut coeffs = [0.0; 6];
        for c in coeffs.iter_mut() {
            *c = rng.uniform_in(-max_rad, max_rad);
        }
        ShotPhase { coeffs }
    }

    pub fn eval(&self, yn: f64, xn: f64) -> f64 {
        let c = self.coeffs;
        c[0] + c[1] * xn + c[2] * yn + c[3] * xn * xn + c[4] * xn * yn + c[5] * yn * yn
    }
}

/// Rasterize the phantom for one diffusion direction and shot phase:
/// magnitude is the sum over ellipses of `rho * exp(-b g^T D g)`, phase is
/// the shot polynomial.
pub fn make_phantom(
    spec: &PhantomSpec,
    dir: &DiffusionDirection,
    shot_phase: &ShotPhase,
) -> Result<CTensor> {
    spec.validate()?;
    let grid = spec.grid2d()?;
    let weights: Vec<f64> = spec
        .ellipses
        .iter()
        .map(|e| e.proton_density * dir.attenuation(&e.d_tensor))
        .collect();
    let mut out = CTensor::zeros(&[grid.ny, grid.nx]);
    for i in 0..grid.ny {
        for j in 0..grid.nx {
            let (ym, xm) = grid.pos_mm(i, j);
            let mut mag = 0.0;
            for (e, w) in spec.ellipses.iter().zip(&weights) {
                let dy = ym - e.center_mm[0];
                let dx = xm - e.center_mm[1];
                let (s, c) = e.rotation_rad.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let r2 = (u / e.semi_axes_mm[1]).powi(2) + (v / e.semi_axes_mm[0]).powi(2);
                if r2 <= 1.0 {
                    mag += w;
                }
            }
            let ph = shot_phase.eval(grid.norm_y(i), grid.norm_x(j));
            *out.at2_mut(i, j) = Complex64::from_polar(mag, ph);
        }
    }
    Ok(out)
}

/// Magnitude-only phantom (zero shot phase), the evaluation reference.
pub fn make_phantom_magnitude(spec: &PhantomSpec, dir: &DiffusionDirection) -> Result<RTensor> {
    Ok(make_phantom(spec, dir, &ShotPhase::zero())?.magnitude())
}

/// Smooth complex coil maps: Gaussian magnitude lobes on a ring around the
/// FOV with low-order polynomial phase, normalized so that
/// `sum_c |C_c|^2 == 1` at every voxel.
pub fn make_coils(grid: &Grid2D, ncoils: usize) -> Result<SensitivityMaps> {
    if ncoils < 1 {
        return Err(Error::validation("need at least one coil"));
    }
    let (ny, nx) = (grid.ny, grid.nx);
    let mut maps = CTensor::zeros(&[ncoils, ny, nx]);
    for c in 0..ncoils {
        let ang = 2.0 * PI * c as f64 / ncoils as f64;
        let (cy, cx) = (0.9 * ang.sin(), 0.9 * ang.cos());
        let ph0 = 0.7 * ang;
        for i in 0..ny {
            for j in 0..nx {
                let yn = grid.norm_y(i);
                let xn = grid.norm_x(j);
                let r2 = (yn - cy).powi(2) + (xn - cx).powi(2);
                let mag = (-r2 / 0.9).exp() + 0.02;
                let ph = ph0 + 0.6 * (xn * ang.cos() + yn * ang.sin())
                    - 0.2 * xn * yn * (c as f64 + 1.0) / ncoils as f64;
                maps.data[(c * ny + i) * nx + j] = Complex64::from_polar(mag, ph);
            }
        }
    }
    let plane = ny * nx;
    for i in 0..plane {
        let s: f64 = (0..ncoils)
            .map(|c| maps.data[c * plane + i].norm_sqr())
            .sum::<f64>()
            .sqrt();
        for c in 0..ncoils {
            maps.data[c * plane + i] /= s;
        }
    }
    SensitivityMaps::new(maps)
}

/// Optional localized field bumps (frontal-sinus-like).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FieldBlob {
    /// Center in normalized coordinates [-1, 1].
    pub center: [f64; 2],
    /// Width in normalized coordinates.
    pub sigma: f64,
    pub amplitude_hz: f64,
}

/// Smooth synthetic susceptibility field: a fixed low-order polynomial
/// scaled so its peak magnitude equals `amplitude_hz`, plus optional
/// Gaussian blobs with their own amplitudes.
pub fn make_field(grid: &Grid2D, amplitude_hz: f64, blobs: &[FieldBlob]) -> Result<FieldMap> {
    if amplitude_hz < 0.0 {
        return Err(Error::validation("field amplitude must be >= 0"));
    }
    let (ny, nx) = (grid.ny, grid.nx);
    let mut poly = RTensor::zeros(&[ny, nx]);
    let mut peak = 0.0f64;
    for i in 0..ny {
        for j in 0..nx {
            let y = grid.norm_y(i);
            let x = grid.norm_x(j);
            let v = 0.35 + 0.75 * y + 0.35 * x - 0.45 * x * x + 0.55 * x * y - 0.25 * y * y;
            *poly.at2_mut(i, j) = v;
            peak = peak.max(v.abs());
        }
    }
    let scale = if peak > 0.0 { amplitude_hz / peak } else { 0.0 };
    let mut f = poly.scale(scale);
    for blob in blobs {
        for i in 0..ny {
            for j in 0..nx {
                let dy = grid.norm_y(i) - blob.center[0];
                let dx = grid.norm_x(j) - blob.center[1];
                *f.at2_mut(i, j) +=
                    blob.amplitude_hz * (-(dy * dy + dx * dx) / (2.0 * blob.sigma * blob.sigma)).exp();
            }
        }
    }
    FieldMap::new(f)
}

/// Simulate the acquisition of one direction: per shot, mask the
/// off-resonance Fourier transform of the coil-weighted object and add
/// i.i.d. complex Gaussian noise on sampled points only.
pub fn simulate_acquisition(
    phantom_per_shot: &[CTensor],
    coils: &SensitivityMaps,
    field: &FieldMap,
    timings: &[EpiTiming],
    masks: &[SamplingMask],
    noise_sigma: f64,
    rng: &mut RandomSource,
) -> Result<Vec<KSpaceShot>> {
    if phantom_per_shot.len() != timings.len() || timings.len() != masks.len() {
        return Err(Error::validation(
            "need one phantom, timing and mask per shot",
        ));
    }
    let (nc, ny, nx) = (coils.ncoils(), coils.ny(), coils.nx());
    let mut shots = Vec::with_capacity(timings.len());
    for ((obj, timing), mask) in phantom_per_shot.iter().zip(timings).zip(masks) {
        if obj.shape != [ny, nx] {
            return Err(Error::validation("phantom shape does not match coils"));
        }
        timing.validate(ny)?;
        let ph = LinePhases::build(&field.map, timing);
        let lines = mask.sampled_lines();
        let mut data = offres_fwd_kernel(&coils.expand(obj), &ph, &lines);
        mask.points.apply(&mut data);
        if noise_sigma > 0.0 {
            for c in 0..nc {
                for (i, &keep) in mask.points.keep.iter().enumerate() {
                    if keep {
                        let n = Complex64::new(rng.normal(), rng.normal()) * noise_sigma;
                        data.data[c * ny * nx + i] += n;
                    }
                }
            }
        }
        shots.push(KSpaceShot {
            data,
            mask: mask.clone(),
            timing: timing.clone(),
        });
    }
    Ok(shots)
}
