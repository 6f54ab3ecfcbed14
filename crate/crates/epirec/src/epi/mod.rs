//! The per-direction EPI forward operator `A = M ∘ F ∘ E(f) ∘ C` and its
//! adjoint: line-by-line off-resonance phase, Cartesian shot sampling masks
//! with partial Fourier, coil weighting, and virtual-coil augmentation.
//!
//! Sign convention, fixed crate-wide: a blip-up shot accrues phase
//! `exp(+i*2*pi*f*t_l)` with `t_l = +(l - echo_center) * esp`; blip-down
//! flips the sign of `t_l`. Under this convention a constant field `f0`
//! makes the distorted image sample the object at `y + polarity*f0*esp*ny`
//! along the phase-encode axis; the displacement conventions in the field
//! initializer follow the same form.

pub(crate) mod kernels;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CTensor, RTensor};

pub(crate) use kernels::LinePhases;

/// Per-voxel off-resonance frequency in Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldMap {
    pub map: RTensor,
}

impl FieldMap {
    pub fn new(map: RTensor) -> Result<Self> {
        if map.shape.len() != 2 {
            return Err(Error::validation("field map must be 2-D"));
        }
        map.check_finite("field map")?;
        Ok(FieldMap { map })
    }

    pub fn zeros(ny: usize, nx: usize) -> Self {
        FieldMap {
            map: RTensor::zeros(&[ny, nx]),
        }
    }

    pub fn constant(ny: usize, nx: usize, hz: f64) -> Self {
        FieldMap {
            map: RTensor::full(&[ny, nx], hz),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Up,
    Down,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Up => 1.0,
            Polarity::Down => -1.0,
        }
    }

    pub fn flip(self) -> Polarity {
        match self {
            Polarity::Up => Polarity::Down,
            Polarity::Down => Polarity::Up,
        }
    }
}

/// How acquisition times map onto PE lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LineTimeModel {
    /// `t_l = polarity * (l - echo_center) * esp` from the absolute PE
    /// index; the default, shared by the simulator and the initializer.
    AbsoluteIndex,
    /// Times from the line's rank within the echo train (`line_order`),
    /// with an effective echo spacing `esp * esp_scale`. Lines outside the
    /// train fall back to the absolute-index rule at the scaled spacing.
    EchoTrain { esp_scale: f64 },
}

/// Echo spacing, polarity, echo-center index and line ordering for one shot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpiTiming {
    pub esp_s: f64,
    pub polarity: Polarity,
    pub echo_center_line: usize,
    pub line_order: Vec<usize>,
    pub model: LineTimeModel,
}

impl EpiTiming {
    pub fn new(
        esp_s: f64,
        polarity: Polarity,
        echo_center_line: usize,
        ny: usize,
    ) -> Result<Self> {
        let t = EpiTiming {
            esp_s,
            polarity,
            echo_center_line,
            line_order: (0..ny).collect(),
            model: LineTimeModel::AbsoluteIndex,
        };
        t.validate(ny)?;
        Ok(t)
    }

    pub fn validate(&self, ny: usize) -> Result<()> {
        if !(self.esp_s > 0.0) {
            return Err(Error::validation("echo spacing must be positive"));
        }
        if self.echo_center_line >= ny {
            return Err(Error::validation("echo center line outside grid"));
        }
        let mut seen = vec![false; ny];
        for &l in &self.line_order {
            if l >= ny || seen[l] {
                return Err(Error::validation("line_order is not a valid permutation"));
            }
            seen[l] = true;
        }
        Ok(())
    }

    /// Acquisition time of PE line `line`, echo-center referenced.
    pub fn line_time(&self, line: usize) -> f64 {
        let sign = self.polarity.sign();
        match &self.model {
            LineTimeModel::AbsoluteIndex => {
                sign * (line as f64 - self.echo_center_line as f64) * self.esp_s
            }
            LineTimeModel::EchoTrain { esp_scale } => {
                let esp = self.esp_s * esp_scale;
                match self.line_order.iter().position(|&l| l == line) {
                    Some(pos) => {
                        let center_pos = self
                            .line_order
                            .iter()
                            .enumerate()
                            .min_by_key(|(_, &l)| {
                                (l as isize - self.echo_center_line as isize).abs()
                            })
                            .map(|(p, _)| p)
                            .unwrap_or(0);
                        sign * (pos as f64 - center_pos as f64) * esp
                    }
                    None => sign * (line as f64 - self.echo_center_line as f64) * esp,
                }
            }
        }
    }
}

/// Arbitrary set of k-space points on the grid. Acquisition masks are
/// line-structured ([`SamplingMask`]); training partitions are not.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMask {
    pub ny: usize,
    pub nx: usize,
    pub keep: Vec<bool>,
}

impl PointMask {
    pub fn none(ny: usize, nx: usize) -> Self {
        PointMask {
            ny,
            nx,
            keep: vec![false; ny * nx],
        }
    }

    pub fn full(ny: usize, nx: usize) -> Self {
        PointMask {
            ny,
            nx,
            keep: vec![true; ny * nx],
        }
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.keep[y * self.nx + x]
    }

    pub fn set_line(&mut self, y: usize, value: bool) {
        for x in 0..self.nx {
            self.keep[y * self.nx + x] = value;
        }
    }

    pub fn and(&self, other: &PointMask) -> PointMask {
        assert_eq!((self.ny, self.nx), (other.ny, other.nx));
        PointMask {
            ny: self.ny,
            nx: self.nx,
            keep: self
                .keep
                .iter()
                .zip(&other.keep)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    pub fn minus(&self, other: &PointMask) -> PointMask {
        assert_eq!((self.ny, self.nx), (other.ny, other.nx));
        PointMask {
            ny: self.ny,
            nx: self.nx,
            keep: self
                .keep
                .iter()
                .zip(&other.keep)
                .map(|(a, b)| *a && !*b)
                .collect(),
        }
    }

    pub fn intersects(&self, other: &PointMask) -> bool {
        self.keep.iter().zip(&other.keep).any(|(a, b)| *a && *b)
    }

    /// PE lines containing at least one kept point.
    pub fn lines_with_any(&self) -> Vec<usize> {
        (0..self.ny)
            .filter(|&y| (0..self.nx).any(|x| self.at(y, x)))
            .collect()
    }

    /// 0/1 weights, broadcastable over coil channels.
    pub fn to_weights(&self) -> RTensor {
        RTensor::from_vec(
            &[self.ny, self.nx],
            self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Zero out unsampled points of `data` (any leading channel axes).
    pub fn apply(&self, data: &mut CTensor) {
        let plane = self.ny * self.nx;
        let batch = data.len() / plane;
        for b in 0..batch {
            for (i, &k) in self.keep.iter().enumerate() {
                if !k {
                    data.data[b * plane + i] = Complex64::new(0.0, 0.0);
                }
            }
        }
    }
}

/// Cartesian EPI acquisition mask: whole PE lines, undersampled by `accel`
/// and truncated by the partial-Fourier fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub points: PointMask,
    pub accel: usize,
    pub pf_fraction: f64,
    pub shot_index: usize,
}

impl SamplingMask {
    /// Interleaved multishot mask: shot `s` keeps lines `l` with
    /// `l % accel == s % accel` and `l < pf_fraction * ny`.
    pub fn interleaved(
        ny: usize,
        nx: usize,
        accel: usize,
        pf_fraction: f64,
        shot_index: usize,
    ) -> Result<Self> {
        if accel == 0 || !(0.0 < pf_fraction && pf_fraction <= 1.0) {
            return Err(Error::validation("bad acceleration or partial Fourier"));
        }
        let pf_limit = (pf_fraction * ny as f64).round() as usize;
        let mut points = PointMask::none(ny, nx);
        for l in 0..ny {
            if l % accel == shot_index % accel && l < pf_limit {
                points.set_line(l, true);
            }
        }
        if points.count() == 0 {
            return Err(Error::validation("mask samples no lines"));
        }
        Ok(SamplingMask {
            points,
            accel,
            pf_fraction,
            shot_index,
        })
    }

    pub fn full(ny: usize, nx: usize) -> Self {
        SamplingMask {
            points: PointMask::full(ny, nx),
            accel: 1,
            pf_fraction: 1.0,
            shot_index: 0,
        }
    }

    pub fn sampled_lines(&self) -> Vec<usize> {
        self.points.lines_with_any()
    }

    /// Cartesian EPI invariant: within each PE line the mask is constant.
    pub fn is_line_constant(&self) -> bool {
        (0..self.points.ny).all(|y| {
            let first = self.points.at(y, 0);
            (0..self.points.nx).all(|x| self.points.at(y, x) == first)
        })
    }
}

/// Complex coil sensitivity maps, `[ncoils, ny, nx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    pub maps: CTensor,
}

impl SensitivityMaps {
    pub fn new(maps: CTensor) -> Result<Self> {
        if maps.shape.len() != 3 {
            return Err(Error::validation("coil maps must be [ncoils, ny, nx]"));
        }
        Ok(SensitivityMaps { maps })
    }

    pub fn ncoils(&self) -> usize {
        self.maps.shape[0]
    }

    pub fn ny(&self) -> usize {
        self.maps.shape[1]
    }

    pub fn nx(&self) -> usize {
        self.maps.shape[2]
    }

    /// `C x`: weight an image into coil channels.
    pub fn expand(&self, x: &CTensor) -> CTensor {
        assert_eq!(x.shape, [self.ny(), self.nx()]);
        let plane = x.len();
        let mut out = CTensor::zeros(&self.maps.shape);
        for c in 0..self.ncoils() {
            for i in 0..plane {
                out.data[c * plane + i] = self.maps.data[c * plane + i] * x.data[i];
            }
        }
        out
    }

    /// `C^H y`: coil-combine channels back to one image.
    pub fn combine(&self, y: &CTensor) -> CTensor {
        assert_eq!(y.shape, self.maps.shape);
        let plane = self.ny() * self.nx();
        let mut out = CTensor::zeros(&[self.ny(), self.nx()]);
        for c in 0..self.ncoils() {
            for i in 0..plane {
                out.data[i] += self.maps.data[c * plane + i].conj() * y.data[c * plane + i];
            }
        }
        out
    }
}

/// Acquired multi-coil k-space for one shot, with its mask and timing.
#[derive(Clone, Debug)]
pub struct KSpaceShot {
    pub data: CTensor,
    pub mask: SamplingMask,
    pub timing: EpiTiming,
}

impl KSpaceShot {
    pub fn polarity(&self) -> Polarity {
        self.timing.polarity
    }
}

fn check_field_shape(field: &FieldMap, img: &CTensor) -> Result<()> {
    let n = img.shape.len();
    if field.map.shape != img.shape[n - 2..] {
        return Err(Error::validation("field map shape does not match image"));
    }
    field.map.check_finite("field map")?;
    Ok(())
}

/// `F E(f)` applied to an image: every PE line `l` of the output equals
/// line `l` of `fft2c(img .* exp(+i*2*pi*f*t_l))`.
pub fn offres_forward(img: &CTensor, field: &FieldMap, timing: &EpiTiming) -> Result<CTensor> {
    check_field_shape(field, img)?;
    img.check_finite("offres_forward input")?;
    timing.validate(field.map.shape[0])?;
    let ph = LinePhases::build(&field.map, timing);
    let lines: Vec<usize> = (0..field.map.shape[0]).collect();
    Ok(kernels::offres_fwd_kernel(img, &ph, &lines))
}

/// Exact adjoint of [`offres_forward`].
pub fn offres_adjoint(k: &CTensor, field: &FieldMap, timing: &EpiTiming) -> Result<CTensor> {
    check_field_shape(field, k)?;
    k.check_finite("offres_adjoint input")?;
    timing.validate(field.map.shape[0])?;
    let ph = LinePhases::build(&field.map, timing);
    let lines: Vec<usize> = (0..field.map.shape[0]).collect();
    Ok(kernels::offres_adj_kernel(k, &ph, &lines))
}

/// Full forward operator `A x = M ∘ F ∘ E(f) ∘ C x` for one shot.
pub fn forward_a(
    x: &CTensor,
    coils: &SensitivityMaps,
    field: &FieldMap,
    timing: &EpiTiming,
    mask: &SamplingMask,
) -> Result<KSpaceShot> {
    if x.shape != [coils.ny(), coils.nx()] {
        return Err(Error::validation("image shape does not match coils"));
    }
    check_field_shape(field, x)?;
    let ph = LinePhases::build(&field.map, timing);
    let lines = mask.sampled_lines();
    let mut data = kernels::offres_fwd_kernel(&coils.expand(x), &ph, &lines);
    mask.points.apply(&mut data);
    Ok(KSpaceShot {
        data,
        mask: mask.clone(),
        timing: timing.clone(),
    })
}

/// Adjoint `A^H y = C^H E(f)^H F^H M y` for one shot.
pub fn adjoint_ah(y: &KSpaceShot, coils: &SensitivityMaps, field: &FieldMap) -> Result<CTensor> {
    if y.data.shape != coils.maps.shape {
        return Err(Error::validation("k-space shape does not match coils"));
    }
    let ph = LinePhases::build(&field.map, &y.timing);
    let lines = y.mask.sampled_lines();
    let mut masked = y.data.clone();
    y.mask.points.apply(&mut masked);
    Ok(coils.combine(&kernels::offres_adj_kernel(&masked, &ph, &lines)))
}

/// Virtual-coil augmentation: stack `[x, conj(x)]` along a channel axis.
pub fn vc_augment(x: &CTensor) -> CTensor {
    assert_eq!(x.shape.len(), 2);
    let mut data = Vec::with_capacity(2 * x.len());
    data.extend_from_slice(&x.data);
    data.extend(x.data.iter().map(|v| v.conj()));
    CTensor::from_vec(&[2, x.shape[0], x.shape[1]], data)
}

/// `(s0 + conj(s1)) / 2`: the adjoint-inverse of [`vc_augment`] under the
/// real inner product.
pub fn vc_reduce(s: &CTensor) -> Result<CTensor> {
    if s.shape.len() != 3 || s.shape[0] != 2 {
        return Err(Error::validation("virtual-coil stack must have 2 channels"));
    }
    let plane = s.shape[1] * s.shape[2];
    let data = (0..plane)
        .map(|i| (s.data[i] + s.data[plane + i].conj()) * 0.5)
        .collect();
    Ok(CTensor::from_vec(&[s.shape[1], s.shape[2]], data))
}

#[cfg(test)]
pub(crate) mod tests;
