use std::f64::consts::PI;

use num_complex::Complex64;

use super::*;
use crate::numerics::{fft2c, ifft2c, seeded_rng, RandomSource};
use crate::tensor::rel_err_c;

pub(crate) fn random_cimage(rng: &mut RandomSource, shape: &[usize]) -> CTensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| Complex64::new(rng.normal(), rng.normal()))
        .collect();
    CTensor::from_vec(shape, data)
}

fn random_field(rng: &mut RandomSource, ny: usize, nx: usize, amp: f64) -> FieldMap {
    let data = (0..ny * nx).map(|_| amp * rng.normal()).collect();
    FieldMap::new(RTensor::from_vec(&[ny, nx], data)).unwrap()
}

/// Smooth unit-normalized coil set for operator tests (the production
/// generator lives in the phantom module).
pub(crate) fn test_coils(rng: &mut RandomSource, nc: usize, ny: usize, nx: usize) -> SensitivityMaps {
    let mut maps = CTensor::zeros(&[nc, ny, nx]);
    for c in 0..nc {
        let cy = rng.uniform_in(-0.8, 0.8);
        let cx = rng.uniform_in(-0.8, 0.8);
        let ph0 = rng.uniform_in(-PI, PI);
        for y in 0..ny {
            for x in 0..nx {
                let yn = (y as f64 - ny as f64 / 2.0) / (ny as f64 / 2.0);
                let xn = (x as f64 - nx as f64 / 2.0) / (nx as f64 / 2.0);
                let r2 = (yn - cy).powi(2) + (xn - cx).powi(2);
                let mag = (-r2 / 0.8).exp() + 0.05;
                let ph = ph0 + 0.4 * yn - 0.3 * xn;
                *maps.at3_mut(c, y, x) = Complex64::from_polar(mag, ph);
            }
        }
    }
    // normalize sum of squares to 1 everywhere
    for y in 0..ny {
        for x in 0..nx {
            let s: f64 = (0..nc).map(|c| maps.at3(c, y, x).norm_sqr()).sum();
            let s = s.sqrt();
            for c in 0..nc {
                *maps.at3_mut(c, y, x) /= s;
            }
        }
    }
    SensitivityMaps::new(maps).unwrap()
}

impl CTensor {
    pub(crate) fn at3(&self, c: usize, y: usize, x: usize) -> Complex64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub(crate) fn at3_mut(&mut self, c: usize, y: usize, x: usize) -> &mut Complex64 {
        &mut self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }
}

/// O(N^4) direct evaluation of the off-resonance forward model.
fn offres_direct(img: &CTensor, field: &FieldMap, timing: &EpiTiming) -> CTensor {
    let (ny, nx) = (img.shape[0], img.shape[1]);
    let (cy, cx) = (ny as f64 / 2.0, nx as f64 / 2.0);
    let mut out = CTensor::zeros(&[ny, nx]);
    for j in 0..ny {
        let t = timing.line_time(j);
        for k in 0..nx {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..ny {
                for x in 0..nx {
                    let off = 2.0 * PI * field.map.at2(y, x) * t;
                    let dft = -2.0
                        * PI
                        * ((j as f64 - cy) * (y as f64 - cy) / ny as f64
                            + (k as f64 - cx) * (x as f64 - cx) / nx as f64);
                    acc += img.at2(y, x)
                        * Complex64::new(off.cos(), off.sin())
                        * Complex64::new(dft.cos(), dft.sin());
                }
            }
            *out.at2_mut(j, k) = acc / ((ny * nx) as f64).sqrt();
        }
    }
    out
}

fn timing_up(ny: usize, esp: f64) -> EpiTiming {
    EpiTiming::new(esp, Polarity::Up, ny / 2, ny).unwrap()
}

#[test]
fn zero_field_reduces_to_fft() {
    let mut rng = seeded_rng(11);
    let img = random_cimage(&mut rng, &[16, 16]);
    let field = FieldMap::zeros(16, 16);
    let out = offres_forward(&img, &field, &timing_up(16, 5e-4)).unwrap();
    let expect = fft2c(&img).unwrap();
    assert!(rel_err_c(&out, &expect) < 1e-12);

    let back = offres_adjoint(&out, &field, &timing_up(16, 5e-4)).unwrap();
    let expect_back = ifft2c(&out).unwrap();
    assert!(rel_err_c(&back, &expect_back) < 1e-12);
}

#[test]
fn matches_brute_force_dft() {
    let mut rng = seeded_rng(12);
    let img = random_cimage(&mut rng, &[8, 8]);
    let field = random_field(&mut rng, 8, 8, 40.0);
    let timing = timing_up(8, 8e-4);
    let fast = offres_forward(&img, &field, &timing).unwrap();
    let slow = offres_direct(&img, &field, &timing);
    assert!(rel_err_c(&fast, &slow) < 1e-10);
}

#[test]
fn constant_field_is_pe_shift() {
    // f0 * esp * ny = 31.25 Hz * 0.5 ms * 64 = 1.0 pixel. Crate convention:
    // the distorted image samples the object at y + polarity*f0*esp*ny, so
    // distorted[y] == img[y + shift] circularly.
    let ny = 64;
    let mut rng = seeded_rng(13);
    let img = random_cimage(&mut rng, &[ny, ny]);
    let f0 = 31.25;
    let field = FieldMap::constant(ny, ny, f0);

    for (pol, shift) in [(Polarity::Up, 1i64), (Polarity::Down, -1i64)] {
        let timing = EpiTiming::new(5e-4, pol, ny / 2, ny).unwrap();
        let k = offres_forward(&img, &field, &timing).unwrap();
        let distorted = ifft2c(&k).unwrap();
        let mut expect = CTensor::zeros(&[ny, ny]);
        for y in 0..ny {
            let src = (y as i64 + shift).rem_euclid(ny as i64) as usize;
            for x in 0..ny {
                *expect.at2_mut(y, x) = img.at2(src, x);
            }
        }
        assert!(
            rel_err_c(&distorted, &expect) < 1e-10,
            "polarity {pol:?} disagrees with shift oracle"
        );
    }
}

#[test]
fn forward_adjoint_pair() {
    let mut rng = seeded_rng(14);
    let img = random_cimage(&mut rng, &[12, 10]);
    let k = random_cimage(&mut rng, &[12, 10]);
    let field = random_field(&mut rng, 12, 10, 60.0);
    let timing = timing_up(12, 6e-4);
    let lhs = offres_forward(&img, &field, &timing).unwrap().dot(&k);
    let rhs = img.dot(&offres_adjoint(&k, &field, &timing).unwrap());
    assert!((lhs - rhs).norm() < 1e-10 * img.norm2() * k.norm2());
}

#[test]
fn polarity_symmetry() {
    let mut rng = seeded_rng(15);
    let img = random_cimage(&mut rng, &[12, 12]);
    let field = random_field(&mut rng, 12, 12, 50.0);
    let neg = FieldMap::new(field.map.scale(-1.0)).unwrap();
    let up = EpiTiming::new(5e-4, Polarity::Up, 6, 12).unwrap();
    let down = EpiTiming::new(5e-4, Polarity::Down, 6, 12).unwrap();
    let a = offres_forward(&img, &field, &up).unwrap();
    let b = offres_forward(&img, &neg, &down).unwrap();
    assert!(rel_err_c(&a, &b) < 1e-12);
}

#[test]
fn full_operator_adjoint_and_linearity() {
    let mut rng = seeded_rng(16);
    let (ny, nx, nc) = (16, 16, 4);
    let coils = test_coils(&mut rng, nc, ny, nx);
    let field = random_field(&mut rng, ny, nx, 40.0);
    let timing = timing_up(ny, 5e-4);
    let mask = SamplingMask::interleaved(ny, nx, 2, 0.75, 0).unwrap();

    let x = random_cimage(&mut rng, &[ny, nx]);
    let y = random_cimage(&mut rng, &[nc, ny, nx]);

    // adjoint identity <A x, y> == <x, A^H y>
    let ax = forward_a(&x, &coils, &field, &timing, &mask).unwrap();
    let yshot = KSpaceShot {
        data: y.clone(),
        mask: mask.clone(),
        timing: timing.clone(),
    };
    let ahy = adjoint_ah(&yshot, &coils, &field).unwrap();
    let lhs = ax.data.dot(&y);
    let rhs = x.dot(&ahy);
    assert!((lhs - rhs).norm() < 1e-10 * x.norm2() * y.norm2());

    // linearity
    let x2 = random_cimage(&mut rng, &[ny, nx]);
    let (alpha, beta) = (Complex64::new(0.7, -0.3), Complex64::new(-1.1, 0.2));
    let mut combo = CTensor::zeros(&[ny, nx]);
    for i in 0..combo.len() {
        combo.data[i] = alpha * x.data[i] + beta * x2.data[i];
    }
    let a_combo = forward_a(&combo, &coils, &field, &timing, &mask).unwrap();
    let a_x2 = forward_a(&x2, &coils, &field, &timing, &mask).unwrap();
    let mut expect = CTensor::zeros(&[nc, ny, nx]);
    for i in 0..expect.len() {
        expect.data[i] = alpha * ax.data.data[i] + beta * a_x2.data.data[i];
    }
    assert!(rel_err_c(&a_combo.data, &expect) < 1e-12);

    // masked forward is idempotent under re-masking
    let mut remasked = ax.data.clone();
    mask.points.apply(&mut remasked);
    assert_eq!(remasked, ax.data);

    // A^H A is Hermitian PSD
    let axx = forward_a(&x, &coils, &field, &timing, &mask).unwrap();
    let ahax = adjoint_ah(&axx, &coils, &field).unwrap();
    assert!(x.dot(&ahax).re >= -1e-12);

    // zero image maps to zero k-space
    let zero = CTensor::zeros(&[ny, nx]);
    let az = forward_a(&zero, &coils, &field, &timing, &mask).unwrap();
    assert!(az.data.norm2() == 0.0);
}

#[test]
fn reduces_to_fft_with_trivial_components() {
    let (ny, nx) = (12, 12);
    let mut rng = seeded_rng(17);
    let x = random_cimage(&mut rng, &[ny, nx]);
    let ones = CTensor::from_vec(&[1, ny, nx], vec![Complex64::new(1.0, 0.0); ny * nx]);
    let coils = SensitivityMaps::new(ones).unwrap();
    let field = FieldMap::zeros(ny, nx);
    let mask = SamplingMask::full(ny, nx);
    let out = forward_a(&x, &coils, &field, &timing_up(ny, 5e-4), &mask).unwrap();
    let expect = fft2c(&x).unwrap();
    let sliced = CTensor::from_vec(&[ny, nx], out.data.data.clone());
    assert!(rel_err_c(&sliced, &expect) < 1e-12);
}

#[test]
fn mask_all_false_gives_zero_image() {
    let mut rng = seeded_rng(18);
    let (ny, nx, nc) = (12, 12, 3);
    let coils = test_coils(&mut rng, nc, ny, nx);
    let field = FieldMap::zeros(ny, nx);
    let shot = KSpaceShot {
        data: random_cimage(&mut rng, &[nc, ny, nx]),
        mask: SamplingMask {
            points: PointMask::none(ny, nx),
            accel: 1,
            pf_fraction: 1.0,
            shot_index: 0,
        },
        timing: timing_up(ny, 5e-4),
    };
    let out = adjoint_ah(&shot, &coils, &field).unwrap();
    assert_eq!(out.norm2(), 0.0);
}

#[test]
fn vc_round_trip_and_adjoint() {
    let mut rng = seeded_rng(19);
    let x = random_cimage(&mut rng, &[8, 8]);
    let s = vc_augment(&x);
    assert_eq!(s.shape, vec![2, 8, 8]);
    let back = vc_reduce(&s).unwrap();
    assert_eq!(back, x);

    // real input: both channels identical
    let real = CTensor::from_real(&RTensor::full(&[8, 8], 1.5));
    let sr = vc_augment(&real);
    assert_eq!(sr.data[..64], sr.data[64..]);

    // x = i*1 -> channels [i, -i]
    let imag = CTensor::from_vec(&[8, 8], vec![Complex64::new(0.0, 1.0); 64]);
    let si = vc_augment(&imag);
    assert!(si.data[..64].iter().all(|v| *v == Complex64::new(0.0, 1.0)));
    assert!(si.data[64..].iter().all(|v| *v == Complex64::new(0.0, -1.0)));

    // s = [x, 0] -> x/2
    let mut half = CTensor::zeros(&[2, 8, 8]);
    half.data[..64].copy_from_slice(&x.data);
    assert!(rel_err_c(&vc_reduce(&half).unwrap(), &x.scale(0.5)) < 1e-15);

    // adjoint under the real inner product: <vc_augment(a), s> == <a, vc_reduce(s)>
    let a = random_cimage(&mut rng, &[8, 8]);
    let s2 = random_cimage(&mut rng, &[2, 8, 8]);
    let lhs = vc_augment(&a).dot_re(&s2) * 0.5;
    let rhs = a.dot_re(&vc_reduce(&s2).unwrap());
    assert!((lhs - rhs).abs() < 1e-12 * a.norm2() * s2.norm2());

    // wrong channel count is rejected
    assert!(vc_reduce(&CTensor::zeros(&[3, 8, 8])).is_err());
}

#[test]
fn offres_rejects_non_finite_field() {
    let img = CTensor::zeros(&[8, 8]);
    let mut f = RTensor::zeros(&[8, 8]);
    f.data[0] = f64::INFINITY;
    assert!(FieldMap::new(f).is_err());
    let field = FieldMap::zeros(8, 8);
    assert!(offres_forward(&img, &field, &timing_up(8, 5e-4)).is_ok());
}

#[test]
fn echo_train_time_model() {
    let mut t = EpiTiming::new(5e-4, Polarity::Up, 8, 16).unwrap();
    t.line_order = vec![0, 2, 4, 6, 8, 10, 12, 14];
    t.model = LineTimeModel::EchoTrain { esp_scale: 2.0 };
    // line 8 sits at the center position -> time 0
    assert_eq!(t.line_time(8), 0.0);
    // line 10 is one train position later at esp*2
    assert!((t.line_time(10) - 1e-3).abs() < 1e-15);
}
