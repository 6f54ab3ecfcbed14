//! A tour of the forward physics: centered FFTs, the line-by-line
//! off-resonance operator, adjointness, and the constant-field pixel-shift
//! identity.
//!
//! Run with `cargo run --release -p epirec --example operator_playground`.

use num_complex::Complex64;

use epirec::epi::{
    adjoint_ah, forward_a, offres_adjoint, offres_forward, vc_augment, vc_reduce, EpiTiming,
    FieldMap, KSpaceShot, Polarity, SamplingMask,
};
use epirec::numerics::{fft2c, ifft2c, seeded_rng, Grid2D};
use epirec::phantom::{make_coils, make_field, make_phantom, DiffusionDirection, PhantomSpec, ShotPhase};
use epirec::tensor::{rel_err_c, CTensor};

fn random_image(rng: &mut epirec::numerics::RandomSource, ny: usize, nx: usize) -> CTensor {
    CTensor::from_vec(
        &[ny, nx],
        (0..ny * nx)
            .map(|_| Complex64::new(rng.normal(), rng.normal()))
            .collect(),
    )
}

fn main() {
    let mut rng = seeded_rng(1);
    let n = 64;
    let grid = Grid2D::square(n, 220.0).unwrap();

    // Parseval and round trip
    let x = random_image(&mut rng, n, n);
    let k = fft2c(&x).unwrap();
    let back = ifft2c(&k).unwrap();
    println!("fft2c round trip error: {:.3e}", rel_err_c(&back, &x));
    println!(
        "Parseval |k|/|x| - 1: {:.3e}",
        (k.norm2() / x.norm2() - 1.0).abs()
    );

    // constant field shifts the image by f0*esp*ny pixels
    let f0 = 31.25;
    let esp = 5e-4;
    let field = FieldMap::constant(n, n, f0);
    let timing = EpiTiming::new(esp, Polarity::Up, n / 2, n).unwrap();
    let spec = PhantomSpec::default_scene(n, n, 220.0, 0.0);
    let obj = make_phantom(&spec, &DiffusionDirection::b0(), &ShotPhase::zero()).unwrap();
    let distorted = ifft2c(&offres_forward(&obj, &field, &timing).unwrap()).unwrap();
    let shift_px = f0 * esp * n as f64;
    println!("\nconstant field {f0} Hz -> expected shift {shift_px} px");
    let mut best = (0i64, f64::INFINITY);
    for s in -3i64..=3 {
        let mut shifted = CTensor::zeros(&[n, n]);
        for y in 0..n {
            let src = (y as i64 + s).rem_euclid(n as i64) as usize;
            for xx in 0..n {
                *shifted.at2_mut(y, xx) = obj.at2(src, xx);
            }
        }
        let e = rel_err_c(&distorted, &shifted);
        if e < best.1 {
            best = (s, e);
        }
        println!("  shift {s:+} px: error {e:.3e}");
    }
    println!("best match at {:+} px (error {:.3e})", best.0, best.1);

    // adjointness of the full operator with coils, field and mask
    let coils = make_coils(&grid, 8).unwrap();
    let smooth = make_field(&grid, 50.0, &[]).unwrap();
    let mask = SamplingMask::interleaved(n, n, 2, 0.75, 0).unwrap();
    let y = CTensor::from_vec(
        &[8, n, n],
        (0..8 * n * n)
            .map(|_| Complex64::new(rng.normal(), rng.normal()))
            .collect(),
    );
    let ax = forward_a(&x, &coils, &smooth, &timing, &mask).unwrap();
    let shot = KSpaceShot {
        data: y.clone(),
        mask: mask.clone(),
        timing: timing.clone(),
    };
    let ahy = adjoint_ah(&shot, &coils, &smooth).unwrap();
    let lhs = ax.data.dot(&y);
    let rhs = x.dot(&ahy);
    println!(
        "\n<A x, y> vs <x, A^H y>: |diff| = {:.3e} (relative {:.3e})",
        (lhs - rhs).norm(),
        (lhs - rhs).norm() / (x.norm2() * y.norm2())
    );

    // E^H E is the identity only when every line time is zero
    let adj = offres_adjoint(
        &offres_forward(&x, &smooth, &timing).unwrap(),
        &smooth,
        &timing,
    )
    .unwrap();
    println!(
        "offres adjoint(forward(x)) vs x (nonzero field): {:.3e} (not an inverse)",
        rel_err_c(&adj, &x)
    );

    // virtual coil round trip
    let stack = vc_augment(&x);
    let red = vc_reduce(&stack).unwrap();
    println!("\nvc_reduce(vc_augment(x)) == x: {}", red == x);
}
