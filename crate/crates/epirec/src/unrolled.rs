//! The unrolled reconstructor: alternating dual-domain denoising and
//! conjugate-gradient data consistency, with the off-resonance field inside
//! the forward operator. One reconstruction per polarity group.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::ad::{Id, Tape};
use crate::cg::{solve_dc_tape, TapeDc};
use crate::epi::{FieldMap, KSpaceShot, PointMask, Polarity, SensitivityMaps};
use crate::error::{Error, Result};
use crate::nets::{denoise_image_tape, denoise_kspace_tape, ReconNodes, ReconParams};
use crate::tensor::CTensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct UnrollConfig {
    pub n_unrolls: usize,
    pub cg_iters: usize,
}

impl UnrollConfig {
    /// 8 unrolls, 10 CG steps per DC block.
    pub fn paper() -> Self {
        UnrollConfig {
            n_unrolls: 8,
            cg_iters: 10,
        }
    }

    /// 4 unrolls, 5 CG steps.
    pub fn desk() -> Self {
        UnrollConfig {
            n_unrolls: 4,
            cg_iters: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_unrolls < 1 || self.cg_iters < 1 {
            return Err(Error::validation("need at least one unroll and CG step"));
        }
        Ok(())
    }
}

/// Constants of one shot as seen by a reconstruction: its (possibly
/// overridden) sampling set and masked data.
struct ShotCtx {
    y_masked: Id,
    weights: Rc<crate::tensor::RTensor>,
    lines: Rc<Vec<usize>>,
    timing: crate::epi::EpiTiming,
}

fn shot_contexts(
    tape: &mut Tape,
    shots: &[&KSpaceShot],
    input_mask_override: Option<&[PointMask]>,
) -> Result<Vec<ShotCtx>> {
    if let Some(ov) = input_mask_override {
        if ov.len() != shots.len() {
            return Err(Error::validation(
                "need one override mask per shot when overriding",
            ));
        }
    }
    let mut out = Vec::with_capacity(shots.len());
    for (i, shot) in shots.iter().enumerate() {
        let points = match input_mask_override {
            Some(ov) => ov[i].clone(),
            None => shot.mask.points.clone(),
        };
        let mut y = shot.data.clone();
        points.apply(&mut y);
        let y_masked = tape.const_c(y);
        out.push(ShotCtx {
            y_masked,
            weights: Rc::new(points.to_weights()),
            lines: Rc::new(points.lines_with_any()),
            timing: shot.timing.clone(),
        });
    }
    Ok(out)
}

/// Record the full unrolled reconstruction on the tape and return the node
/// holding the final image estimate. `field` may be a constant or any
/// differentiable node (e.g. the output of the field estimator).
pub fn reconstruct_tape(
    tape: &mut Tape,
    shots: &[&KSpaceShot],
    coils: &SensitivityMaps,
    field: Id,
    nets: &ReconNodes,
    cfg: &UnrollConfig,
    input_mask_override: Option<&[PointMask]>,
) -> Result<Id> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::validation("no shots to reconstruct"));
    }
    let coil_rc = Rc::new(coils.maps.clone());
    let ctxs = shot_contexts(tape, shots, input_mask_override)?;

    // x0 = A^H y summed over shots
    let mut terms = Vec::with_capacity(ctxs.len());
    for c in &ctxs {
        let adj = tape.offres_adj(c.y_masked, field, &c.timing, c.lines.clone());
        terms.push(tape.coil_combine(adj, coil_rc.clone()));
    }
    let rhs = tape.add_many_c(&terms);

    let mut x = rhs;
    for _ in 0..cfg.n_unrolls {
        let z_i = denoise_image_tape(tape, x, &nets.ni);
        let z_k = denoise_kspace_tape(tape, x, &nets.nk);
        let coil_rc2 = coil_rc.clone();
        let ctx_ref: &[ShotCtx] = &ctxs;
        let dc = TapeDc {
            apply: Box::new(move |t: &mut Tape, v: Id| {
                let mut acc = Vec::with_capacity(ctx_ref.len());
                for c in ctx_ref {
                    let cm = t.coil_mul(v, coil_rc2.clone());
                    let k = t.offres_fwd(cm, field, &c.timing, c.lines.clone());
                    let km = t.mask_mul_c(k, c.weights.clone());
                    let adj = t.offres_adj(km, field, &c.timing, c.lines.clone());
                    acc.push(t.coil_combine(adj, coil_rc2.clone()));
                }
                t.add_many_c(&acc)
            }),
            rhs,
            lambdas: vec![(nets.lambda_i, z_i), (nets.lambda_k, z_k)],
        };
        x = solve_dc_tape(tape, &dc, cfg.cg_iters);
    }
    Ok(x)
}

/// Plain reconstruction of one polarity group's shots under a fixed field.
pub fn reconstruct(
    shots: &[&KSpaceShot],
    coils: &SensitivityMaps,
    field: &FieldMap,
    params: &ReconParams,
    cfg: &UnrollConfig,
    input_mask_override: Option<&[PointMask]>,
) -> Result<CTensor> {
    for s in shots {
        if s.data.shape != coils.maps.shape {
            return Err(Error::validation("shot shape does not match coils"));
        }
    }
    field.map.check_finite("field map")?;
    let mut tape = Tape::new();
    let f = tape.const_r(field.map.clone());
    let nets = params.on_tape(&mut tape, false);
    let out = reconstruct_tape(&mut tape, shots, coils, f, &nets, cfg, input_mask_override)?;
    Ok(tape.value_c(out).clone())
}

/// Split shots by polarity; error when either group is missing.
pub fn split_by_polarity(shots: &[KSpaceShot]) -> Result<(Vec<&KSpaceShot>, Vec<&KSpaceShot>)> {
    let up: Vec<&KSpaceShot> = shots.iter().filter(|s| s.polarity() == Polarity::Up).collect();
    let down: Vec<&KSpaceShot> = shots
        .iter()
        .filter(|s| s.polarity() == Polarity::Down)
        .collect();
    if up.is_empty() || down.is_empty() {
        return Err(Error::validation(
            "need both blip-up and blip-down shots",
        ));
    }
    Ok((up, down))
}

/// Reconstruct blip-up and blip-down images separately with the same field
/// and parameters.
pub fn reconstruct_polarity_pair(
    shots: &[KSpaceShot],
    coils: &SensitivityMaps,
    field: &FieldMap,
    params: &ReconParams,
    cfg: &UnrollConfig,
) -> Result<(CTensor, CTensor)> {
    let (up, down) = split_by_polarity(shots)?;
    let x_up = reconstruct(&up, coils, field, params, cfg, None)?;
    let x_down = reconstruct(&down, coils, field, params, cfg, None)?;
    Ok((x_up, x_down))
}

#[cfg(test)]
mod tests {
    use num_complex::Complex64;

    use super::*;
    use crate::ad::fd::{finite_diff_grad, grad_rel_err};
    use crate::epi::{forward_a, EpiTiming, SamplingMask};
    use crate::nets::DenoiserConfig;
    use crate::numerics::{ifft2c, seeded_rng};
    use crate::phantom::{
        make_coils, make_field, make_phantom, simulate_acquisition, DiffusionDirection,
        PhantomSpec, ShotPhase,
    };
    use crate::numerics::Grid2D;
    use crate::tensor::{rel_err_c, RTensor};

    fn zero_residual_params(rng: &mut crate::numerics::RandomSource, lambda: f64) -> ReconParams {
        let mut p = ReconParams::init(
            rng,
            &DenoiserConfig {
                n_layers: 2,
                n_features: 3,
            },
        )
        .unwrap();
        for l in p.ni.layers.iter_mut().chain(p.nk.layers.iter_mut()) {
            l.w = RTensor::zeros(&l.w.shape);
            l.b = RTensor::zeros(&l.b.shape);
        }
        p.lambda_i = lambda;
        p.lambda_k = lambda;
        p
    }

    #[test]
    fn pure_dc_inverts_unitary_operator() {
        // 1 unroll, zero-residual denoisers, lambda -> 0, full mask, f = 0,
        // one unit coil: the reconstruction is ifft2c(y)
        let mut rng = seeded_rng(71);
        let (ny, nx) = (12, 12);
        let y = CTensor::from_vec(
            &[1, ny, nx],
            (0..ny * nx)
                .map(|_| Complex64::new(rng.normal(), rng.normal()))
                .collect(),
        );
        let coils = SensitivityMaps::new(CTensor::from_vec(
            &[1, ny, nx],
            vec![Complex64::new(1.0, 0.0); ny * nx],
        ))
        .unwrap();
        let shot = KSpaceShot {
            data: y.clone(),
            mask: SamplingMask::full(ny, nx),
            timing: EpiTiming::new(5e-4, Polarity::Up, ny / 2, ny).unwrap(),
        };
        let field = FieldMap::zeros(ny, nx);
        let params = zero_residual_params(&mut rng, 1e-12);
        let cfg = UnrollConfig {
            n_unrolls: 1,
            cg_iters: 4,
        };
        let out = reconstruct(&[&shot], &coils, &field, &params, &cfg, None).unwrap();
        let y2 = CTensor::from_vec(&[ny, nx], y.data.clone());
        let expect = ifft2c(&y2).unwrap();
        assert!(rel_err_c(&out, &expect) < 1e-8);
    }

    struct Scene {
        grid: Grid2D,
        coils: SensitivityMaps,
        field: FieldMap,
        truth: CTensor,
        shots: Vec<KSpaceShot>,
    }

    fn make_scene(
        n: usize,
        ncoils: usize,
        field_hz: f64,
        accel: usize,
        pf: f64,
        noise: f64,
        seed: u64,
    ) -> Scene {
        let grid = Grid2D::square(n, 220.0).unwrap();
        let spec = PhantomSpec::default_scene(n, n, 220.0, noise);
        let truth = make_phantom(&spec, &DiffusionDirection::b0(), &ShotPhase::zero()).unwrap();
        let coils = make_coils(&grid, ncoils).unwrap();
        let field = if field_hz == 0.0 {
            FieldMap::zeros(n, n)
        } else {
            make_field(&grid, field_hz, &[]).unwrap()
        };
        let mut rng = seeded_rng(seed);
        let mut shots = Vec::new();
        for pol in [Polarity::Up, Polarity::Down] {
            for s in 0..accel.max(1).min(2) {
                let timing = EpiTiming::new(5e-4, pol, n / 2, n).unwrap();
                let mask = if accel <= 1 {
                    SamplingMask::full(n, n)
                } else {
                    SamplingMask::interleaved(n, n, accel, pf, s).unwrap()
                };
                let mut sim = simulate_acquisition(
                    &[truth.clone()],
                    &coils,
                    &field,
                    &[timing],
                    &[mask],
                    noise,
                    &mut rng,
                )
                .unwrap();
                shots.append(&mut sim);
            }
        }
        Scene {
            grid,
            coils,
            field,
            truth,
            shots,
        }
    }

    #[test]
    fn wellposed_inversion_recovers_ground_truth() {
        // noiseless, fully sampled, true field, zero-residual denoisers
        let scene = make_scene(32, 4, 40.0, 1, 1.0, 0.0, 72);
        let mut rng = seeded_rng(73);
        let params = zero_residual_params(&mut rng, 1e-9);
        let cfg = UnrollConfig {
            n_unrolls: 2,
            cg_iters: 15,
        };
        let (up, _) = split_by_polarity(&scene.shots).unwrap();
        let out = reconstruct(&up, &scene.coils, &scene.field, &params, &cfg, None).unwrap();
        let nrmse = out.magnitude().sub(&scene.truth.magnitude()).norm2()
            / scene.truth.magnitude().norm2();
        assert!(nrmse < 1e-3, "NRMSE {nrmse}");
        let _ = scene.grid;
    }

    #[test]
    fn deterministic_reconstruction() {
        let scene = make_scene(16, 2, 30.0, 2, 0.75, 0.0, 74);
        let mut rng = seeded_rng(75);
        let params = ReconParams::init(
            &mut rng,
            &DenoiserConfig {
                n_layers: 2,
                n_features: 3,
            },
        )
        .unwrap();
        let cfg = UnrollConfig {
            n_unrolls: 2,
            cg_iters: 3,
        };
        let (up, _) = split_by_polarity(&scene.shots).unwrap();
        let a = reconstruct(&up, &scene.coils, &scene.field, &params, &cfg, None).unwrap();
        let b = reconstruct(&up, &scene.coils, &scene.field, &params, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dc_dominance_matches_cg_only_solve() {
        // lambda -> 0 with full sampling: unrolled recon equals the
        // regularization-free least-squares solve
        let scene = make_scene(16, 3, 25.0, 1, 1.0, 0.0, 76);
        let mut rng = seeded_rng(77);
        let params = zero_residual_params(&mut rng, 1e-10);
        let cfg = UnrollConfig {
            n_unrolls: 3,
            cg_iters: 20,
        };
        let (up, _) = split_by_polarity(&scene.shots).unwrap();
        let out = reconstruct(&up, &scene.coils, &scene.field, &params, &cfg, None).unwrap();

        let p = crate::cg::DcProblem {
            operator: Box::new(|x: &CTensor| {
                let s = forward_a(
                    x,
                    &scene.coils,
                    &scene.field,
                    &up[0].timing,
                    &up[0].mask,
                )
                .unwrap();
                crate::epi::adjoint_ah(&s, &scene.coils, &scene.field).unwrap()
            }),
            rhs: crate::epi::adjoint_ah(up[0], &scene.coils, &scene.field).unwrap(),
            lambdas: vec![],
        };
        let (ls, _) = crate::cg::solve_dc(&p, 60, 1e-13).unwrap();
        assert!(rel_err_c(&out, &ls) < 1e-6);
    }

    #[test]
    fn monotone_data_fidelity_with_zero_residual_nets() {
        let scene = make_scene(16, 2, 30.0, 2, 0.75, 0.0, 78);
        let mut rng = seeded_rng(79);
        let params = zero_residual_params(&mut rng, 0.05);
        let (up, _) = split_by_polarity(&scene.shots).unwrap();

        let fidelity = |x: &CTensor| -> f64 {
            let mut acc = 0.0;
            for s in &up {
                let ax = forward_a(x, &scene.coils, &scene.field, &s.timing, &s.mask).unwrap();
                acc += ax.data.sub(&s.data).norm2().powi(2);
            }
            acc.sqrt()
        };

        let mut prev = f64::INFINITY;
        for k in 1..=4 {
            let cfg = UnrollConfig {
                n_unrolls: k,
                cg_iters: 12,
            };
            let out = reconstruct(&up, &scene.coils, &scene.field, &params, &cfg, None).unwrap();
            let f = fidelity(&out);
            assert!(
                f <= prev + 1e-9,
                "fidelity must not increase: unroll {k}: {f} vs {prev}"
            );
            prev = f;
        }
    }

    #[test]
    fn polarity_pair_symmetric_and_shifted() {
        // f = 0 scene: identical masks and data for both polarities
        let scene = make_scene(32, 3, 0.0, 2, 1.0, 0.0, 80);
        let mut rng = seeded_rng(81);
        let params = zero_residual_params(&mut rng, 0.05);
        let cfg = UnrollConfig {
            n_unrolls: 2,
            cg_iters: 8,
        };
        let (xu, xd) =
            reconstruct_polarity_pair(&scene.shots, &scene.coils, &scene.field, &params, &cfg)
                .unwrap();
        assert!(rel_err_c(&xu, &xd) < 1e-10, "f==0 gives symmetric recons");

        // constant field, reconstructed with f == 0: the pair shows the
        // known opposite one-pixel displacements
        let n = 64;
        let grid = Grid2D::square(n, 220.0).unwrap();
        let spec = PhantomSpec::default_scene(n, n, 220.0, 0.0);
        let truth = make_phantom(&spec, &DiffusionDirection::b0(), &ShotPhase::zero()).unwrap();
        let coils = make_coils(&grid, 3).unwrap();
        let field = FieldMap::constant(n, n, 31.25); // 1 px at esp 0.5 ms
        let mut rng2 = seeded_rng(82);
        let mut shots = Vec::new();
        for pol in [Polarity::Up, Polarity::Down] {
            let timing = EpiTiming::new(5e-4, pol, n / 2, n).unwrap();
            let mask = SamplingMask::full(n, n);
            shots.append(
                &mut simulate_acquisition(
                    &[truth.clone()],
                    &coils,
                    &field,
                    &[timing],
                    &[mask],
                    0.0,
                    &mut rng2,
                )
                .unwrap(),
            );
        }
        let zerof = FieldMap::zeros(n, n);
        let (xu2, xd2) =
            reconstruct_polarity_pair(&shots, &coils, &zerof, &params, &cfg).unwrap();
        // x_up(y) = o(y+1), x_down(y) = o(y-1): x_up shifted by 2 matches x_down
        let mu = xu2.magnitude();
        let md = xd2.magnitude();
        let mut shifted = RTensor::zeros(&[n, n]);
        for y in 0..n {
            let src = (y as i64 - 2).rem_euclid(n as i64) as usize;
            for x in 0..n {
                *shifted.at2_mut(y, x) = mu.at2(src, x);
            }
        }
        let err = shifted.sub(&md).norm2() / md.norm2();
        assert!(err < 0.05, "opposite displacement mismatch: {err}");

        // missing polarity is rejected
        let up_only: Vec<KSpaceShot> = shots
            .iter()
            .filter(|s| s.polarity() == Polarity::Up)
            .cloned()
            .collect();
        assert!(reconstruct_polarity_pair(&up_only, &coils, &zerof, &params, &cfg).is_err());
    }

    #[test]
    fn gradients_through_full_unroll_match_finite_differences() {
        // 8x8, 2 unrolls, 2 CG steps: checks both the network parameters
        // and the field map through the whole reconstruction
        let mut rng = seeded_rng(83);
        let n = 8;
        let grid = Grid2D::square(n, 220.0).unwrap();
        let spec = PhantomSpec::default_scene(n, n, 220.0, 0.0);
        let truth = make_phantom(&spec, &DiffusionDirection::b0(), &ShotPhase::zero()).unwrap();
        let coils = make_coils(&grid, 2).unwrap();
        let field = make_field(&grid, 30.0, &[]).unwrap();
        let timing = EpiTiming::new(5e-4, Polarity::Up, n / 2, n).unwrap();
        let mask = SamplingMask::interleaved(n, n, 2, 1.0, 0).unwrap();
        let mut rng_sim = seeded_rng(84);
        let shots = simulate_acquisition(
            &[truth.clone()],
            &coils,
            &field,
            &[timing],
            &[mask],
            0.0,
            &mut rng_sim,
        )
        .unwrap();
        let shot_refs: Vec<&KSpaceShot> = shots.iter().collect();

        let mut params = ReconParams::init(
            &mut rng,
            &DenoiserConfig {
                n_layers: 2,
                n_features: 2,
            },
        )
        .unwrap();
        // non-trivial residual branches; random biases keep every relu away
        // from its kink so central differences see a smooth function
        for l in params.ni.layers.iter_mut().chain(params.nk.layers.iter_mut()) {
            if l.w.data.iter().all(|&v| v == 0.0) {
                l.w = RTensor::from_vec(
                    &l.w.shape.clone(),
                    (0..l.w.len()).map(|_| 0.1 * rng.normal()).collect(),
                );
            }
            l.b = RTensor::from_vec(
                &l.b.shape.clone(),
                (0..l.b.len()).map(|_| 0.05 + 0.05 * rng.normal().abs()).collect(),
            );
        }
        let cfg = UnrollConfig {
            n_unrolls: 2,
            cg_iters: 2,
        };

        // (a) parameter gradients
        let base = params.clone();
        let field_c = field.clone();
        let eval_p = |flat: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut p = base.clone();
            p.unflatten(flat);
            let mut tape = Tape::new();
            let f = tape.const_r(field_c.map.clone());
            let nets = p.on_tape(&mut tape, true);
            let x = reconstruct_tape(&mut tape, &shot_refs, &coils, f, &nets, &cfg, None).unwrap();
            let loss_node = tape.sq_norm_c(x);
            let loss = tape.scalar_value(loss_node);
            let grads = tape.backward(loss_node);
            (loss, Some(nets.collect_grads(&tape, &grads)))
        };
        let flat0 = base.flatten();
        let (_, g) = eval_p(&flat0);
        let numeric = finite_diff_grad(|p| eval_p(p).0, &flat0, 1e-5);
        let err = grad_rel_err(&g.unwrap(), &numeric);
        assert!(err < 1e-3, "unrolled parameter gradient mismatch: {err}");

        // (b) field-map gradient through the full reconstruction
        let params_c = params.clone();
        let eval_f = |fmap: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let f = tape.leaf_r(RTensor::from_vec(&[n, n], fmap.to_vec()));
            let nets = params_c.on_tape(&mut tape, false);
            let x = reconstruct_tape(&mut tape, &shot_refs, &coils, f, &nets, &cfg, None).unwrap();
            let m = tape.mag_c(x);
            let gy = tape.grad_y(m);
            let l2 = tape.sq_norm_r(m);
            let l1 = tape.l1_norm_r(gy);
            let loss_node = tape.add_r(l2, l1);
            let loss = tape.scalar_value(loss_node);
            let grads = tape.backward(loss_node);
            (loss, Some(grads.r(f).unwrap().data.clone()))
        };
        let f0 = field.map.data.clone();
        let (_, gf) = eval_f(&f0);
        let numeric_f = finite_diff_grad(|p| eval_f(p).0, &f0, 1e-5);
        let err_f = grad_rel_err(&gf.unwrap(), &numeric_f);
        assert!(err_f < 1e-3, "field gradient mismatch: {err_f}");
    }

    #[test]
    fn input_mask_override_restricts_data_use() {
        let scene = make_scene(16, 2, 20.0, 2, 1.0, 0.0, 85);
        let mut rng = seeded_rng(86);
        let params = zero_residual_params(&mut rng, 0.05);
        let cfg = UnrollConfig {
            n_unrolls: 1,
            cg_iters: 4,
        };
        let (up, _) = split_by_polarity(&scene.shots).unwrap();
        // drop half of each shot's lines from the input
        let overrides: Vec<PointMask> = up
            .iter()
            .map(|s| {
                let mut pm = s.mask.points.clone();
                let lines = s.mask.sampled_lines();
                for &l in lines.iter().step_by(2) {
                    pm.set_line(l, false);
                }
                pm
            })
            .collect();
        let full = reconstruct(&up, &scene.coils, &scene.field, &params, &cfg, None).unwrap();
        let restricted = reconstruct(
            &up,
            &scene.coils,
            &scene.field,
            &params,
            &cfg,
            Some(&overrides),
        )
        .unwrap();
        assert!(rel_err_c(&full, &restricted) > 1e-6, "override must matter");
    }
}
