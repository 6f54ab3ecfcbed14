//! Zero-shot self-supervised optimization: k-space mask partitioning, the
//! data-consistency / up-down consistency / field losses, and the
//! three-stage alternating schedule over the field estimator (theta) and
//! the reconstruction network (phi).
//!
//! Stage 1 distills the initial field into the estimator. Stage 2 (the
//! first epoch) updates phi alone on the ZS-SSL DC losses. From the second
//! epoch on, each epoch first updates theta on the up/down field loss with
//! phi frozen, then phi on DC plus up/down consistency with theta frozen.

use serde::{Deserialize, Serialize};

use crate::ad::{Id, Tape};
use crate::epi::{FieldMap, KSpaceShot, PointMask, SamplingMask, SensitivityMaps};
use crate::error::{Error, Result};
use crate::inr::{
    fit_to_initial, predict_field, predict_field_tape, FieldContext, FieldParams, FitReport,
    InrConfig,
};
use crate::nets::{DenoiserConfig, ReconParams};
use crate::numerics::{Grid2D, RandomSource};
use crate::optim::Adam;
use crate::phantom::DiffusionDirection;
use crate::tensor::CTensor;
use crate::unrolled::{reconstruct_tape, split_by_polarity, UnrollConfig};

/// ZS-SSL split of one shot's acquired points: per replica a training-input
/// set and a loss set, plus one validation set shared by all replicas.
#[derive(Clone, Debug)]
pub struct MaskPartition {
    pub input: Vec<PointMask>,
    pub loss: Vec<PointMask>,
    pub validation: PointMask,
    pub omega: PointMask,
}

impl MaskPartition {
    pub fn replicas(&self) -> usize {
        self.input.len()
    }

    /// Input set of the validation replica: everything acquired except the
    /// validation points.
    pub fn validation_input(&self) -> PointMask {
        self.omega.minus(&self.validation)
    }

    /// Exactness of the partition contract for every replica.
    pub fn check_invariants(&self) -> Result<()> {
        for t in 0..self.replicas() {
            let inp = &self.input[t];
            let lss = &self.loss[t];
            if inp.intersects(lss) {
                return Err(Error::validation(format!(
                    "replica {t}: input and loss sets overlap"
                )));
            }
            if inp.intersects(&self.validation) || lss.intersects(&self.validation) {
                return Err(Error::validation(format!(
                    "replica {t}: validation points leaked into training sets"
                )));
            }
            let rest = self.omega.minus(&self.validation);
            let mut union = vec![false; rest.keep.len()];
            for (i, u) in union.iter_mut().enumerate() {
                *u = inp.keep[i] || lss.keep[i];
            }
            if union != rest.keep {
                return Err(Error::validation(format!(
                    "replica {t}: input and loss do not cover omega minus validation"
                )));
            }
        }
        Ok(())
    }
}

/// The central PE lines always kept in every training-input set.
pub const CENTER_LINES: usize = 4;

/// Partition the acquired points: 10% of them (off-center) become the fixed
/// validation set; per replica, a `rho` fraction of the remaining acquired
/// points is drawn as the loss set and the rest (always including the
/// k-space center lines) is the training input.
pub fn partition_masks(
    mask: &SamplingMask,
    t_replicas: usize,
    rho: f64,
    rng: &mut RandomSource,
) -> Result<MaskPartition> {
    if !(0.0 < rho && rho < 1.0) {
        return Err(Error::validation("rho must be in (0, 1)"));
    }
    if t_replicas < 1 {
        return Err(Error::validation("need at least one replica"));
    }
    let omega = mask.points.clone();
    let (ny, nx) = (omega.ny, omega.nx);
    let c0 = ny / 2 - CENTER_LINES / 2;
    let center_line = |idx: usize| -> bool {
        let y = idx / nx;
        y >= c0 && y < c0 + CENTER_LINES
    };

    let acquired: Vec<usize> = (0..ny * nx).filter(|&i| omega.keep[i]).collect();
    let off_center: Vec<usize> = acquired
        .iter()
        .copied()
        .filter(|&i| !center_line(i))
        .collect();

    let n_val = ((acquired.len() as f64) * 0.10).round() as usize;
    if off_center.len() < n_val + 1 {
        return Err(Error::validation(
            "acquired set too small for a validation split",
        ));
    }
    let mut shuffled = off_center.clone();
    rng.shuffle(&mut shuffled);
    let mut validation = PointMask::none(ny, nx);
    for &i in shuffled.iter().take(n_val) {
        validation.keep[i] = true;
    }

    let rest_count = acquired.len() - n_val;
    let n_loss = ((rest_count as f64) * rho).round() as usize;
    let pool: Vec<usize> = off_center
        .iter()
        .copied()
        .filter(|&i| !validation.keep[i])
        .collect();
    if pool.len() < n_loss || n_loss == 0 {
        return Err(Error::validation(
            "acquired set too small for the requested loss fraction",
        ));
    }

    let mut input = Vec::with_capacity(t_replicas);
    let mut loss = Vec::with_capacity(t_replicas);
    for _ in 0..t_replicas {
        let mut p = pool.clone();
        rng.shuffle(&mut p);
        let mut lss = PointMask::none(ny, nx);
        for &i in p.iter().take(n_loss) {
            lss.keep[i] = true;
        }
        let mut inp = PointMask::none(ny, nx);
        for &i in &acquired {
            if !validation.keep[i] && !lss.keep[i] {
                inp.keep[i] = true;
            }
        }
        input.push(inp);
        loss.push(lss);
    }

    let part = MaskPartition {
        input,
        loss,
        validation,
        omega,
    };
    part.check_invariants()?;
    Ok(part)
}

/// Loss-term weights; the balance the alternating schedule is sensitive to.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_l2: f64,
    pub w_ud: f64,
    pub w_int: f64,
    pub w_grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_l1: 0.5,
            w_l2: 0.5,
            w_ud: 0.1,
            w_int: 1.0,
            w_grad: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_l1, self.w_l2, self.w_ud, self.w_int, self.w_grad];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::validation("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// DC loss on the tape, restricted to the given loss sets:
/// `w_l2 * ||A x - y||_2 / ||y||_2 + w_l1 * ||A x - y||_1 / ||y||_1` with
/// norms taken jointly over shots and coils on loss points only.
/// Returns `(loss, l2_term, l1_term)` nodes.
pub fn dc_loss_tape(
    tape: &mut Tape,
    x: Id,
    shots: &[&KSpaceShot],
    coils: &SensitivityMaps,
    field: Id,
    loss_sets: &[PointMask],
    w: &LossWeights,
) -> Result<(Id, Id, Id)> {
    if shots.len() != loss_sets.len() {
        return Err(Error::validation("need one loss set per shot"));
    }
    let coil_rc = std::rc::Rc::new(coils.maps.clone());
    let mut l2_num_terms = Vec::new();
    let mut l1_num_terms = Vec::new();
    let mut l2_den_sq = 0.0;
    let mut l1_den = 0.0;
    for (shot, lset) in shots.iter().zip(loss_sets) {
        if lset.count() == 0 {
            return Err(Error::validation("empty loss set"));
        }
        let weights = std::rc::Rc::new(lset.to_weights());
        let lines = std::rc::Rc::new(lset.lines_with_any());
        let mut y = shot.data.clone();
        lset.apply(&mut y);
        l2_den_sq += y.norm2().powi(2);
        l1_den += y.data.iter().map(|z| z.norm()).sum::<f64>();

        let cm = tape.coil_mul(x, coil_rc.clone());
        let k = tape.offres_fwd(cm, field, &shot.timing, lines.clone());
        let km = tape.mask_mul_c(k, weights.clone());
        let y_const = tape.const_c(y);
        let diff = tape.sub_c(km, y_const);
        l2_num_terms.push(tape.sq_norm_c(diff));
        l1_num_terms.push(tape.l1_norm_c(diff));
    }
    let l2_den = l2_den_sq.sqrt().max(1e-300);
    let l1_den = l1_den.max(1e-300);

    let l2_sum = tape.add_many_r(&l2_num_terms);
    let l2_norm = tape.ssqrt(l2_sum);
    let l2_term = tape.scale_r(l2_norm, 1.0 / l2_den);

    let l1_sum = tape.add_many_r(&l1_num_terms);
    let l1_term = tape.scale_r(l1_sum, 1.0 / l1_den);

    let l2w = tape.scale_r(l2_term, w.w_l2);
    let l1w = tape.scale_r(l1_term, w.w_l1);
    let total = tape.add_r(l2w, l1w);
    Ok((total, l2_term, l1_term))
}

/// Plain DC loss.
pub fn dc_loss(
    x: &CTensor,
    shots: &[&KSpaceShot],
    coils: &SensitivityMaps,
    field: &FieldMap,
    loss_sets: &[PointMask],
    w: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xi = tape.const_c(x.clone());
    let f = tape.const_r(field.map.clone());
    let (total, _, _) = dc_loss_tape(&mut tape, xi, shots, coils, f, loss_sets, w)?;
    Ok(tape.scalar_value(total))
}

/// Magnitude consistency between the corrected blip-up and blip-down
/// images: `|| |x_up| - |x_down| ||_2^2 / (|| |x_up| ||_2 * || |x_down| ||_2)`.
pub fn updown_consistency_loss_tape(tape: &mut Tape, x_up: Id, x_down: Id) -> Id {
    let mu = tape.mag_c(x_up);
    let md = tape.mag_c(x_down);
    let d = tape.sub_r(mu, md);
    let num = tape.sq_norm_r(d);
    let nu2 = tape.sq_norm_r(mu);
    let nd2 = tape.sq_norm_r(md);
    let nu = tape.ssqrt(nu2);
    let nd = tape.ssqrt(nd2);
    let den = tape.smul(nu, nd);
    let den_safe = tape.sadd_const(den, 1e-300);
    tape.sdiv(num, den_safe)
}

pub fn updown_consistency_loss(x_up: &CTensor, x_down: &CTensor) -> f64 {
    let mut tape = Tape::new();
    let a = tape.const_c(x_up.clone());
    let b = tape.const_c(x_down.clone());
    let l = updown_consistency_loss_tape(&mut tape, a, b);
    tape.scalar_value(l)
}

/// Field-refinement loss: the normalized L2 intensity difference plus the
/// normalized L1 difference of forward-difference gradients between the
/// corrected blip-up/down magnitudes.
pub fn field_loss_tape(tape: &mut Tape, x_up: Id, x_down: Id, w: &LossWeights) -> Id {
    let intensity = updown_consistency_loss_tape(tape, x_up, x_down);
    let intensity_w = tape.scale_r(intensity, w.w_int);

    let mu = tape.mag_c(x_up);
    let md = tape.mag_c(x_down);
    let guy = tape.grad_y(mu);
    let gux = tape.grad_x(mu);
    let gdy = tape.grad_y(md);
    let gdx = tape.grad_x(md);
    let dy = tape.sub_r(guy, gdy);
    let dx = tape.sub_r(gux, gdx);
    let l1y = tape.l1_norm_r(dy);
    let l1x = tape.l1_norm_r(dx);
    let num = tape.add_r(l1y, l1x);

    let uy = tape.l1_norm_r(guy);
    let ux = tape.l1_norm_r(gux);
    let u_n = tape.add_r(uy, ux);
    let dyn_ = tape.l1_norm_r(gdy);
    let dxn = tape.l1_norm_r(gdx);
    let d_n = tape.add_r(dyn_, dxn);
    let prod = tape.smul(u_n, d_n);
    let den = tape.ssqrt(prod);
    let den_safe = tape.sadd_const(den, 1e-300);
    let grad_term = tape.sdiv(num, den_safe);
    let grad_w = tape.scale_r(grad_term, w.w_grad);

    tape.add_r(intensity_w, grad_w)
}

pub fn field_loss(x_up: &CTensor, x_down: &CTensor, w: &LossWeights) -> f64 {
    let mut tape = Tape::new();
    let a = tape.const_c(x_up.clone());
    let b = tape.const_c(x_down.clone());
    let l = field_loss_tape(&mut tape, a, b, w);
    tape.scalar_value(l)
}

/// Everything the trainer needs about one scene.
#[derive(Clone)]
pub struct TrainScene {
    pub grid: Grid2D,
    pub coils: SensitivityMaps,
    pub directions: Vec<DiffusionDirection>,
    /// Shots per direction, both polarities mixed.
    pub shots: Vec<Vec<KSpaceShot>>,
    pub init_field: FieldMap,
    pub ctx: FieldContext,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub denoiser: DenoiserConfig,
    pub inr: InrConfig,
    pub unroll: UnrollConfig,
    pub weights: LossWeights,
    pub t_replicas: usize,
    pub rho: f64,
    pub epochs: usize,
    pub lr_phi: f64,
    pub lr_theta: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub seed: u64,
    /// When false the field stays at the initializer (the static-field
    /// baseline): stage 1 and every theta pass are skipped.
    pub field_updates: bool,
    pub verbose: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.unroll.validate()?;
        self.weights.validate()?;
        if self.epochs < 1 {
            return Err(Error::validation("need at least one epoch"));
        }
        if self.t_replicas < 1 {
            return Err(Error::validation("need at least one replica"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub stage: u8,
    pub dc_l2: f64,
    pub dc_l1: f64,
    pub updown: f64,
    pub field: f64,
    pub validation_dc: f64,
    pub best_validation_so_far: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1: Option<FitReport>,
    pub epochs: Vec<EpochLosses>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub aborted: Option<String>,
    pub seed: u64,
}

pub struct TrainOutput {
    pub theta: FieldParams,
    pub phi: ReconParams,
    pub report: TrainReport,
    /// Refined per-direction field maps at the best checkpoint.
    pub fields: Vec<FieldMap>,
}

/// Optimizer/parameter snapshot sufficient to resume an epoch-granular run
/// bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub next_epoch: usize,
    pub theta_flat: Vec<f64>,
    pub phi_flat: Vec<f64>,
    pub adam_theta: Adam,
    pub adam_phi: Adam,
    pub best_validation: f64,
    pub best_epoch: usize,
    pub best_theta_flat: Vec<f64>,
    pub best_phi_flat: Vec<f64>,
    pub report: TrainReport,
}

pub struct Trainer<'a> {
    scene: &'a TrainScene,
    cfg: TrainConfig,
    partitions: Vec<Vec<MaskPartition>>,
    pub theta: FieldParams,
    pub phi: ReconParams,
    adam_theta: Adam,
    adam_phi: Adam,
    fields: Vec<FieldMap>,
    next_epoch: usize,
    best_validation: f64,
    best_epoch: usize,
    best_theta: FieldParams,
    best_phi: ReconParams,
    report: TrainReport,
}

impl<'a> Trainer<'a> {
    pub fn new(scene: &'a TrainScene, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if scene.directions.len() != scene.shots.len() {
            return Err(Error::validation("one shot list per direction required"));
        }
        let root = RandomSource::from_seed(cfg.seed);
        let mut partitions = Vec::with_capacity(scene.shots.len());
        for (d, shots) in scene.shots.iter().enumerate() {
            let mut per_shot = Vec::with_capacity(shots.len());
            for (s, shot) in shots.iter().enumerate() {
                let mut rng = root.derive(&format!("partition/d{d}/s{s}"));
                per_shot.push(partition_masks(
                    &shot.mask,
                    cfg.t_replicas,
                    cfg.rho,
                    &mut rng,
                )?);
            }
            partitions.push(per_shot);
        }

        let mut rng_theta = root.derive("theta-init");
        let theta = FieldParams::init(&mut rng_theta, &cfg.inr);
        let mut rng_phi = root.derive("phi-init");
        let phi = ReconParams::init(&mut rng_phi, &cfg.denoiser)?;
        let adam_theta = Adam::new(theta.n_params(), cfg.lr_theta);
        let adam_phi = Adam::new(phi.n_params(), cfg.lr_phi);
        let fields = vec![scene.init_field.clone(); scene.directions.len()];

        Ok(Trainer {
            scene,
            cfg: cfg.clone(),
            partitions,
            best_theta: theta.clone(),
            best_phi: phi.clone(),
            theta,
            phi,
            adam_theta,
            adam_phi,
            fields,
            next_epoch: 1,
            best_validation: f64::INFINITY,
            best_epoch: 0,
            report: TrainReport {
                stage1: None,
                epochs: Vec::new(),
                best_epoch: 0,
                best_validation: f64::INFINITY,
                aborted: None,
                seed: cfg.seed,
            },
        })
    }

    /// Training-input/loss/validation audit: no loss or validation point may
    /// enter any replica's reconstruction input.
    pub fn audit_masks(&self) -> Result<()> {
        for per_shot in &self.partitions {
            for part in per_shot {
                part.check_invariants()?;
            }
        }
        Ok(())
    }

    pub fn partitions(&self) -> &[Vec<MaskPartition>] {
        &self.partitions
    }

    /// Stage 1: distill the initial field into the estimator.
    pub fn run_stage1(&mut self) -> Result<()> {
        if !self.cfg.field_updates {
            return Ok(());
        }
        let (theta, report) = fit_to_initial(
            &self.scene.init_field,
            &self.scene.ctx,
            &self.scene.directions,
            &self.theta,
            &self.scene.grid,
            self.cfg.stage1_steps,
            self.cfg.stage1_lr,
        )?;
        self.theta = theta;
        self.adam_theta = Adam::new(self.theta.n_params(), self.cfg.lr_theta);
        self.refresh_fields()?;
        if self.cfg.verbose {
            eprintln!(
                "stage 1: distilled init field, MSE {:.4e} -> {:.4e}",
                report.initial_mse, report.final_mse
            );
        }
        self.report.stage1 = Some(report);
        Ok(())
    }

    fn refresh_fields(&mut self) -> Result<()> {
        if !self.cfg.field_updates {
            return Ok(());
        }
        for (d, dir) in self.scene.directions.iter().enumerate() {
            self.fields[d] =
                predict_field(&self.scene.grid, &self.scene.ctx, dir, &self.theta)?;
        }
        Ok(())
    }

    fn replica_overrides(&self, d: usize, t: usize, shots: &[&KSpaceShot]) -> Vec<PointMask> {
        // map each shot of this polarity group back to its index in the
        // direction's shot list to find its partition
        shots
            .iter()
            .map(|s| {
                let idx = self.scene.shots[d]
                    .iter()
                    .position(|o| std::ptr::eq(o, *s))
                    .expect("shot belongs to the scene");
                self.partitions[d][idx].input[t].clone()
            })
            .collect()
    }

    fn replica_loss_sets(&self, d: usize, t: usize, shots: &[&KSpaceShot]) -> Vec<PointMask> {
        shots
            .iter()
            .map(|s| {
                let idx = self.scene.shots[d]
                    .iter()
                    .position(|o| std::ptr::eq(o, *s))
                    .expect("shot belongs to the scene");
                self.partitions[d][idx].loss[t].clone()
            })
            .collect()
    }

    /// One phi pass over all (direction, replica) pairs. In stage 3 the
    /// up/down consistency term joins the DC losses.
    fn phi_pass(&mut self, with_updown: bool, stats: &mut EpochLosses) -> Result<usize> {
        let mut steps = 0;
        for d in 0..self.scene.directions.len() {
            let (up, down) = split_by_polarity(&self.scene.shots[d])?;
            let field = self.fields[d].clone();
            for t in 0..self.cfg.t_replicas {
                let up_inputs = self.replica_overrides(d, t, &up);
                let down_inputs = self.replica_overrides(d, t, &down);
                let up_loss_sets = self.replica_loss_sets(d, t, &up);
                let down_loss_sets = self.replica_loss_sets(d, t, &down);
                for (inp, lss) in up_inputs
                    .iter()
                    .chain(&down_inputs)
                    .zip(up_loss_sets.iter().chain(&down_loss_sets))
                {
                    debug_assert!(!inp.intersects(lss), "loss points in the input path");
                }

                let mut tape = Tape::new();
                let f = tape.const_r(field.map.clone());
                let nets = self.phi.on_tape(&mut tape, true);
                let xu = reconstruct_tape(
                    &mut tape,
                    &up,
                    &self.scene.coils,
                    f,
                    &nets,
                    &self.cfg.unroll,
                    Some(&up_inputs),
                )?;
                let xd = reconstruct_tape(
                    &mut tape,
                    &down,
                    &self.scene.coils,
                    f,
                    &nets,
                    &self.cfg.unroll,
                    Some(&down_inputs),
                )?;
                let (dc_u, l2_u, l1_u) = dc_loss_tape(
                    &mut tape,
                    xu,
                    &up,
                    &self.scene.coils,
                    f,
                    &up_loss_sets,
                    &self.cfg.weights,
                )?;
                let (dc_d, l2_d, l1_d) = dc_loss_tape(
                    &mut tape,
                    xd,
                    &down,
                    &self.scene.coils,
                    f,
                    &down_loss_sets,
                    &self.cfg.weights,
                )?;
                let mut loss_node = tape.add_r(dc_u, dc_d);
                let mut ud_val = 0.0;
                if with_updown {
                    let ud = updown_consistency_loss_tape(&mut tape, xu, xd);
                    ud_val = tape.scalar_value(ud);
                    let udw = tape.scale_r(ud, self.cfg.weights.w_ud);
                    loss_node = tape.add_r(loss_node, udw);
                }
                let loss = tape.scalar_value(loss_node);
                if !loss.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite phi loss at direction {d}, replica {t}"
                    )));
                }
                stats.dc_l2 += 0.5 * (tape.scalar_value(l2_u) + tape.scalar_value(l2_d));
                stats.dc_l1 += 0.5 * (tape.scalar_value(l1_u) + tape.scalar_value(l1_d));
                stats.updown += ud_val;

                let grads = tape.backward(loss_node);
                let g = nets.collect_grads(&tape, &grads);
                let mut flat = self.phi.flatten();
                self.adam_phi.step(&mut flat, &g);
                self.phi.unflatten(&flat);
                steps += 1;
            }
        }
        Ok(steps)
    }

    /// One theta pass over all (direction, replica) pairs: reconstruct both
    /// polarities under the predicted field and descend the field loss.
    fn theta_pass(&mut self, stats: &mut EpochLosses) -> Result<usize> {
        let mut steps = 0;
        for d in 0..self.scene.directions.len() {
            let (up, down) = split_by_polarity(&self.scene.shots[d])?;
            let dir = self.scene.directions[d];
            for t in 0..self.cfg.t_replicas {
                let up_inputs = self.replica_overrides(d, t, &up);
                let down_inputs = self.replica_overrides(d, t, &down);

                let mut tape = Tape::new();
                let theta_nodes = self.theta.on_tape(&mut tape, true);
                let f = predict_field_tape(
                    &mut tape,
                    &self.scene.grid,
                    &self.scene.ctx,
                    &dir,
                    &theta_nodes,
                    &self.theta.cfg,
                );
                let nets = self.phi.on_tape(&mut tape, false);
                let xu = reconstruct_tape(
                    &mut tape,
                    &up,
                    &self.scene.coils,
                    f,
                    &nets,
                    &self.cfg.unroll,
                    Some(&up_inputs),
                )?;
                let xd = reconstruct_tape(
                    &mut tape,
                    &down,
                    &self.scene.coils,
                    f,
                    &nets,
                    &self.cfg.unroll,
                    Some(&down_inputs),
                )?;
                let loss_node = field_loss_tape(&mut tape, xu, xd, &self.cfg.weights);
                let loss = tape.scalar_value(loss_node);
                if !loss.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite theta loss at direction {d}, replica {t}"
                    )));
                }
                stats.field += loss;

                let grads = tape.backward(loss_node);
                let g = theta_nodes.collect_grads(&tape, &grads);
                let mut flat = self.theta.flatten();
                self.adam_theta.step(&mut flat, &g);
                self.theta.unflatten(&flat);
                steps += 1;
            }
        }
        self.refresh_fields()?;
        Ok(steps)
    }

    /// Validation DC loss on the held-out set, over all directions and both
    /// polarities, reconstructing from everything acquired except the
    /// validation points.
    pub fn validation_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for d in 0..self.scene.directions.len() {
            let (up, down) = split_by_polarity(&self.scene.shots[d])?;
            let field = &self.fields[d];
            for shots in [&up, &down] {
                let inputs: Vec<PointMask> = shots
                    .iter()
                    .map(|s| {
                        let idx = self.scene.shots[d]
                            .iter()
                            .position(|o| std::ptr::eq(o, *s))
                            .unwrap();
                        self.partitions[d][idx].validation_input()
                    })
                    .collect();
                let val_sets: Vec<PointMask> = shots
                    .iter()
                    .map(|s| {
                        let idx = self.scene.shots[d]
                            .iter()
                            .position(|o| std::ptr::eq(o, *s))
                            .unwrap();
                        self.partitions[d][idx].validation.clone()
                    })
                    .collect();
                let mut tape = Tape::new();
                let f = tape.const_r(field.map.clone());
                let nets = self.phi.on_tape(&mut tape, false);
                let x = reconstruct_tape(
                    &mut tape,
                    shots,
                    &self.scene.coils,
                    f,
                    &nets,
                    &self.cfg.unroll,
                    Some(&inputs),
                )?;
                let (dc, _, _) = dc_loss_tape(
                    &mut tape,
                    x,
                    shots,
                    &self.scene.coils,
                    f,
                    &val_sets,
                    &self.cfg.weights,
                )?;
                total += tape.scalar_value(dc);
            }
        }
        Ok(total)
    }

    /// Run one epoch: epoch 1 is the phi-only stage; later epochs alternate
    /// a theta pass and a phi pass.
    pub fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.next_epoch;
        let stage: u8 = if epoch == 1 { 2 } else { 3 };
        let mut stats = EpochLosses {
            epoch,
            stage,
            dc_l2: 0.0,
            dc_l1: 0.0,
            updown: 0.0,
            field: 0.0,
            validation_dc: 0.0,
            best_validation_so_far: 0.0,
        };

        let mut theta_steps = 0;
        if stage == 3 && self.cfg.field_updates {
            theta_steps = self.theta_pass(&mut stats)?;
        }
        let phi_steps = self.phi_pass(stage == 3, &mut stats)?;

        if phi_steps > 0 {
            stats.dc_l2 /= phi_steps as f64;
            stats.dc_l1 /= phi_steps as f64;
            stats.updown /= phi_steps as f64;
        }
        if theta_steps > 0 {
            stats.field /= theta_steps as f64;
        }

        let val = self.validation_loss()?;
        stats.validation_dc = val;
        if val < self.best_validation {
            self.best_validation = val;
            self.best_epoch = epoch;
            self.best_theta = self.theta.clone();
            self.best_phi = self.phi.clone();
        }
        stats.best_validation_so_far = self.best_validation;
        if self.cfg.verbose {
            eprintln!(
                "epoch {epoch} (stage {stage}): dc_l2 {:.4e} dc_l1 {:.4e} ud {:.4e} field {:.4e} val {:.4e}",
                stats.dc_l2, stats.dc_l1, stats.updown, stats.field, val
            );
        }
        self.report.epochs.push(stats);
        self.report.best_epoch = self.best_epoch;
        self.report.best_validation = self.best_validation;
        self.next_epoch += 1;
        Ok(())
    }

    pub fn epochs_done(&self) -> usize {
        self.next_epoch - 1
    }

    pub fn snapshot(&self) -> TrainState {
        TrainState {
            next_epoch: self.next_epoch,
            theta_flat: self.theta.flatten(),
            phi_flat: self.phi.flatten(),
            adam_theta: self.adam_theta.clone(),
            adam_phi: self.adam_phi.clone(),
            best_validation: self.best_validation,
            best_epoch: self.best_epoch,
            best_theta_flat: self.best_theta.flatten(),
            best_phi_flat: self.best_phi.flatten(),
            report: self.report.clone(),
        }
    }

    pub fn restore(scene: &'a TrainScene, cfg: &TrainConfig, state: &TrainState) -> Result<Self> {
        let mut t = Trainer::new(scene, cfg)?;
        t.next_epoch = state.next_epoch;
        t.theta.unflatten(&state.theta_flat);
        t.phi.unflatten(&state.phi_flat);
        t.adam_theta = state.adam_theta.clone();
        t.adam_phi = state.adam_phi.clone();
        t.best_validation = state.best_validation;
        t.best_epoch = state.best_epoch;
        t.best_theta.unflatten(&state.best_theta_flat);
        t.best_phi.unflatten(&state.best_phi_flat);
        t.report = state.report.clone();
        t.refresh_fields()?;
        Ok(t)
    }

    /// Final output at the best-validation checkpoint.
    pub fn finish(mut self) -> Result<TrainOutput> {
        if self.best_epoch == 0 {
            self.best_theta = self.theta.clone();
            self.best_phi = self.phi.clone();
        }
        self.theta = self.best_theta.clone();
        self.refresh_fields()?;
        Ok(TrainOutput {
            theta: self.best_theta,
            phi: self.best_phi,
            report: self.report,
            fields: self.fields,
        })
    }
}

/// The full three-stage schedule. A non-finite loss mid-run aborts the
/// schedule but still returns the last good (best-validation) checkpoint,
/// with the abort reason recorded in the report.
pub fn train(scene: &TrainScene, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(scene, cfg)?;
    trainer.audit_masks()?;
    trainer.run_stage1()?;
    for _ in 0..cfg.epochs {
        if let Err(e) = trainer.run_epoch() {
            match e {
                Error::Numerical(msg) => {
                    trainer.report.aborted = Some(msg);
                    break;
                }
                other => return Err(other),
            }
        }
    }
    trainer.finish()
}
