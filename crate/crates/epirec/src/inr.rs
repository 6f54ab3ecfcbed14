//! Coordinate-network field estimator: multi-scale Fourier-embedded spatial
//! coordinates, the diffusion gradient vector and encoded latent features
//! feed a small MLP that predicts the off-resonance field per voxel.
//!
//! The output head is `scale * tanh(u / scale)` (default scale 100 Hz):
//! identity-like near zero, physically bounded far out.

use serde::{Deserialize, Serialize};

use crate::ad::{Grads, Id, Tape};
use crate::error::{Error, Result};
use crate::nets::{encoder_input, Cnn, CnnNodes, EncoderConfig};
use crate::numerics::{Grid2D, RandomSource};
use crate::optim::Adam;
use crate::phantom::DiffusionDirection;
use crate::epi::FieldMap;
use crate::tensor::RTensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FourierEmbedConfig {
    pub n_scales: usize,
}

impl Default for FourierEmbedConfig {
    fn default() -> Self {
        FourierEmbedConfig { n_scales: 6 }
    }
}

impl FourierEmbedConfig {
    pub fn dim(&self) -> usize {
        3 * 2 * self.n_scales
    }
}

/// Embed one coordinate triple: per axis and scale `s`,
/// `[sin(2*pi*2^s*c), cos(2*pi*2^s*c)]`; inputs clamped to [-1, 1].
pub fn fourier_embed(coords: [f64; 3], cfg: &FourierEmbedConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim());
    for &c in &coords {
        let c = c.clamp(-1.0, 1.0);
        for s in 0..cfg.n_scales {
            let ang = 2.0 * std::f64::consts::PI * (1u64 << s) as f64 * c;
            out.push(ang.sin());
            out.push(ang.cos());
        }
    }
    out
}

/// Embedding rows for every voxel of a grid at slice coordinate `z`.
pub fn embed_grid(grid: &Grid2D, slice_z: f64, cfg: &FourierEmbedConfig) -> RTensor {
    let n = grid.numel();
    let mut data = Vec::with_capacity(n * cfg.dim());
    for i in 0..grid.ny {
        for j in 0..grid.nx {
            data.extend(fourier_embed(
                [grid.norm_x(j), grid.norm_y(i), slice_z],
                cfg,
            ));
        }
    }
    RTensor::from_vec(&[n, cfg.dim()], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub w: RTensor,
    pub b: RTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    /// `n_layers` linear maps: in -> width, width -> width ..., width -> 1.
    /// The final layer starts at zero so an untrained network predicts a
    /// zero field.
    pub fn init(rng: &mut RandomSource, n_layers: usize, in_dim: usize, width: usize) -> Mlp {
        assert!(n_layers >= 2);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let di = if l == 0 { in_dim } else { width };
            let dout = if l == n_layers - 1 { 1 } else { width };
            let w = if l == n_layers - 1 {
                RTensor::zeros(&[di, dout])
            } else {
                let std = (2.0 / di as f64).sqrt();
                RTensor::from_vec(&[di, dout], gaussian_vec(di * dout, rng, std))
            };
            layers.push(LinearLayer {
                w,
                b: RTensor::zeros(&[dout]),
            });
        }
        Mlp { layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b.data);
        }
    }

    pub fn unflatten_from(&mut self, flat: &[f64], cursor: &mut usize) {
        for l in &mut self.layers {
            let wn = l.w.len();
            l.w.data.copy_from_slice(&flat[*cursor..*cursor + wn]);
            *cursor += wn;
            let bn = l.b.len();
            l.b.data.copy_from_slice(&flat[*cursor..*cursor + bn]);
            *cursor += bn;
        }
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> MlpNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.leaf_r(l.w.clone()), tape.leaf_r(l.b.clone()))
                } else {
                    (tape.const_r(l.w.clone()), tape.const_r(l.b.clone()))
                }
            })
            .collect();
        MlpNodes { layers }
    }
}

fn gaussian_vec(n: usize, rng: &mut RandomSource, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

#[derive(Clone, Debug)]
pub struct MlpNodes {
    pub layers: Vec<(Id, Id)>,
}

impl MlpNodes {
    pub fn apply(&self, tape: &mut Tape, x: Id) -> Id {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, *w, *b);
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn collect_grads(&self, tape: &Tape, grads: &Grads, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            match grads.r(*w) {
                Some(g) => out.extend_from_slice(&g.data),
                None => out.extend(std::iter::repeat(0.0).take(tape.value_r(*w).len())),
            }
            match grads.r(*b) {
                Some(g) => out.extend_from_slice(&g.data),
                None => out.extend(std::iter::repeat(0.0).take(tape.value_r(*b).len())),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct InrConfig {
    pub embed: FourierEmbedConfig,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub encoder: EncoderConfig,
    pub field_scale_hz: f64,
}

impl InrConfig {
    /// 5-layer / 512-wide MLP, 32-feature encoder.
    pub fn paper() -> Self {
        InrConfig {
            embed: FourierEmbedConfig::default(),
            mlp_layers: 5,
            mlp_width: 512,
            encoder: EncoderConfig::paper(),
            field_scale_hz: 100.0,
        }
    }

    /// 5-layer / 64-wide MLP, 16-feature encoder.
    pub fn desk() -> Self {
        InrConfig {
            embed: FourierEmbedConfig::default(),
            mlp_layers: 5,
            mlp_width: 64,
            encoder: EncoderConfig::desk(),
            field_scale_hz: 100.0,
        }
    }

    pub fn mlp_in_dim(&self) -> usize {
        self.embed.dim() + 3 + self.encoder.features
    }
}

/// The field estimator's trainable parameters: coordinate MLP plus the
/// feature encoder it conditions on.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub encoder: Cnn,
    pub mlp: Mlp,
    pub cfg: InrConfig,
}

impl FieldParams {
    pub fn init(rng: &mut RandomSource, cfg: &InrConfig) -> FieldParams {
        let encoder = Cnn::init(
            rng,
            cfg.encoder.n_layers,
            3,
            cfg.encoder.features,
            cfg.encoder.features,
            false,
        );
        let mlp = Mlp::init(rng, cfg.mlp_layers, cfg.mlp_in_dim(), cfg.mlp_width);
        FieldParams {
            encoder,
            mlp,
            cfg: *cfg,
        }
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.mlp.n_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.encoder.flatten_into(&mut out);
        self.mlp.flatten_into(&mut out);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut cursor = 0;
        self.encoder.unflatten_from(flat, &mut cursor);
        self.mlp.unflatten_from(flat, &mut cursor);
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> FieldNodes {
        FieldNodes {
            encoder: self.encoder.on_tape(tape, trainable),
            mlp: self.mlp.on_tape(tape, trainable),
        }
    }
}

pub struct FieldNodes {
    pub encoder: CnnNodes,
    pub mlp: MlpNodes,
}

impl FieldNodes {
    pub fn collect_grads(&self, tape: &Tape, grads: &Grads) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.collect_grads(tape, grads, &mut out);
        self.mlp.collect_grads(tape, grads, &mut out);
        out
    }
}

/// Conditioning context for the field estimator: preliminary per-polarity
/// magnitudes and the initial field, all on the reconstruction grid.
#[derive(Clone, Debug)]
pub struct FieldContext {
    pub up_mag: RTensor,
    pub down_mag: RTensor,
    pub init_field: RTensor,
    pub slice_z: f64,
}

impl FieldContext {
    pub fn encoder_planes(&self) -> RTensor {
        encoder_input(&self.up_mag, &self.down_mag, &self.init_field)
    }
}

/// Record the full field prediction on the tape: encoder features, embedded
/// coordinates and the direction vector through the MLP and bounded head.
/// Returns the predicted field `[ny, nx]` in Hz.
pub fn predict_field_tape(
    tape: &mut Tape,
    grid: &Grid2D,
    ctx: &FieldContext,
    g: &DiffusionDirection,
    nodes: &FieldNodes,
    cfg: &InrConfig,
) -> Id {
    let n = grid.numel();
    let planes = tape.const_r(ctx.encoder_planes());
    let feats = nodes.encoder.apply(tape, planes);
    let feat_rows = tape.chw_to_rows(feats);

    let embed = tape.const_r(embed_grid(grid, ctx.slice_z, &cfg.embed));
    let mut g_rows = Vec::with_capacity(n * 3);
    for _ in 0..n {
        g_rows.extend_from_slice(&g.g);
    }
    let g_const = tape.const_r(RTensor::from_vec(&[n, 3], g_rows));

    let input = tape.concat_cols(&[embed, g_const, feat_rows]);
    let raw = nodes.mlp.apply(tape, input);
    let img = tape.rows_to_image(raw, grid.ny, grid.nx);
    let scaled = tape.scale_r(img, 1.0 / cfg.field_scale_hz);
    let bounded = tape.tanh(scaled);
    tape.scale_r(bounded, cfg.field_scale_hz)
}

/// Plain field prediction.
pub fn predict_field(
    grid: &Grid2D,
    ctx: &FieldContext,
    g: &DiffusionDirection,
    params: &FieldParams,
) -> Result<FieldMap> {
    if ctx.init_field.shape != [grid.ny, grid.nx] {
        return Err(Error::validation("context does not match grid"));
    }
    let mut tape = Tape::new();
    let nodes = params.on_tape(&mut tape, false);
    let out = predict_field_tape(&mut tape, grid, ctx, g, &nodes, &params.cfg);
    FieldMap::new(tape.value_r(out).clone())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub mse_history: Vec<f64>,
}

/// Stage-1 distillation: fit the estimator (MLP and encoder jointly) to the
/// initial field by Adam on the mean squared error, cycling through the
/// diffusion directions. Aborts if the loss exceeds 10x its best value.
pub fn fit_to_initial(
    init_field: &FieldMap,
    ctx: &FieldContext,
    dirs: &[DiffusionDirection],
    params0: &FieldParams,
    grid: &Grid2D,
    n_steps: usize,
    lr: f64,
) -> Result<(FieldParams, FitReport)> {
    init_field.map.check_finite("initial field")?;
    if dirs.is_empty() {
        return Err(Error::validation("need at least one direction"));
    }
    let mut params = params0.clone();
    if n_steps == 0 {
        return Ok((
            params,
            FitReport {
                steps: 0,
                initial_mse: f64::NAN,
                final_mse: f64::NAN,
                mse_history: vec![],
            },
        ));
    }
    let target = std::rc::Rc::new(init_field.map.clone());
    let n = grid.numel() as f64;
    let mut flat = params.flatten();
    let mut opt = Adam::new(flat.len(), lr);
    let mut history = Vec::with_capacity(n_steps);
    // divergence is judged per direction: across the cycle the losses are
    // not comparable while the conditioning trains
    let mut best = vec![f64::INFINITY; dirs.len()];

    for step in 0..n_steps {
        let d_idx = step % dirs.len();
        let dir = &dirs[d_idx];
        let mut tape = Tape::new();
        let nodes = params.on_tape(&mut tape, true);
        let pred = predict_field_tape(&mut tape, grid, ctx, dir, &nodes, &params.cfg);
        let diff = tape.sub_const_r(pred, target.clone());
        let sq = tape.sq_norm_r(diff);
        let loss_node = tape.scale_r(sq, 1.0 / n);
        let loss = tape.scalar_value(loss_node);
        if !loss.is_finite() {
            return Err(Error::numerical("field distillation produced NaN loss"));
        }
        best[d_idx] = best[d_idx].min(loss);
        let diverged =
            loss > 10.0 * best[d_idx] + 1e-6 && !history.is_empty() && loss > history[0];
        if diverged && step > 10 * dirs.len() {
            return Err(Error::numerical(format!(
                "field distillation diverged at step {step}: loss {loss:.3e} vs best {:.3e}",
                best[d_idx]
            )));
        }
        history.push(loss);
        let grads = tape.backward(loss_node);
        let g = nodes.collect_grads(&tape, &grads);
        // linear decay to 10% of the base rate settles the final iterate
        opt.lr = lr * (1.0 - 0.9 * step as f64 / n_steps as f64);
        opt.step(&mut flat, &g);
        params.unflatten(&flat);
    }

    let report = FitReport {
        steps: n_steps,
        initial_mse: history[0],
        final_mse: *history.last().unwrap(),
        mse_history: history,
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::fd::{finite_diff_grad, grad_rel_err};
    use crate::numerics::{grad2, seeded_rng};
    use crate::phantom::make_field;

    #[test]
    fn embed_basics() {
        let cfg = FourierEmbedConfig { n_scales: 6 };
        assert_eq!(cfg.dim(), 36);
        let e0 = fourier_embed([0.0, 0.0, 0.0], &cfg);
        for (i, v) in e0.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0, "sin term {i}");
            } else {
                assert_eq!(*v, 1.0, "cos term {i}");
            }
        }
        // coords (0.25, 0, 0), s=0 -> first pair (sin(pi/2), cos(pi/2)) = (1, 0)
        let e = fourier_embed([0.25, 0.0, 0.0], &cfg);
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!(e[1].abs() < 1e-12);
        // clamping
        let a = fourier_embed([2.0, 0.0, 0.0], &cfg);
        let b = fourier_embed([1.0, 0.0, 0.0], &cfg);
        assert_eq!(a, b);
    }

    fn tiny_ctx(grid: &Grid2D) -> FieldContext {
        let n = grid.numel();
        FieldContext {
            up_mag: RTensor::from_vec(
                &[grid.ny, grid.nx],
                (0..n).map(|i| (i % 7) as f64 / 7.0).collect(),
            ),
            down_mag: RTensor::from_vec(
                &[grid.ny, grid.nx],
                (0..n).map(|i| (i % 5) as f64 / 5.0).collect(),
            ),
            init_field: RTensor::zeros(&[grid.ny, grid.nx]),
            slice_z: 0.0,
        }
    }

    fn tiny_cfg(width: usize) -> InrConfig {
        InrConfig {
            embed: FourierEmbedConfig { n_scales: 3 },
            mlp_layers: 3,
            mlp_width: width,
            encoder: EncoderConfig {
                n_layers: 2,
                features: 4,
            },
            field_scale_hz: 100.0,
        }
    }

    #[test]
    fn zeroed_head_gives_constant_field() {
        let mut rng = seeded_rng(61);
        let grid = Grid2D::new(8, 8, 220.0, 220.0).unwrap();
        let cfg = tiny_cfg(8);
        let mut params = FieldParams::init(&mut rng, &cfg);
        // final layer weights zero (init default), bias b
        let b_hz = 0.5;
        let last = params.mlp.layers.len() - 1;
        params.mlp.layers[last].b.data[0] = b_hz;
        let ctx = tiny_ctx(&grid);
        let f = predict_field(&grid, &ctx, &DiffusionDirection::b0(), &params).unwrap();
        let first = f.map.data[0];
        assert!(f.map.data.iter().all(|&v| v == first), "constant map");
        // bounded head is identity-like near zero: 100*tanh(b/100) ~ b
        assert!((first - b_hz).abs() < 1e-4);
    }

    #[test]
    fn deterministic_and_direction_sensitive() {
        let mut rng = seeded_rng(62);
        let grid = Grid2D::new(8, 8, 220.0, 220.0).unwrap();
        let cfg = tiny_cfg(8);
        let mut params = FieldParams::init(&mut rng, &cfg);
        // randomize the head so direction conditioning is visible
        let last = params.mlp.layers.len() - 1;
        params.mlp.layers[last].w = RTensor::from_vec(
            &params.mlp.layers[last].w.shape.clone(),
            (0..params.mlp.layers[last].w.len())
                .map(|_| rng.normal())
                .collect(),
        );
        let ctx = tiny_ctx(&grid);
        let g1 = DiffusionDirection::new([1.0, 0.0, 0.0], 1000.0).unwrap();
        let g2 = DiffusionDirection::new([0.0, 1.0, 0.0], 1000.0).unwrap();
        let a = predict_field(&grid, &ctx, &g1, &params).unwrap();
        let b = predict_field(&grid, &ctx, &g1, &params).unwrap();
        let c = predict_field(&grid, &ctx, &g2, &params).unwrap();
        assert_eq!(a.map, b.map, "same inputs, same map");
        assert_ne!(a.map, c.map, "direction must condition the output");
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(63);
        let grid = Grid2D::new(8, 8, 220.0, 220.0).unwrap();
        let cfg = tiny_cfg(8);
        let mut params = FieldParams::init(&mut rng, &cfg);
        let last = params.mlp.layers.len() - 1;
        params.mlp.layers[last].w = RTensor::from_vec(
            &params.mlp.layers[last].w.shape.clone(),
            (0..params.mlp.layers[last].w.len())
                .map(|_| 0.3 * rng.normal())
                .collect(),
        );
        let ctx = tiny_ctx(&grid);
        let dir = DiffusionDirection::b0();
        let target = std::rc::Rc::new(RTensor::from_vec(
            &[8, 8],
            (0..64).map(|_| 5.0 * rng.normal()).collect(),
        ));

        let base = params.clone();
        let eval = |flat: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut p = base.clone();
            p.unflatten(flat);
            let mut tape = Tape::new();
            let nodes = p.on_tape(&mut tape, true);
            let pred = predict_field_tape(&mut tape, &grid, &ctx, &dir, &nodes, &p.cfg);
            let d = tape.sub_const_r(pred, target.clone());
            let loss_node = tape.sq_norm_r(d);
            let loss = tape.scalar_value(loss_node);
            let grads = tape.backward(loss_node);
            (loss, Some(nodes.collect_grads(&tape, &grads)))
        };
        let flat0 = base.flatten();
        let (_, g) = eval(&flat0);
        let numeric = finite_diff_grad(|p| eval(p).0, &flat0, 1e-5);
        let err = grad_rel_err(&g.unwrap(), &numeric);
        assert!(err < 1e-4, "INR gradient mismatch: {err}");
    }

    #[test]
    fn fit_constant_field() {
        let mut rng = seeded_rng(64);
        let grid = Grid2D::new(16, 16, 220.0, 220.0).unwrap();
        let cfg = tiny_cfg(16);
        let params0 = FieldParams::init(&mut rng, &cfg);
        let c = 20.0;
        let init = FieldMap::constant(16, 16, c);
        let ctx = FieldContext {
            up_mag: RTensor::full(&[16, 16], 0.5),
            down_mag: RTensor::full(&[16, 16], 0.5),
            init_field: init.map.clone(),
            slice_z: 0.0,
        };
        let dirs = vec![DiffusionDirection::b0()];
        let (fitted, report) =
            fit_to_initial(&init, &ctx, &dirs, &params0, &grid, 500, 3e-2).unwrap();
        assert_eq!(report.steps, 500);
        let f = predict_field(&grid, &ctx, &dirs[0], &fitted).unwrap();
        let tol = c.abs() * 0.01 + 0.5;
        for &v in &f.map.data {
            assert!((v - c).abs() < tol, "fitted {v} vs target {c}");
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let mut rng = seeded_rng(65);
        let grid = Grid2D::new(8, 8, 220.0, 220.0).unwrap();
        let cfg = tiny_cfg(8);
        let params0 = FieldParams::init(&mut rng, &cfg);
        let init = FieldMap::zeros(8, 8);
        let ctx = tiny_ctx(&grid);
        let (fitted, report) = fit_to_initial(
            &init,
            &ctx,
            &[DiffusionDirection::b0()],
            &params0,
            &grid,
            0,
            1e-3,
        )
        .unwrap();
        assert_eq!(fitted, params0);
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn fit_smooth_field_under_five_percent_rmse_and_smooth_output() {
        let mut rng = seeded_rng(66);
        let grid = Grid2D::new(16, 16, 220.0, 220.0).unwrap();
        let cfg = tiny_cfg(24);
        let params0 = FieldParams::init(&mut rng, &cfg);
        let field = make_field(&grid, 40.0, &[]).unwrap();
        let ctx = FieldContext {
            up_mag: RTensor::full(&[16, 16], 0.5),
            down_mag: RTensor::full(&[16, 16], 0.4),
            init_field: field.map.clone(),
            slice_z: 0.0,
        };
        let dirs = DiffusionDirection::six_scheme(1000.0);
        let (fitted, _) =
            fit_to_initial(&field, &ctx, &dirs, &params0, &grid, 1500, 1e-2).unwrap();
        let range = {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in &field.map.data {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            hi - lo
        };
        let pred = predict_field(&grid, &ctx, &dirs[0], &fitted).unwrap();
        let rmse = (pred
            .map
            .sub(&field.map)
            .data
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / grid.numel() as f64)
            .sqrt();
        assert!(
            rmse < 0.05 * range,
            "fit RMSE {rmse:.3} vs 5% of range {:.3}",
            0.05 * range
        );

        // post-fit smoothness: no single-voxel gradient outliers beyond 5x
        // the 99th-percentile gradient magnitude
        let (gy, gx) = grad2(&pred.map);
        let mut mags: Vec<f64> = gy
            .data
            .iter()
            .zip(&gx.data)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p99 = mags[(0.99 * (mags.len() as f64 - 1.0)) as usize];
        let max = mags.last().copied().unwrap();
        assert!(
            max <= 5.0 * p99.max(1e-9),
            "gradient outlier: max {max:.4} vs p99 {p99:.4}"
        );
    }

    #[test]
    fn voxel_order_invariance() {
        // the assembled map is a pointwise function of the inputs; permuting
        // evaluation order must reproduce identical values
        let mut rng = seeded_rng(67);
        let grid = Grid2D::new(8, 8, 220.0, 220.0).unwrap();
        let cfg = tiny_cfg(8);
        let mut params = FieldParams::init(&mut rng, &cfg);
        let last = params.mlp.layers.len() - 1;
        params.mlp.layers[last].w = RTensor::from_vec(
            &params.mlp.layers[last].w.shape.clone(),
            (0..params.mlp.layers[last].w.len())
                .map(|_| rng.normal())
                .collect(),
        );
        let ctx = tiny_ctx(&grid);
        let dir = DiffusionDirection::b0();
        let full = predict_field(&grid, &ctx, &dir, &params).unwrap();

        // evaluate voxels one at a time through the same network
        let mut tape = Tape::new();
        let nodes = params.on_tape(&mut tape, false);
        let planes = tape.const_r(ctx.encoder_planes());
        let feats_id = nodes.encoder.apply(&mut tape, planes);
        let feats = tape.value_r(feats_id).clone();
        let fdim = feats.shape[0];
        let mut order: Vec<usize> = (0..grid.numel()).collect();
        order.reverse();
        for &vox in order.iter().take(7) {
            let (i, j) = (vox / grid.nx, vox % grid.nx);
            let mut row = fourier_embed(
                [grid.norm_x(j), grid.norm_y(i), ctx.slice_z],
                &cfg.embed,
            );
            row.extend_from_slice(&dir.g);
            for c in 0..fdim {
                row.push(feats.data[c * grid.numel() + vox]);
            }
            let x = tape.const_r(RTensor::from_vec(&[1, row.len()], row));
            let raw = nodes.mlp.apply(&mut tape, x);
            let v = tape.value_r(raw).data[0];
            let bounded = 100.0 * (v / 100.0).tanh();
            assert_eq!(bounded, full.map.data[vox]);
        }
    }
}
