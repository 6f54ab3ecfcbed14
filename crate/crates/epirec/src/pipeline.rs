//! The pipeline commands behind the CLI: simulate a dataset bundle,
//! initialize the field map, train, reconstruct, evaluate and compare.
//! Every command is a pure function of (bundle bytes, config, seed).

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bundle::{load_checkpoint, save_checkpoint, Bundle, PhysicsMeta};
use crate::config::RunConfig;
use crate::epi::{
    EpiTiming, FieldMap, KSpaceShot, Polarity, PointMask, SamplingMask, SensitivityMaps,
};
use crate::error::{Error, Result};
use crate::fieldinit::{
    displacement_to_field, estimate_displacement, jacobian_correct, sense_recon,
    DisplacementConfig, DisplacementMap,
};
use crate::inr::{predict_field, FieldContext};
use crate::metrics::{
    evaluate_images, field_rmse, real_value_combine, support_mask, MetricSet,
};
use crate::numerics::{Grid2D, RandomSource};
use crate::phantom::{
    make_coils, make_field, make_phantom, make_phantom_magnitude, simulate_acquisition,
    DiffusionDirection, PhantomSpec, ShotPhase,
};
use crate::tensor::{CTensor, RTensor};
use crate::unrolled::{reconstruct, split_by_polarity};
use crate::viz::{save_magnitude_png, save_signed_png};
use crate::zsssl::{train, TrainScene};

fn polarity_tag(p: Polarity) -> &'static str {
    match p {
        Polarity::Up => "up",
        Polarity::Down => "down",
    }
}

/// Simulate a full blip-up/down multi-direction acquisition and write the
/// dataset bundle.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let grid = Grid2D::square(cfg.grid, cfg.fov_mm)?;
    let spec = PhantomSpec::default_scene(cfg.grid, cfg.grid, cfg.fov_mm, cfg.noise_sigma);
    let coils = make_coils(&grid, cfg.ncoils)?;
    let field = make_field(&grid, cfg.field_amplitude_hz, &cfg.field_blobs)?;

    let mut directions = Vec::new();
    if cfg.include_b0 {
        directions.push(DiffusionDirection::b0());
    }
    directions.extend(DiffusionDirection::scheme(cfg.n_directions, cfg.b_value));

    let physics = PhysicsMeta {
        grid: [cfg.grid, cfg.grid],
        fov_mm: [cfg.fov_mm, cfg.fov_mm],
        esp_s: cfg.esp_s,
        echo_center_line: cfg.grid / 2,
        accel: cfg.accel,
        pf_fraction: cfg.pf_fraction,
        shots_per_polarity: cfg.shots_per_polarity,
        ncoils: cfg.ncoils,
        noise_sigma: cfg.noise_sigma,
        field_amplitude_hz: cfg.field_amplitude_hz,
        b_value: cfg.b_value,
        slice_z: 0.0,
    };

    let root = RandomSource::from_seed(cfg.seed);
    let mut phases: Vec<Vec<[f64; 6]>> = Vec::new();
    let mut bundle = Bundle::create(
        out,
        physics,
        directions.clone(),
        Vec::new(),
        cfg.hash(),
        cfg.seed,
    )?;

    for (d, dir) in directions.iter().enumerate() {
        let mut dir_phases = Vec::new();
        for pol in [Polarity::Up, Polarity::Down] {
            for s in 0..cfg.shots_per_polarity {
                let tag = polarity_tag(pol);
                let mut phase_rng = root.derive(&format!("shotphase/d{d}/{tag}/s{s}"));
                let phase = ShotPhase::random(&mut phase_rng, cfg.shot_phase_max_rad);
                dir_phases.push(phase.coeffs);
                let obj = make_phantom(&spec, dir, &phase)?;
                let timing = EpiTiming::new(cfg.esp_s, pol, cfg.grid / 2, cfg.grid)?;
                let mask =
                    SamplingMask::interleaved(cfg.grid, cfg.grid, cfg.accel, cfg.pf_fraction, s)?;
                let mut noise_rng = root.derive(&format!("noise/d{d}/{tag}/s{s}"));
                let shots = simulate_acquisition(
                    &[obj],
                    &coils,
                    &field,
                    &[timing],
                    &[mask.clone()],
                    cfg.noise_sigma,
                    &mut noise_rng,
                )?;
                bundle.write_c(&format!("kspace/d{d}/{tag}/s{s}"), &shots[0].data)?;
                bundle.write_mask(
                    &format!("mask/d{d}/{tag}/s{s}"),
                    &mask.points.keep,
                    &[cfg.grid, cfg.grid],
                )?;
            }
        }
        phases.push(dir_phases);
        let mag = make_phantom_magnitude(&spec, dir)?;
        bundle.write_r(&format!("truth/mag/d{d}"), &mag)?;
    }

    bundle.write_c("coils", &coils.maps)?;
    bundle.write_r("truth/field", &field.map)?;
    bundle.manifest.shot_phase_coeffs = phases;
    bundle.note(format!("simulate: preset {} seed {}", cfg.preset, cfg.seed));
    bundle.save_manifest()?;
    Ok(())
}

/// A bundle loaded back into memory.
pub struct LoadedScene {
    pub grid: Grid2D,
    pub physics: PhysicsMeta,
    pub coils: SensitivityMaps,
    pub directions: Vec<DiffusionDirection>,
    pub shots: Vec<Vec<KSpaceShot>>,
    pub truth_mags: Option<Vec<RTensor>>,
    pub truth_field: Option<FieldMap>,
    pub init_field: Option<FieldMap>,
    pub ctx: Option<FieldContext>,
}

pub fn load_scene(bundle: &Bundle) -> Result<LoadedScene> {
    bundle.verify()?;
    let p = &bundle.manifest.physics;
    let grid = Grid2D::new(p.grid[0], p.grid[1], p.fov_mm[0], p.fov_mm[1])?;
    let coils = SensitivityMaps::new(bundle.read_c("coils")?)?;
    let directions = bundle.manifest.directions.clone();

    let mut shots = Vec::with_capacity(directions.len());
    for d in 0..directions.len() {
        let mut per_dir = Vec::new();
        for pol in [Polarity::Up, Polarity::Down] {
            for s in 0..p.shots_per_polarity {
                let tag = polarity_tag(pol);
                let data = bundle.read_c(&format!("kspace/d{d}/{tag}/s{s}"))?;
                let keep = bundle.read_mask(&format!("mask/d{d}/{tag}/s{s}"))?;
                let mask = SamplingMask {
                    points: PointMask {
                        ny: p.grid[0],
                        nx: p.grid[1],
                        keep,
                    },
                    accel: p.accel,
                    pf_fraction: p.pf_fraction,
                    shot_index: s,
                };
                let timing = EpiTiming::new(p.esp_s, pol, p.echo_center_line, p.grid[0])?;
                per_dir.push(KSpaceShot { data, mask, timing });
            }
        }
        shots.push(per_dir);
    }

    let truth_mags = if bundle.has("truth/mag/d0") {
        let mut v = Vec::new();
        for d in 0..directions.len() {
            v.push(bundle.read_r(&format!("truth/mag/d{d}"))?);
        }
        Some(v)
    } else {
        None
    };
    let truth_field = if bundle.has("truth/field") {
        Some(FieldMap::new(bundle.read_r("truth/field")?)?)
    } else {
        None
    };
    let init_field = if bundle.has("init/field") {
        Some(FieldMap::new(bundle.read_r("init/field")?)?)
    } else {
        None
    };
    let ctx = if bundle.has("init/up_mag") && init_field.is_some() {
        Some(FieldContext {
            up_mag: bundle.read_r("init/up_mag")?,
            down_mag: bundle.read_r("init/down_mag")?,
            init_field: init_field.as_ref().unwrap().map.clone(),
            slice_z: p.slice_z,
        })
    } else {
        None
    };

    Ok(LoadedScene {
        grid,
        physics: p.clone(),
        coils,
        directions,
        shots,
        truth_mags,
        truth_field,
        init_field,
        ctx,
    })
}

/// Preliminary per-polarity magnitudes from a zero-field CG-SENSE solve of
/// the first direction (the b=0 scan when present).
fn sense_context_images(scene: &LoadedScene) -> Result<(RTensor, RTensor)> {
    let (up, down) = split_by_polarity(&scene.shots[0])?;
    let up_img = sense_recon(&up, &scene.coils, 30, 1e-4)?;
    let down_img = sense_recon(&down, &scene.coils, 30, 1e-4)?;
    Ok((up_img.magnitude(), down_img.magnitude()))
}

/// Estimate the initial field from the blip-up/down pair and write it into
/// the bundle. Estimation failure falls back to a zero field with a warning
/// recorded in the provenance.
pub fn cmd_init_field(bundle_dir: &Path) -> Result<()> {
    let mut bundle = Bundle::open(bundle_dir)?;
    let scene = load_scene(&bundle)?;
    let (up_mag, down_mag) = sense_context_images(&scene)?;

    let timing_up = EpiTiming::new(
        scene.physics.esp_s,
        Polarity::Up,
        scene.physics.echo_center_line,
        scene.grid.ny,
    )?;
    let (displacement, note) =
        match estimate_displacement(&up_mag, &down_mag, &DisplacementConfig::default()) {
            Ok((d, warn)) => (d, warn),
            Err(e) => (
                DisplacementMap {
                    d: RTensor::zeros(&[scene.grid.ny, scene.grid.nx]),
                },
                Some(format!("displacement estimation failed ({e}); using zero field")),
            ),
        };
    let field = displacement_to_field(&displacement, &timing_up)?;

    bundle.write_r("init/field", &field.map)?;
    bundle.write_r("init/displacement", &displacement.d)?;
    bundle.write_r("init/up_mag", &up_mag)?;
    bundle.write_r("init/down_mag", &down_mag)?;
    match note {
        Some(w) => bundle.note(format!("init-field: WARNING {w}")),
        None => bundle.note("init-field: displacement estimator"),
    }
    bundle.save_manifest()?;
    Ok(())
}

/// Oracle initializer for controlled refinement studies: the true field
/// plus a smooth seeded perturbation scaled to the requested RMSE over the
/// object support.
pub fn cmd_init_field_oracle(bundle_dir: &Path, perturb_rmse_hz: f64) -> Result<()> {
    let mut bundle = Bundle::open(bundle_dir)?;
    let scene = load_scene(&bundle)?;
    let truth = scene
        .truth_field
        .as_ref()
        .ok_or_else(|| Error::validation("oracle init needs the ground-truth field"))?;
    let (up_mag, down_mag) = sense_context_images(&scene)?;

    let mut rng = RandomSource::from_seed(bundle.manifest.seed).derive("oracle-perturbation");
    let (ny, nx) = (scene.grid.ny, scene.grid.nx);
    let mut perturb = RTensor::zeros(&[ny, nx]);
    // smooth random field: low-order polynomial plus two wide bumps
    let c: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let bumps: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.uniform_in(-0.5, 0.5),
                rng.uniform_in(-0.5, 0.5),
                rng.normal(),
            )
        })
        .collect();
    for i in 0..ny {
        for j in 0..nx {
            let y = scene.grid.norm_y(i);
            let x = scene.grid.norm_x(j);
            let mut v = c[0] + c[1] * y + c[2] * x + c[3] * x * y + c[4] * (y * y - 0.3)
                + c[5] * (x * x - 0.3);
            for (by, bx, amp) in &bumps {
                v += amp * (-((y - by).powi(2) + (x - bx).powi(2)) / 0.18).exp();
            }
            *perturb.at2_mut(i, j) = v;
        }
    }
    let support = support_mask(
        scene
            .truth_mags
            .as_ref()
            .map(|m| &m[0])
            .ok_or_else(|| Error::validation("oracle init needs ground truth magnitudes"))?,
        0.05,
    );
    let rms = field_rmse(&perturb, &RTensor::zeros(&[ny, nx]), &support)?;
    let scaled = perturb.scale(perturb_rmse_hz / rms.max(1e-12));
    let init = truth.map.add(&scaled);

    bundle.write_r("init/field", &init)?;
    bundle.write_r("init/up_mag", &up_mag)?;
    bundle.write_r("init/down_mag", &down_mag)?;
    bundle.note(format!(
        "init-field: oracle (true field + {perturb_rmse_hz} Hz RMSE perturbation)"
    ));
    bundle.save_manifest()?;
    Ok(())
}

fn scene_to_train_scene(scene: &LoadedScene) -> Result<TrainScene> {
    let init_field = scene
        .init_field
        .clone()
        .ok_or_else(|| Error::validation("bundle has no initial field; run init-field first"))?;
    let ctx = scene
        .ctx
        .clone()
        .ok_or_else(|| Error::validation("bundle has no field context; run init-field first"))?;
    Ok(TrainScene {
        grid: scene.grid,
        coils: scene.coils.clone(),
        directions: scene.directions.clone(),
        shots: scene.shots.clone(),
        init_field,
        ctx,
    })
}

#[derive(Serialize, Deserialize)]
pub struct TrainReportDoc {
    pub config_hash: String,
    pub seed: u64,
    pub report: crate::zsssl::TrainReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_s: Option<f64>,
}

/// Train on a bundle and write the best-validation checkpoint plus a JSON
/// report. A numerically aborted run still persists its last good
/// checkpoint before the error propagates.
pub fn cmd_train(
    bundle_dir: &Path,
    cfg: &RunConfig,
    out: &Path,
    deterministic: bool,
) -> Result<()> {
    let bundle = Bundle::open(bundle_dir)?;
    let scene = load_scene(&bundle)?;
    let train_scene = scene_to_train_scene(&scene)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;

    let start = Instant::now();
    let out_train = train(&train_scene, &train_cfg)?;
    let elapsed = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(out)?;
    save_checkpoint(
        out,
        &out_train.theta,
        &out_train.phi,
        &train_cfg,
        &bundle.manifest.config_hash,
    )?;
    let aborted = out_train.report.aborted.clone();
    let doc = TrainReportDoc {
        config_hash: bundle.manifest.config_hash.clone(),
        seed: cfg.seed,
        report: out_train.report,
        timing_s: if deterministic { None } else { Some(elapsed) },
    };
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    if let Some(reason) = aborted {
        return Err(Error::numerical(format!(
            "training aborted ({reason}); last good checkpoint written to {}",
            out.display()
        )));
    }
    Ok(())
}

/// Per-direction reconstruction with a trained checkpoint: blip-up and
/// blip-down complex images, the real-value combined image, and the
/// refined field map.
pub fn cmd_reconstruct(bundle_dir: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let bundle = Bundle::open(bundle_dir)?;
    let scene = load_scene(&bundle)?;
    let (theta, phi, train_cfg, ckpt_hash) = load_checkpoint(checkpoint)?;
    if ckpt_hash != bundle.manifest.config_hash {
        return Err(Error::validation(
            "checkpoint was trained on a different configuration (hash mismatch)",
        ));
    }
    let ctx = scene
        .ctx
        .clone()
        .ok_or_else(|| Error::validation("bundle has no field context"))?;
    let init_field = scene.init_field.clone().unwrap();

    let mut out_bundle = Bundle::create(
        out,
        scene.physics.clone(),
        scene.directions.clone(),
        bundle.manifest.shot_phase_coeffs.clone(),
        bundle.manifest.config_hash.clone(),
        bundle.manifest.seed,
    )?;

    let mut mean_field = RTensor::zeros(&[scene.grid.ny, scene.grid.nx]);
    for (d, dir) in scene.directions.iter().enumerate() {
        let field = if train_cfg.field_updates {
            predict_field(&scene.grid, &ctx, dir, &theta)?
        } else {
            init_field.clone()
        };
        let (up, down) = split_by_polarity(&scene.shots[d])?;
        let x_up = reconstruct(&up, &scene.coils, &field, &phi, &train_cfg.unroll, None)?;
        let x_down = reconstruct(&down, &scene.coils, &field, &phi, &train_cfg.unroll, None)?;
        let combined = real_value_combine(&[x_up.clone(), x_down.clone()])?;

        out_bundle.write_c(&format!("recon/d{d}/up"), &x_up)?;
        out_bundle.write_c(&format!("recon/d{d}/down"), &x_down)?;
        out_bundle.write_r(&format!("recon/d{d}/combined"), &combined)?;
        out_bundle.write_r(&format!("field/d{d}"), &field.map)?;
        mean_field = mean_field.add(&field.map);
    }
    mean_field = mean_field.scale(1.0 / scene.directions.len() as f64);
    out_bundle.write_r("field/mean", &mean_field)?;
    out_bundle.note(format!(
        "reconstruct: field_updates {}",
        train_cfg.field_updates
    ));
    out_bundle.save_manifest()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub gt_available: bool,
    pub mean: MetricSet,
    pub per_direction: Vec<MetricSet>,
    pub init_field_rmse_hz: Option<f64>,
    pub refined_field_rmse_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_s: Option<f64>,
}

fn mean_metrics(rows: &[MetricSet]) -> MetricSet {
    let n = rows.len() as f64;
    let mut out = MetricSet {
        nrmse: 0.0,
        lcc: 0.0,
        ssim: 0.0,
        hfen: 0.0,
        field_rmse_hz: None,
    };
    let mut field_acc = 0.0;
    let mut field_n = 0usize;
    for r in rows {
        out.nrmse += r.nrmse / n;
        out.lcc += r.lcc / n;
        out.ssim += r.ssim / n;
        out.hfen += r.hfen / n;
        if let Some(f) = r.field_rmse_hz {
            field_acc += f;
            field_n += 1;
        }
    }
    if field_n > 0 {
        out.field_rmse_hz = Some(field_acc / field_n as f64);
    }
    out
}

/// Evaluate reconstructions against the bundle's ground truth and emit the
/// metric report (JSON, plus optional PNG difference maps).
pub fn cmd_evaluate(
    bundle_dir: &Path,
    recon_dir: &Path,
    out_file: &Path,
    png: bool,
    deterministic: bool,
) -> Result<EvalReport> {
    let start = Instant::now();
    let bundle = Bundle::open(bundle_dir)?;
    let recon = Bundle::open(recon_dir)?;
    if recon.manifest.config_hash != bundle.manifest.config_hash {
        return Err(Error::validation("recon/bundle configuration hash mismatch"));
    }
    let scene = load_scene(&bundle)?;

    let mut report = EvalReport {
        config_hash: bundle.manifest.config_hash.clone(),
        gt_available: scene.truth_mags.is_some(),
        mean: MetricSet {
            nrmse: f64::NAN,
            lcc: f64::NAN,
            ssim: f64::NAN,
            hfen: f64::NAN,
            field_rmse_hz: None,
        },
        per_direction: Vec::new(),
        init_field_rmse_hz: None,
        refined_field_rmse_hz: None,
        notice: None,
        timing_s: None,
    };

    if let (Some(truth_mags), Some(truth_field)) = (&scene.truth_mags, &scene.truth_field) {
        let support = support_mask(&truth_mags[0], 0.05);
        let mut rows = Vec::new();
        for d in 0..scene.directions.len() {
            let combined = recon.read_r(&format!("recon/d{d}/combined"))?;
            let mag = RTensor::from_vec(
                &combined.shape.clone(),
                combined.data.iter().map(|v| v.abs()).collect(),
            );
            let mut row = evaluate_images(&mag, &truth_mags[d])?;
            let refined = recon.read_r(&format!("field/d{d}"))?;
            row.field_rmse_hz = Some(field_rmse(&refined, &truth_field.map, &support)?);
            if png {
                let dir = out_file.parent().unwrap_or(Path::new(".")).join("png");
                std::fs::create_dir_all(&dir)?;
                save_magnitude_png(&dir.join(format!("recon_d{d}.png")), &mag)?;
                save_signed_png(
                    &dir.join(format!("diff_d{d}.png")),
                    &mag.sub(&truth_mags[d]),
                    0.3 * truth_mags[d].max_abs(),
                )?;
            }
            rows.push(row);
        }
        report.mean = mean_metrics(&rows);
        report.per_direction = rows;

        let refined_mean = recon.read_r("field/mean")?;
        report.refined_field_rmse_hz =
            Some(field_rmse(&refined_mean, &truth_field.map, &support)?);
        if bundle.has("init/field") {
            let init = bundle.read_r("init/field")?;
            report.init_field_rmse_hz = Some(field_rmse(&init, &truth_field.map, &support)?);
            if png {
                let dir = out_file.parent().unwrap_or(Path::new(".")).join("png");
                std::fs::create_dir_all(&dir)?;
                save_signed_png(&dir.join("field_refined.png"), &refined_mean, 60.0)?;
                save_signed_png(&dir.join("field_true.png"), &truth_field.map, 60.0)?;
                save_signed_png(&dir.join("field_init.png"), &init, 60.0)?;
            }
        }
    } else {
        report.notice = Some("no ground truth in bundle; metrics skipped".into());
    }

    if !deterministic {
        report.timing_s = Some(start.elapsed().as_secs_f64());
    }
    if let Some(parent) = out_file.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_file, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareTable {
    pub config_hash: String,
    pub rows: std::collections::BTreeMap<String, MetricSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_s: Option<f64>,
}

/// The comparison protocol: SENSE plus init-field correction, the
/// static-field unrolled baseline (trained with the field frozen at the
/// initializer), and the joint method. Trains both networks, reconstructs,
/// evaluates, writes the table and PNG panels.
pub fn cmd_compare(
    bundle_dir: &Path,
    cfg: &RunConfig,
    out: &Path,
    deterministic: bool,
) -> Result<CompareTable> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let bundle = Bundle::open(bundle_dir)?;
    let scene = load_scene(&bundle)?;
    let truth_mags = scene
        .truth_mags
        .as_ref()
        .ok_or_else(|| Error::validation("compare needs ground truth"))?;
    let truth_field = scene.truth_field.as_ref().unwrap();
    let init_field = scene
        .init_field
        .as_ref()
        .ok_or_else(|| Error::validation("compare needs an initial field; run init-field"))?;
    let support = support_mask(&truth_mags[0], 0.05);

    // --- row 1: SENSE + init-field correction (post-processing analogue)
    let mut sense_rows = Vec::new();
    let esp = scene.physics.esp_s;
    let ny = scene.grid.ny as f64;
    let disp = DisplacementMap {
        d: init_field.map.scale(2.0 * esp * ny),
    };
    for d in 0..scene.directions.len() {
        let (up, down) = split_by_polarity(&scene.shots[d])?;
        let up_mag = sense_recon(&up, &scene.coils, 30, 1e-4)?.magnitude();
        let down_mag = sense_recon(&down, &scene.coils, 30, 1e-4)?.magnitude();
        let cu = jacobian_correct(&up_mag, &disp, Polarity::Up)?;
        let cd = jacobian_correct(&down_mag, &disp, Polarity::Down)?;
        let avg = cu.add(&cd).scale(0.5);
        let mut row = evaluate_images(&avg, &truth_mags[d])?;
        row.field_rmse_hz = Some(field_rmse(&init_field.map, &truth_field.map, &support)?);
        if d == 0 {
            save_magnitude_png(&out.join("sense_init_d0.png"), &avg)?;
        }
        sense_rows.push(row);
    }

    // --- rows 2 and 3: static-field baseline and joint training
    let mut rows = std::collections::BTreeMap::new();
    rows.insert("sense_init".to_string(), mean_metrics(&sense_rows));

    for (name, field_updates) in [("static", false), ("joint", true)] {
        let mut run_cfg = cfg.clone();
        run_cfg.train.field_updates = field_updates;
        let ckpt = out.join(format!("{name}_ckpt"));
        cmd_train(bundle_dir, &run_cfg, &ckpt, deterministic)?;
        let recon_dir = out.join(format!("{name}_recon"));
        cmd_reconstruct(bundle_dir, &ckpt, &recon_dir)?;
        let report = cmd_evaluate(
            bundle_dir,
            &recon_dir,
            &out.join(format!("{name}_eval.json")),
            false,
            deterministic,
        )?;
        let mut mean = report.mean.clone();
        mean.field_rmse_hz = report.refined_field_rmse_hz;
        rows.insert(name.to_string(), mean);

        let recon = Bundle::open(&recon_dir)?;
        let combined = recon.read_r("recon/d0/combined")?;
        let mag = RTensor::from_vec(
            &combined.shape.clone(),
            combined.data.iter().map(|v| v.abs()).collect(),
        );
        save_magnitude_png(&out.join(format!("{name}_d0.png")), &mag)?;
        save_signed_png(
            &out.join(format!("{name}_field.png")),
            &recon.read_r("field/mean")?,
            60.0,
        )?;
    }
    save_magnitude_png(&out.join("truth_d0.png"), &truth_mags[0])?;
    save_signed_png(&out.join("truth_field.png"), &truth_field.map, 60.0)?;

    let table = CompareTable {
        config_hash: bundle.manifest.config_hash.clone(),
        rows,
        timing_s: if deterministic {
            None
        } else {
            Some(start.elapsed().as_secs_f64())
        },
    };
    std::fs::write(
        out.join("compare.json"),
        serde_json::to_string_pretty(&table)?,
    )?;
    Ok(table)
}

/// Reconstruct the blip-up/down pair of one direction with an explicit
/// field map; shared by the examples.
pub fn reconstruct_direction(
    scene: &LoadedScene,
    d: usize,
    field: &FieldMap,
    phi: &crate::nets::ReconParams,
    unroll: &crate::unrolled::UnrollConfig,
) -> Result<(CTensor, CTensor)> {
    let (up, down) = split_by_polarity(&scene.shots[d])?;
    let x_up = reconstruct(&up, &scene.coils, field, phi, unroll, None)?;
    let x_down = reconstruct(&down, &scene.coils, field, phi, unroll, None)?;
    Ok((x_up, x_down))
}
