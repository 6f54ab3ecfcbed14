//! The full pipeline on one small scene: simulate, initialize, train,
//! reconstruct, evaluate - and print the metric report.
//!
//! Run with `cargo run --release -p epirec --example reconstruct_and_evaluate`.

use epirec::config::RunConfig;
use epirec::pipeline::{
    cmd_evaluate, cmd_init_field, cmd_reconstruct, cmd_simulate, cmd_train,
};

fn main() -> epirec::Result<()> {
    let mut cfg = RunConfig::desk().with_seed(31);
    cfg.grid = 32;
    cfg.ncoils = 4;
    cfg.n_directions = 2;
    cfg.field_amplitude_hz = 30.0;
    cfg.train.denoiser.n_layers = 3;
    cfg.train.denoiser.n_features = 8;
    cfg.train.inr.mlp_width = 32;
    cfg.train.unroll.n_unrolls = 2;
    cfg.train.unroll.cg_iters = 4;
    cfg.train.t_replicas = 4;
    cfg.train.stage1_steps = 200;

    let root = std::env::temp_dir().join("epirec_example_pipeline");
    let _ = std::fs::remove_dir_all(&root);
    let bundle = root.join("bundle");

    cmd_simulate(&cfg, &bundle)?;
    cmd_init_field(&bundle)?;
    cmd_train(&bundle, &cfg, &root.join("ckpt"), false)?;
    cmd_reconstruct(&bundle, &root.join("ckpt"), &root.join("recon"))?;
    let report = cmd_evaluate(
        &bundle,
        &root.join("recon"),
        &root.join("eval.json"),
        true,
        false,
    )?;

    println!("mean over directions:");
    println!("  NRMSE {:.4}", report.mean.nrmse);
    println!("  LCC   {:.4}", report.mean.lcc);
    println!("  SSIM  {:.4}", report.mean.ssim);
    println!("  HFEN  {:.4}", report.mean.hfen);
    println!(
        "field RMSE: init {:.2} Hz -> refined {:.2} Hz",
        report.init_field_rmse_hz.unwrap(),
        report.refined_field_rmse_hz.unwrap()
    );
    println!("report and PNGs under {}", root.display());
    Ok(())
}
