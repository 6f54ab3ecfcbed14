//! Zero-shot self-supervised training on a small distorted scene: mask
//! partitioning, the three-stage schedule, and the per-epoch loss report.
//!
//! Run with `cargo run --release -p epirec --example train_zero_shot`.

use epirec::config::RunConfig;
use epirec::pipeline::{cmd_init_field, cmd_simulate, cmd_train};

fn main() -> epirec::Result<()> {
    let mut cfg = RunConfig::desk().with_seed(21);
    cfg.grid = 32;
    cfg.ncoils = 4;
    cfg.n_directions = 2;
    cfg.include_b0 = true;
    cfg.field_amplitude_hz = 30.0;
    cfg.train.denoiser.n_layers = 3;
    cfg.train.denoiser.n_features = 8;
    cfg.train.inr.mlp_width = 32;
    cfg.train.unroll.n_unrolls = 2;
    cfg.train.unroll.cg_iters = 4;
    cfg.train.t_replicas = 4;
    cfg.train.stage1_steps = 200;
    cfg.train.verbose = true;

    let root = std::env::temp_dir().join("epirec_example_train");
    let _ = std::fs::remove_dir_all(&root);
    let bundle = root.join("bundle");
    cmd_simulate(&cfg, &bundle)?;
    cmd_init_field(&bundle)?;
    println!("bundle prepared; training...");
    cmd_train(&bundle, &cfg, &root.join("ckpt"), false)?;

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
        root.join("ckpt/train_report.json"),
    )?)?;
    println!("\nper-epoch losses:");
    for e in report["report"]["epochs"].as_array().unwrap() {
        println!(
            "  epoch {} (stage {}): dc_l2 {:.4} dc_l1 {:.4} updown {:.4} field {:.4} validation {:.4}",
            e["epoch"], e["stage"], e["dc_l2"].as_f64().unwrap(), e["dc_l1"].as_f64().unwrap(),
            e["updown"].as_f64().unwrap(), e["field"].as_f64().unwrap(),
            e["validation_dc"].as_f64().unwrap()
        );
    }
    println!(
        "best epoch: {} (validation {:.4})",
        report["report"]["best_epoch"], report["report"]["best_validation"].as_f64().unwrap()
    );
    println!("checkpoint in {}", root.join("ckpt").display());
    Ok(())
}
