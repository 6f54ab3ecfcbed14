//! Loss-balance sensitivity: train the same small scene with the gradient
//! term of the field loss at 0, 1 and 10, and list the archived reports.
//!
//! Run with `cargo run --release -p epirec --example sweep_loss_weights`.

use epirec::experiments::run_sweep_wgrad;

fn main() -> epirec::Result<()> {
    let root = std::env::temp_dir().join("epirec_example_sweep");
    let _ = std::fs::remove_dir_all(&root);
    let archives = run_sweep_wgrad(&root, &[0.0, 1.0, 10.0], false)?;
    println!("archived {} runs:", archives.len());
    for dir in &archives {
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
            dir.join("ckpt/train_report.json"),
        )?)?;
        let best = report["report"]["best_validation"].as_f64().unwrap();
        println!("  {} -> best validation {best:.4}", dir.display());
    }
    Ok(())
}
