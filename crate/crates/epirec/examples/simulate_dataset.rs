//! Simulate a small blip-up/down dataset bundle and inspect its contents.
//!
//! Run with `cargo run --release -p epirec --example simulate_dataset`.

use epirec::config::RunConfig;
use epirec::pipeline::{cmd_simulate, load_scene};
use epirec::bundle::Bundle;

fn main() -> epirec::Result<()> {
    let mut cfg = RunConfig::desk().with_seed(11);
    cfg.grid = 32;
    cfg.ncoils = 4;
    cfg.n_directions = 3;

    let out = std::env::temp_dir().join("epirec_example_bundle");
    let _ = std::fs::remove_dir_all(&out);
    cmd_simulate(&cfg, &out)?;
    println!("bundle at {}", out.display());

    let bundle = Bundle::open(&out)?;
    println!("config hash: {}", bundle.manifest.config_hash);
    println!("arrays:");
    for (name, meta) in &bundle.manifest.arrays {
        println!("  {:<22} {:>5} {:?}", name, meta.dtype, meta.shape);
    }

    let scene = load_scene(&bundle)?;
    println!(
        "\n{} directions, {} shots each ({} per polarity), {} coils",
        scene.directions.len(),
        scene.shots[0].len(),
        scene.physics.shots_per_polarity,
        scene.coils.ncoils()
    );
    for (d, dir) in scene.directions.iter().enumerate() {
        let lines: usize = scene.shots[d]
            .iter()
            .map(|s| s.mask.sampled_lines().len())
            .sum();
        println!(
            "  d{d}: b = {:>6.0}, g = [{:+.2} {:+.2} {:+.2}], {} sampled lines total",
            dir.b, dir.g[0], dir.g[1], dir.g[2], lines
        );
    }
    let truth = scene.truth_mags.as_ref().unwrap();
    println!(
        "\nper-direction ground-truth peak magnitudes: {:?}",
        truth.iter().map(|m| (m.max_abs() * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    Ok(())
}
