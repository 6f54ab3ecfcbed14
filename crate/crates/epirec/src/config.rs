//! Run configuration: scene, acquisition and training parameters with two
//! presets, schema-validated JSON loading (unknown keys rejected) and a
//! canonical configuration hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inr::InrConfig;
use crate::nets::DenoiserConfig;
use crate::phantom::FieldBlob;
use crate::unrolled::UnrollConfig;
use crate::zsssl::{LossWeights, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub grid: usize,
    pub fov_mm: f64,
    pub ncoils: usize,
    pub shots_per_polarity: usize,
    pub accel: usize,
    pub pf_fraction: f64,
    pub n_directions: usize,
    pub include_b0: bool,
    pub b_value: f64,
    pub field_amplitude_hz: f64,
    #[serde(default)]
    pub field_blobs: Vec<FieldBlob>,
    pub noise_sigma: f64,
    pub esp_s: f64,
    pub shot_phase_max_rad: f64,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Desk-scale scene: 64x64, 220 mm FOV, 8 coils, 2 shots per polarity,
    /// R=2, 75% partial Fourier, 6 directions + b0, 50 Hz field.
    pub fn desk() -> RunConfig {
        RunConfig {
            preset: "desk".into(),
            seed: 42,
            grid: 64,
            fov_mm: 220.0,
            ncoils: 8,
            shots_per_polarity: 2,
            accel: 2,
            pf_fraction: 0.75,
            n_directions: 6,
            include_b0: true,
            b_value: 1000.0,
            field_amplitude_hz: 50.0,
            field_blobs: vec![],
            noise_sigma: 0.002,
            esp_s: 5e-4,
            shot_phase_max_rad: std::f64::consts::FRAC_PI_4,
            train: TrainConfig {
                denoiser: DenoiserConfig::desk(),
                inr: InrConfig::desk(),
                unroll: UnrollConfig::desk(),
                weights: LossWeights::default(),
                t_replicas: 10,
                rho: 0.4,
                epochs: 3,
                lr_phi: 1e-3,
                lr_theta: 2e-3,
                stage1_steps: 400,
                stage1_lr: 1e-2,
                seed: 42,
                field_updates: true,
                verbose: false,
            },
        }
    }

    /// Acquisition and architecture shapes of the in vivo protocol: R=5,
    /// 75% partial Fourier, 2-shot, 32 directions, 16-layer/46-channel
    /// denoisers, 5-layer/512-channel MLP, 8 unrolls, 10 CG steps, learning
    /// rate 1e-5, 3 epochs, 10+1 masks. Shape checks only at desk scale.
    pub fn paper() -> RunConfig {
        RunConfig {
            preset: "paper".into(),
            seed: 42,
            grid: 64,
            fov_mm: 220.0,
            ncoils: 8,
            shots_per_polarity: 2,
            accel: 5,
            pf_fraction: 0.75,
            n_directions: 32,
            include_b0: true,
            b_value: 1000.0,
            field_amplitude_hz: 50.0,
            field_blobs: vec![],
            noise_sigma: 0.002,
            esp_s: 5e-4,
            shot_phase_max_rad: std::f64::consts::FRAC_PI_4,
            train: TrainConfig {
                denoiser: DenoiserConfig::paper(),
                inr: InrConfig::paper(),
                unroll: UnrollConfig::paper(),
                weights: LossWeights::default(),
                t_replicas: 10,
                rho: 0.4,
                epochs: 3,
                lr_phi: 1e-5,
                lr_theta: 1e-5,
                stage1_steps: 400,
                stage1_lr: 1e-2,
                seed: 42,
                field_updates: true,
                verbose: false,
            },
        }
    }

    pub fn preset(name: &str) -> Result<RunConfig> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper" => Ok(RunConfig::paper()),
            other => Err(Error::validation(format!(
                "unknown preset '{other}' (expected 'desk' or 'paper')"
            ))),
        }
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        crate::numerics::Grid2D::new(self.grid, self.grid, self.fov_mm, self.fov_mm)?;
        if self.ncoils < 1 {
            return Err(Error::validation("need at least one coil"));
        }
        if self.shots_per_polarity < 1 {
            return Err(Error::validation("need at least one shot per polarity"));
        }
        if self.accel < 1 || !(0.0 < self.pf_fraction && self.pf_fraction <= 1.0) {
            return Err(Error::validation("bad acceleration or partial Fourier"));
        }
        if self.n_directions < 1 {
            return Err(Error::validation("need at least one direction"));
        }
        if self.noise_sigma < 0.0 || self.esp_s <= 0.0 {
            return Err(Error::validation("bad noise or echo spacing"));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Override the master seed, keeping the training seed in sync.
    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn paper_preset_carries_protocol_shapes() {
        let p = RunConfig::paper();
        assert_eq!(p.accel, 5);
        assert_eq!(p.pf_fraction, 0.75);
        assert_eq!(p.shots_per_polarity, 2);
        assert_eq!(p.n_directions, 32);
        assert_eq!(p.train.denoiser.n_layers, 16);
        assert_eq!(p.train.denoiser.n_features, 46);
        assert_eq!(p.train.inr.mlp_layers, 5);
        assert_eq!(p.train.inr.mlp_width, 512);
        assert_eq!(p.train.unroll.n_unrolls, 8);
        assert_eq!(p.train.unroll.cg_iters, 10);
        assert_eq!(p.train.t_replicas, 10);
        assert_eq!(p.train.lr_phi, 1e-5);
        assert_eq!(p.train.epochs, 3);
    }

    #[test]
    fn hash_changes_with_any_physics_parameter() {
        let a = RunConfig::desk();
        let mut b = RunConfig::desk();
        b.field_amplitude_hz += 1.0;
        assert_ne!(a.hash(), b.hash());
        let mut c = RunConfig::desk();
        c.esp_s *= 2.0;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash(), RunConfig::desk().hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut json: serde_json::Value =
            serde_json::to_value(RunConfig::desk()).unwrap();
        json["bogus_knob"] = serde_json::json!(1.0);
        let text = serde_json::to_string(&json).unwrap();
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(&text);
        assert!(parsed.is_err());
    }

    #[test]
    fn file_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cfg.json");
        let cfg = RunConfig::desk().with_seed(7);
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(loaded, cfg);
        assert_eq!(loaded.train.seed, 7);
    }
}
