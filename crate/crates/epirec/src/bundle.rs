//! On-disk dataset bundles and parameter checkpoints.
//!
//! A bundle is a directory holding `manifest.json` plus raw little-endian
//! arrays (`f64`, complex interleaved re/im `c128`, or `u8`), one file per
//! array. Every array a command reads must be declared in the manifest.
//! Checkpoints use the same idea: one flat `params.bin` described by a
//! JSON manifest naming each tensor, its shape and dtype.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inr::FieldParams;
use crate::nets::ReconParams;
use crate::numerics::RandomSource;
use crate::phantom::DiffusionDirection;
use crate::tensor::{CTensor, RTensor};
use crate::zsssl::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArrayMeta {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

/// Acquisition physics shared by every shot in a bundle.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhysicsMeta {
    pub grid: [usize; 2],
    pub fov_mm: [f64; 2],
    pub esp_s: f64,
    pub echo_center_line: usize,
    pub accel: usize,
    pub pf_fraction: f64,
    pub shots_per_polarity: usize,
    pub ncoils: usize,
    pub noise_sigma: f64,
    pub field_amplitude_hz: f64,
    pub b_value: f64,
    pub slice_z: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub physics: PhysicsMeta,
    pub directions: Vec<DiffusionDirection>,
    pub shot_phase_coeffs: Vec<Vec<[f64; 6]>>,
    pub arrays: BTreeMap<String, ArrayMeta>,
    pub provenance: Vec<String>,
}

pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn name_to_file(name: &str) -> String {
    format!("{}.bin", name.replace('/', "_"))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn f64_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::validation("array file length not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Bundle {
    pub fn create(
        dir: &Path,
        physics: PhysicsMeta,
        directions: Vec<DiffusionDirection>,
        shot_phase_coeffs: Vec<Vec<[f64; 6]>>,
        config_hash: String,
        seed: u64,
    ) -> Result<Bundle> {
        fs::create_dir_all(dir)?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                format_version: 1,
                config_hash,
                seed,
                physics,
                directions,
                shot_phase_coeffs,
                arrays: BTreeMap::new(),
                provenance: Vec::new(),
            },
        })
    }

    pub fn open(dir: &Path) -> Result<Bundle> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::validation(format!(
                "no manifest.json in {}",
                dir.display()
            )));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if manifest.format_version != 1 {
            return Err(Error::validation("unsupported bundle format version"));
        }
        Ok(Bundle {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn save_manifest(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.manifest.provenance.push(line.into());
    }

    pub fn write_r(&mut self, name: &str, t: &RTensor) -> Result<()> {
        let file = name_to_file(name);
        write_bytes(&self.dir.join(&file), &f64_bytes(&t.data))?;
        self.manifest.arrays.insert(
            name.to_string(),
            ArrayMeta {
                file,
                dtype: "f64".into(),
                shape: t.shape.clone(),
            },
        );
        Ok(())
    }

    pub fn write_c(&mut self, name: &str, t: &CTensor) -> Result<()> {
        let file = name_to_file(name);
        let mut flat = Vec::with_capacity(2 * t.len());
        for z in &t.data {
            flat.push(z.re);
            flat.push(z.im);
        }
        write_bytes(&self.dir.join(&file), &f64_bytes(&flat))?;
        self.manifest.arrays.insert(
            name.to_string(),
            ArrayMeta {
                file,
                dtype: "c128".into(),
                shape: t.shape.clone(),
            },
        );
        Ok(())
    }

    pub fn write_mask(&mut self, name: &str, keep: &[bool], shape: &[usize]) -> Result<()> {
        let file = name_to_file(name);
        let bytes: Vec<u8> = keep.iter().map(|&k| k as u8).collect();
        write_bytes(&self.dir.join(&file), &bytes)?;
        self.manifest.arrays.insert(
            name.to_string(),
            ArrayMeta {
                file,
                dtype: "u8".into(),
                shape: shape.to_vec(),
            },
        );
        Ok(())
    }

    fn meta(&self, name: &str) -> Result<&ArrayMeta> {
        self.manifest
            .arrays
            .get(name)
            .ok_or_else(|| Error::validation(format!("array '{name}' not in manifest")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.arrays.contains_key(name)
    }

    pub fn read_r(&self, name: &str) -> Result<RTensor> {
        let meta = self.meta(name)?;
        if meta.dtype != "f64" {
            return Err(Error::validation(format!("array '{name}' is not f64")));
        }
        let data = bytes_to_f64(&fs::read(self.dir.join(&meta.file))?)?;
        let n: usize = meta.shape.iter().product();
        if data.len() != n {
            return Err(Error::validation(format!("array '{name}' has wrong length")));
        }
        Ok(RTensor::from_vec(&meta.shape, data))
    }

    pub fn read_c(&self, name: &str) -> Result<CTensor> {
        let meta = self.meta(name)?;
        if meta.dtype != "c128" {
            return Err(Error::validation(format!("array '{name}' is not c128")));
        }
        let flat = bytes_to_f64(&fs::read(self.dir.join(&meta.file))?)?;
        let n: usize = meta.shape.iter().product();
        if flat.len() != 2 * n {
            return Err(Error::validation(format!("array '{name}' has wrong length")));
        }
        let data = flat
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect();
        Ok(CTensor::from_vec(&meta.shape, data))
    }

    pub fn read_mask(&self, name: &str) -> Result<Vec<bool>> {
        let meta = self.meta(name)?;
        if meta.dtype != "u8" {
            return Err(Error::validation(format!("array '{name}' is not u8")));
        }
        let bytes = fs::read(self.dir.join(&meta.file))?;
        let n: usize = meta.shape.iter().product();
        if bytes.len() != n {
            return Err(Error::validation(format!("array '{name}' has wrong length")));
        }
        Ok(bytes.into_iter().map(|b| b != 0).collect())
    }

    /// Every array referenced by the manifest exists with a matching size.
    pub fn verify(&self) -> Result<()> {
        for (name, meta) in &self.manifest.arrays {
            let path = self.dir.join(&meta.file);
            let len = fs::metadata(&path)
                .map_err(|_| Error::validation(format!("missing array file for '{name}'")))?
                .len() as usize;
            let n: usize = meta.shape.iter().product();
            let expect = match meta.dtype.as_str() {
                "f64" => 8 * n,
                "c128" => 16 * n,
                "u8" => n,
                other => {
                    return Err(Error::validation(format!(
                        "array '{name}': unknown dtype {other}"
                    )))
                }
            };
            if len != expect {
                return Err(Error::validation(format!(
                    "array '{name}': file length {len} does not match shape"
                )));
            }
        }
        Ok(())
    }
}

/// Seed derivation shared by the simulator and the trainer.
pub fn derived_rng(seed: u64, label: &str) -> RandomSource {
    RandomSource::from_seed(seed).derive(label)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config_hash: String,
    train_config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

fn pack_params(theta: &FieldParams, phi: &ReconParams) -> (Vec<TensorEntry>, Vec<f64>) {
    let mut flat = Vec::new();
    let mut entries = Vec::new();
    let push = |name: &str, data: &[f64], shape: Vec<usize>, flat: &mut Vec<f64>| {
        let offset = flat.len();
        flat.extend_from_slice(data);
        TensorEntry {
            name: name.to_string(),
            shape,
            dtype: "f64".into(),
            offset,
            len: data.len(),
        }
    };
    for (i, l) in theta.encoder.layers.iter().enumerate() {
        entries.push(push(&format!("theta/encoder/{i}/w"), &l.w.data, l.w.shape.clone(), &mut flat));
        entries.push(push(&format!("theta/encoder/{i}/b"), &l.b.data, l.b.shape.clone(), &mut flat));
    }
    for (i, l) in theta.mlp.layers.iter().enumerate() {
        entries.push(push(&format!("theta/mlp/{i}/w"), &l.w.data, l.w.shape.clone(), &mut flat));
        entries.push(push(&format!("theta/mlp/{i}/b"), &l.b.data, l.b.shape.clone(), &mut flat));
    }
    for (net, name) in [(&phi.ni, "ni"), (&phi.nk, "nk")] {
        for (i, l) in net.layers.iter().enumerate() {
            entries.push(push(&format!("phi/{name}/{i}/w"), &l.w.data, l.w.shape.clone(), &mut flat));
            entries.push(push(&format!("phi/{name}/{i}/b"), &l.b.data, l.b.shape.clone(), &mut flat));
        }
    }
    entries.push(push("phi/lambda_i", &[phi.lambda_i], vec![1], &mut flat));
    entries.push(push("phi/lambda_k", &[phi.lambda_k], vec![1], &mut flat));
    (entries, flat)
}

/// Write a parameter checkpoint: flat binary plus a manifest naming every
/// tensor.
pub fn save_checkpoint(
    dir: &Path,
    theta: &FieldParams,
    phi: &ReconParams,
    train_config: &TrainConfig,
    config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tensors, flat) = pack_params(theta, phi);
    fs::write(dir.join("params.bin"), f64_bytes(&flat))?;
    let manifest = CheckpointManifest {
        format_version: 1,
        config_hash: config_hash.to_string(),
        train_config: train_config.clone(),
        tensors,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a checkpoint back into freshly shaped parameter structs.
pub fn load_checkpoint(dir: &Path) -> Result<(FieldParams, ReconParams, TrainConfig, String)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let flat = bytes_to_f64(&fs::read(dir.join("params.bin"))?)?;

    // rebuild the parameter shapes from the stored config, then overwrite
    let mut rng = RandomSource::from_seed(0);
    let mut theta = FieldParams::init(&mut rng, &manifest.train_config.inr);
    let mut phi = ReconParams::init(&mut rng, &manifest.train_config.denoiser)?;

    let by_name: BTreeMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let fetch = |name: &str, expect: &[usize]| -> Result<Vec<f64>> {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::validation(format!("checkpoint missing tensor '{name}'")))?;
        if e.shape != expect {
            return Err(Error::validation(format!(
                "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                e.shape, expect
            )));
        }
        Ok(flat[e.offset..e.offset + e.len].to_vec())
    };

    for (i, l) in theta.encoder.layers.iter_mut().enumerate() {
        l.w.data = fetch(&format!("theta/encoder/{i}/w"), &l.w.shape)?;
        l.b.data = fetch(&format!("theta/encoder/{i}/b"), &l.b.shape)?;
    }
    for (i, l) in theta.mlp.layers.iter_mut().enumerate() {
        l.w.data = fetch(&format!("theta/mlp/{i}/w"), &l.w.shape)?;
        l.b.data = fetch(&format!("theta/mlp/{i}/b"), &l.b.shape)?;
    }
    for (net, name) in [(&mut phi.ni, "ni"), (&mut phi.nk, "nk")] {
        for (i, l) in net.layers.iter_mut().enumerate() {
            l.w.data = fetch(&format!("phi/{name}/{i}/w"), &l.w.shape)?;
            l.b.data = fetch(&format!("phi/{name}/{i}/b"), &l.b.shape)?;
        }
    }
    phi.lambda_i = fetch("phi/lambda_i", &[1])?[0];
    phi.lambda_k = fetch("phi/lambda_k", &[1])?[0];

    Ok((theta, phi, manifest.train_config, manifest.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::InrConfig;
    use crate::nets::DenoiserConfig;
    use crate::numerics::seeded_rng;
    use crate::zsssl::LossWeights;
    use crate::unrolled::UnrollConfig;

    fn physics() -> PhysicsMeta {
        PhysicsMeta {
            grid: [16, 16],
            fov_mm: [220.0, 220.0],
            esp_s: 5e-4,
            echo_center_line: 8,
            accel: 2,
            pf_fraction: 1.0,
            shots_per_polarity: 1,
            ncoils: 2,
            noise_sigma: 0.0,
            field_amplitude_hz: 0.0,
            b_value: 1000.0,
            slice_z: 0.0,
        }
    }

    #[test]
    fn bundle_round_trip_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(7);
        let mut b = Bundle::create(
            tmp.path(),
            physics(),
            vec![DiffusionDirection::b0()],
            vec![vec![[0.0; 6]]],
            "hash".into(),
            7,
        )
        .unwrap();
        let r = RTensor::from_vec(&[4, 4], (0..16).map(|_| rng.normal()).collect());
        let c = CTensor::from_vec(
            &[2, 4, 4],
            (0..32)
                .map(|_| Complex64::new(rng.normal(), rng.normal()))
                .collect(),
        );
        let mask: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        b.write_r("truth/field", &r).unwrap();
        b.write_c("kspace/d0/up/s0", &c).unwrap();
        b.write_mask("mask/d0/up/s0", &mask, &[4, 4]).unwrap();
        b.note("simulate: test");
        b.save_manifest().unwrap();

        let loaded = Bundle::open(tmp.path()).unwrap();
        loaded.verify().unwrap();
        assert_eq!(loaded.read_r("truth/field").unwrap(), r);
        assert_eq!(loaded.read_c("kspace/d0/up/s0").unwrap(), c);
        assert_eq!(loaded.read_mask("mask/d0/up/s0").unwrap(), mask);
        assert!(loaded.read_r("not/there").is_err());
        assert_eq!(loaded.manifest.provenance, vec!["simulate: test"]);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(8);
        let inr = InrConfig {
            mlp_width: 8,
            ..InrConfig::desk()
        };
        let theta = FieldParams::init(&mut rng, &inr);
        let phi = ReconParams::init(
            &mut rng,
            &DenoiserConfig {
                n_layers: 2,
                n_features: 3,
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            denoiser: DenoiserConfig {
                n_layers: 2,
                n_features: 3,
            },
            inr,
            unroll: UnrollConfig::desk(),
            weights: LossWeights::default(),
            t_replicas: 2,
            rho: 0.4,
            epochs: 1,
            lr_phi: 1e-3,
            lr_theta: 1e-3,
            stage1_steps: 0,
            stage1_lr: 1e-2,
            seed: 8,
            field_updates: true,
            verbose: false,
        };
        save_checkpoint(tmp.path(), &theta, &phi, &cfg, "abc").unwrap();
        let (theta2, phi2, cfg2, hash) = load_checkpoint(tmp.path()).unwrap();
        assert_eq!(theta.flatten(), theta2.flatten());
        assert_eq!(phi.flatten(), phi2.flatten());
        assert_eq!(cfg2, cfg);
        assert_eq!(hash, "abc");
    }
}
