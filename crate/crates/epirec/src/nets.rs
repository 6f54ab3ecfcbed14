//! The learned operators: dual-domain residual denoisers on virtual-coil
//! channel stacks and the lightweight feature encoder used by the field
//! estimator.
//!
//! Complex data crosses the network boundary as two real channels per
//! virtual-coil channel, so both denoisers see 4 real channels in and out.
//! The final convolution of each residual branch is zero-initialized, which
//! makes a fresh denoiser the identity.

use serde::{Deserialize, Serialize};

use crate::ad::{Id, Tape};
use crate::error::{Error, Result};
use crate::numerics::RandomSource;
use crate::tensor::{CTensor, RTensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub n_features: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::validation("denoiser needs at least 2 layers"));
        }
        if self.n_features < 1 {
            return Err(Error::validation("denoiser needs at least 1 feature"));
        }
        Ok(())
    }

    /// 16 layers, 46 feature channels.
    pub fn paper() -> Self {
        DenoiserConfig {
            n_layers: 16,
            n_features: 46,
        }
    }

    /// 4 layers, 16 feature channels.
    pub fn desk() -> Self {
        DenoiserConfig {
            n_layers: 4,
            n_features: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub w: RTensor,
    pub b: RTensor,
}

/// Plain 3x3 CNN: conv/relu pairs with a linear final convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Cnn {
    pub layers: Vec<ConvLayer>,
}

impl Cnn {
    /// He-style random init; `zero_last` zeroes the final convolution so the
    /// enclosing residual operator starts as the identity.
    pub fn init(
        rng: &mut RandomSource,
        n_layers: usize,
        in_ch: usize,
        features: usize,
        out_ch: usize,
        zero_last: bool,
    ) -> Cnn {
        assert!(n_layers >= 2);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let ci = if l == 0 { in_ch } else { features };
            let co = if l == n_layers - 1 { out_ch } else { features };
            let fan_in = (ci * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = if zero_last && l == n_layers - 1 {
                RTensor::zeros(&[co, ci, 3, 3])
            } else {
                RTensor::from_vec(
                    &[co, ci, 3, 3],
                    (0..co * ci * 9).map(|_| std * rng.normal()).collect(),
                )
            };
            layers.push(ConvLayer {
                w,
                b: RTensor::zeros(&[co]),
            });
        }
        Cnn { layers }
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

    /// Put every layer on the tape; trainable layers become leaves.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> CnnNodes {
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
        CnnNodes { layers }
    }
}

#[derive(Clone, Debug)]
pub struct CnnNodes {
    pub layers: Vec<(Id, Id)>,
}

impl CnnNodes {
    pub fn apply(&self, tape: &mut Tape, x: Id) -> Id {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = tape.conv2d(h, *w, *b);
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Accumulate this CNN's parameter gradients in flattening order.
    pub fn collect_grads(&self, tape: &Tape, grads: &crate::ad::Grads, out: &mut Vec<f64>) {
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

/// The unrolled reconstructor's trainable parameters: both denoisers and
/// the data-consistency weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconParams {
    pub ni: Cnn,
    pub nk: Cnn,
    pub lambda_i: f64,
    pub lambda_k: f64,
}

impl ReconParams {
    pub fn init(rng: &mut RandomSource, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ReconParams {
            ni: Cnn::init(rng, cfg.n_layers, 4, cfg.n_features, 4, true),
            nk: Cnn::init(rng, cfg.n_layers, 4, cfg.n_features, 4, true),
            lambda_i: 0.05,
            lambda_k: 0.05,
        })
    }

    pub fn n_params(&self) -> usize {
        self.ni.n_params() + self.nk.n_params() + 2
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.ni.flatten_into(&mut out);
        self.nk.flatten_into(&mut out);
        out.push(self.lambda_i);
        out.push(self.lambda_k);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut cursor = 0;
        self.ni.unflatten_from(flat, &mut cursor);
        self.nk.unflatten_from(flat, &mut cursor);
        self.lambda_i = flat[cursor];
        self.lambda_k = flat[cursor + 1];
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Tape handles for one training step.
pub struct ReconNodes {
    pub ni: CnnNodes,
    pub nk: CnnNodes,
    pub lambda_i: Id,
    pub lambda_k: Id,
}

impl ReconParams {
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> ReconNodes {
        let ni = self.ni.on_tape(tape, trainable);
        let nk = self.nk.on_tape(tape, trainable);
        let (lambda_i, lambda_k) = if trainable {
            (tape.leaf_scalar(self.lambda_i), tape.leaf_scalar(self.lambda_k))
        } else {
            (tape.scalar(self.lambda_i), tape.scalar(self.lambda_k))
        };
        ReconNodes {
            ni,
            nk,
            lambda_i,
            lambda_k,
        }
    }
}

impl ReconNodes {
    pub fn collect_grads(&self, tape: &Tape, grads: &crate::ad::Grads) -> Vec<f64> {
        let mut out = Vec::new();
        self.ni.collect_grads(tape, grads, &mut out);
        self.nk.collect_grads(tape, grads, &mut out);
        out.push(grads.r(self.lambda_i).map_or(0.0, |g| g.data[0]));
        out.push(grads.r(self.lambda_k).map_or(0.0, |g| g.data[0]));
        out
    }
}

/// `z_i = V_C^H N_i(V_C x)` with a residual `N_i`, on the tape.
pub fn denoise_image_tape(tape: &mut Tape, x: Id, ni: &CnnNodes) -> Id {
    let vc = tape.vc_augment(x);
    let planes = tape.c_to_planes(vc);
    let resid = ni.apply(tape, planes);
    let sum = tape.add_r(planes, resid);
    let c = tape.planes_to_c(sum);
    tape.vc_reduce(c)
}

/// `z_k = F^H V_C^H N_k(V_C F x)` with a residual `N_k`, on the tape.
pub fn denoise_kspace_tape(tape: &mut Tape, x: Id, nk: &CnnNodes) -> Id {
    let k = tape.fft2c(x);
    let vc = tape.vc_augment(k);
    let planes = tape.c_to_planes(vc);
    let resid = nk.apply(tape, planes);
    let sum = tape.add_r(planes, resid);
    let c = tape.planes_to_c(sum);
    let red = tape.vc_reduce(c);
    tape.ifft2c(red)
}

/// Image-domain denoiser on plain tensors.
pub fn denoise_image(x: &CTensor, params: &ReconParams) -> Result<CTensor> {
    if x.shape.len() != 2 {
        return Err(Error::validation("denoiser expects a 2-D complex image"));
    }
    let mut tape = Tape::new();
    let xi = tape.const_c(x.clone());
    let ni = params.ni.on_tape(&mut tape, false);
    let out = denoise_image_tape(&mut tape, xi, &ni);
    Ok(tape.value_c(out).clone())
}

/// k-space-domain denoiser on plain tensors.
pub fn denoise_kspace(x: &CTensor, params: &ReconParams) -> Result<CTensor> {
    if x.shape.len() != 2 {
        return Err(Error::validation("denoiser expects a 2-D complex image"));
    }
    let mut tape = Tape::new();
    let xi = tape.const_c(x.clone());
    let nk = params.nk.on_tape(&mut tape, false);
    let out = denoise_kspace_tape(&mut tape, xi, &nk);
    Ok(tape.value_c(out).clone())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub features: usize,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            n_layers: 4,
            features: 32,
        }
    }

    pub fn desk() -> Self {
        EncoderConfig {
            n_layers: 4,
            features: 16,
        }
    }
}

/// Normalize encoder inputs to comparable scales: images by their joint
/// peak, the field by a fixed 100 Hz.
pub fn encoder_input(up: &RTensor, down: &RTensor, init_field: &RTensor) -> RTensor {
    let peak = up.max_abs().max(down.max_abs()).max(1e-12);
    let (h, w) = (up.shape[0], up.shape[1]);
    let mut data = Vec::with_capacity(3 * h * w);
    data.extend(up.data.iter().map(|v| v / peak));
    data.extend(down.data.iter().map(|v| v / peak));
    data.extend(init_field.data.iter().map(|v| v / 100.0));
    RTensor::from_vec(&[3, h, w], data)
}

/// Per-voxel latent features from the preliminary images and initial field.
pub fn encode_features(
    up: &RTensor,
    down: &RTensor,
    init_field: &RTensor,
    encoder: &Cnn,
) -> Result<RTensor> {
    if up.shape != down.shape || up.shape != init_field.shape {
        return Err(Error::validation("encoder inputs must share a grid"));
    }
    let mut tape = Tape::new();
    let input = tape.const_r(encoder_input(up, down, init_field));
    let nodes = encoder.on_tape(&mut tape, false);
    let out = nodes.apply(&mut tape, input);
    Ok(tape.value_r(out).clone())
}
