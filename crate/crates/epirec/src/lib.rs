//! Joint image and B0 field-map reconstruction for blip-up/down multi-shot
//! EPI, exercised end to end on synthetic digital phantoms.
//!
//! The crate simulates susceptibility-distorted multi-coil k-space from a
//! known scene, initializes a field map from reversed-polarity images, and
//! then refines both the distortion-free image and the field by zero-shot
//! self-supervised optimization: a physics-guided unrolled reconstructor
//! (dual-domain denoisers + conjugate-gradient data consistency) alternating
//! with a coordinate-network field estimator.
//!
//! Start with the runnable examples (`cargo run --release -p epirec
//! --example ...`) or the `epirec` binary, which drives the same pipeline
//! via subcommands.

pub mod error;
pub mod ad;
pub mod bundle;
pub mod cg;
pub mod config;
pub mod epi;
pub mod experiments;
pub mod fieldinit;
pub mod inr;
pub mod metrics;
pub mod nets;
pub mod numerics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod unrolled;
pub mod viz;
pub mod zsssl;

pub use error::{Error, Result};
