//! Multi-scale dense self-distillation for nucleus detection and
//! classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] – tensors, a reverse-mode tape, optimizers and gradient checking.
//! * [`synth`] – deterministic synthetic ROI tiles with annotated nuclei.
//! * [`sampler`] – MPP-based cropping with nucleus provenance and multi-crop view sets.
//! * [`model`] – ViT encoder, reassembly, residual fusion decoder and heads.
//! * [`distill`] – teacher/student pretraining with image- and nucleus-level losses.
//! * [`finetune`] – large field-of-view semi-supervised detection fine-tuning.
//! * [`evalsuite`] – KNN, linear probe, fine-tune ACC and detection F1.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod evalsuite;
pub mod finetune;
pub mod gradsuite;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod synth;

pub use error::{MuseError, Result};
pub use model::{FeatureBundle, ModelConfig, Params};
pub use numerics::{SeededRng, Tensor};
pub use sampler::{MultiCropConfig, View};
pub use synth::{NucleusRecord, RoiPatch, SynthConfig};
