#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Multi-source model assembly, source-free adaptation and exact fusion of
//! parallel Conv-BN pathways into single convolutions.
//!
//! The workflow: train K source models ([`nn::train_source`]), stack them into
//! one multi-pathway network ([`seprep::assemble`]), adapt it to unlabeled
//! target data ([`adapt::adapt`]), then fold every unit into one convolution
//! ([`seprep::fuse_model`]) for inference with uncertainty-weighted heads
//! ([`seprep::predict`]).

pub mod adapt;
pub mod ckpt;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod seprep;
pub mod tensor;

pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport};
pub use metrics::{evaluate, flops_count, h_score, EvalReport, Flops};
pub use nn::{Arch, ConvBnPathway, Form, Head, ModelBundle, Unit};
pub use rng::SplitMix64;
pub use seprep::{Criterion, FusedConv, SepUnit, UncertaintyReport, WeightMode};
pub use tensor::{Real, Tensor};
