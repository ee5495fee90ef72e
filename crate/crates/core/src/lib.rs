//! Scoring engine for selecting image–text pairs for continual pre-training of a
//! dual encoder.
//!
//! Every sample is scored in the end-point subspace of the model (the two
//! projection heads and the log-temperature). The utility multiplies a
//! curvature-preconditioned alignment with the evaluation mean gradient by a
//! learnability weight and a target-domain relevance weight.
//!
//! Module map:
//!
//! * [`numerics`]: dense kernels, seeded generators, conjugate gradients, symmetric eigensolver
//! * [`sketch`]: CountSketch, sparse signed and SRHT projections
//! * [`endpoint`]: normalized projections, symmetric InfoNCE and analytic gradients
//! * [`curvature`]: streaming self/cross moments and the ridge surrogate
//! * [`scoring`]: alignment, learnability, relevance, top-n selection, drift
//! * [`baselines`]: Random, CLIPScore, concept heuristics, Dot, TracIn, TRAK
//! * [`datastore`]: binary shard, checkpoint, score, surrogate and manifest formats plus config
//! * [`flopsmeter`]: closed-form FLOPs accounting
//! * [`pipeline`]: end-to-end scoring over shards
//! * [`synth`]: clustered synthetic pools for demos and tests

pub mod baselines;
pub mod curvature;
pub mod datastore;
pub mod endpoint;
mod error;
pub mod flopsmeter;
pub mod numerics;
pub mod pipeline;
pub mod scoring;
pub mod sketch;
pub mod synth;

pub use error::{Error, Result};
