//! Heavy-hitter aware compression of transformer feed-forward networks.
//!
//! A feed-forward block `σ(XU)V` is a sum of `d_ff` rank-one terms, one per
//! neuron. A handful of neurons ("heavy hitters") carry most of the output
//! energy. This crate scores neurons on calibration data, splits the layer
//! into a heavy-hitter sub-FFN and a tail sub-FFN, and compresses the tail
//! harder than the heavy hitters (low-rank factors or low-bit group
//! quantization).
//!
//! Module map:
//! - [`linalg`]: dense matrices, products, GeLU, truncated SVD
//! - [`ffn`]: layers, heavy-hitter sets and the split forward pass
//! - [`profiler`]: calibration statistics, importance scores, ablation
//! - [`quant`] and [`compress`]: round-to-nearest group quantization and the
//!   asymmetric compression plans
//! - [`bench`]: parameter and FLOP accounting, latency measurement, reports
//! - [`io`], [`rng`], [`synth`]: checkpoint files and seeded generators

pub mod bench;
pub mod compress;
pub mod error;
pub mod ffn;
pub mod io;
pub mod linalg;
pub mod profiler;
pub mod quant;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use ffn::{Activation, FfnLayer, HeavyHitterSet, SplitFfn, TailForm, WeightForm};
pub use linalg::{DenseMatrix, LowRankFactors};
pub use quant::QuantizedMatrix;
