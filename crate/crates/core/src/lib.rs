//! Event/RGB fusion network for lighting-robust emotion recognition.
//!
//! The pipeline is: frame encoder per modality, a bidirectional selective
//! state-space block whose input/readout projections are shared across
//! modalities, cross-attention with a scalar gate, and a mixture of
//! heterogeneous experts with top-k routing. Everything runs on a small
//! define-by-run autodiff tape and is generic over the float type.
//!
//! ```
//! use mcoe::config::ModelConfig;
//! use mcoe::model::Model;
//! use mcoe::synth::synth_task;
//!
//! let cfg = ModelConfig::desk();
//! let data = synth_task::<f32>(0, 7, &cfg).unwrap();
//! let (model, params) = Model::init::<f32>(cfg, 0).unwrap();
//! let logits = model.logits(&params, &data[0]).unwrap();
//! assert_eq!(logits.shape(), &[7]);
//! ```

pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod events;
pub mod gradcheck;
pub mod io;
pub mod mamba;
pub mod mcib;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod params;
pub mod reference;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Sample32 = model::Sample<f32>;
pub type Sample64 = model::Sample<f64>;
