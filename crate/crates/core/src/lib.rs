//! Image ↔ I-V mapping for planar MOSFET cross-sections.
//!
//! Two variational autoencoders, one over 80×80 structure images and one
//! over 51-point transfer curves, are tied together by cubic polynomial
//! ridge regressors between their latent means. Chaining them gives an
//! inverse-design path (curve → structure image) and a forward path
//! (structure image → curve). An analytic surrogate device and a procedural
//! renderer supply training data and act as the oracle for evaluation.

pub mod bridge;
pub mod config;
pub mod device;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod store;
pub mod vae;

pub use bridge::PolyBridge;
pub use config::{PassCounts, RunConfig};
pub use device::{DeviceParams, FiguresOfMerit, IvCurve};
pub use error::{Error, Result};
pub use eval::{EvalMode, EvalReport};
pub use pipeline::TrainedStack;
pub use render::DeviceImage;
pub use store::Dataset;
pub use vae::VaeModel;
