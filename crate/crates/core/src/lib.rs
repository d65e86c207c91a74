//! Feed-forward animatable human avatar reconstruction on the CPU.
//!
//! Pipeline: anchor points sampled on a procedural proxy body are serialized
//! along space-filling curves into point tokens, fused with multi-image patch
//! tokens through a grid-pooled encoder-decoder transformer, and decoded into
//! animatable 3D Gaussian splats rendered by a differentiable rasterizer.

pub mod tensor;
pub mod gradcheck;
pub mod optim;
pub mod body;
pub mod serial;
pub mod fusion;
pub mod heads;
pub mod render;
pub mod losses;
pub mod metrics;
pub mod ply;
pub mod model;

pub use tensor::{GradStore, Tape, Tensor};
