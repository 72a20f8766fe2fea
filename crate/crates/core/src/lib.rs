//! ViG-UNet: a U-shaped encoder/decoder for binary segmentation whose stages
//! are graph-neural-network blocks.
//!
//! Every stage treats the positions of a feature map as graph nodes, links
//! each node to its nearest neighbours in feature space, and mixes features
//! with a max-relative graph convolution (the Grapher block) followed by a
//! pointwise feed-forward block. Encoder and decoder stages at the same
//! resolution are joined by additive skip connections.
//!
//! The crate is self-contained: [`tensor`] provides the dense tensors and the
//! reverse-mode tape the model is differentiated with.

pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, VigUnet};
pub use tensor::{Float, Mode, RngState, Tensor};
