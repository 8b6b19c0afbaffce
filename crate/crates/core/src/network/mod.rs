//! Network topology: residual CNN backbone, local/global attention encoder,
//! and the two upsampling decoder branches.

mod backbone;
mod decoder;
mod encoder;
mod layers;
mod model;

pub use backbone::Backbone;
pub use decoder::Decoder;
pub use encoder::{fm_to_tokens, tokens_to_fm, Encoder};
pub use layers::Mode;
pub use model::{normalize_image, softmax_channels, Model, ModelCache, PredictionPair};
