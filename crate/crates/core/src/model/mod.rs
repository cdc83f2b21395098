//! Masked-prediction network: optional strided conv front end, input
//! projection with a learned mask embedding, convolutional positional
//! embedding, pre-norm transformer blocks and cosine-similarity codeword
//! heads. All arithmetic is f64 with hand-written gradients.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod train;

pub use config::{conv_output_len, reference_conv, ConvLayer, InputMode, LossConfig, ModelConfig};
pub use network::{features_input, loss, waveform_input, Grads, HeadAccuracy, LossOutput, MaskedPredictionModel, Pass};
pub use optim::{Adam, AdamConfig, Schedule};
pub use params::{param_shapes, ParamStore};
pub use train::{
    evaluate, extract_features, extract_layer, item_gradients, train, EvalReport, TrainConfig, TrainItem,
    TrainReport,
};
