//! The policy model: tensors, the encoder-decoder network with manual
//! backprop and exported cross-attention, and decoding strategies.

pub mod net;
pub mod sampling;
pub mod tensor;

pub use net::{
    cross_attention_slice, DecodeTrace, DecoderState, HeadReduce, ImageEncoding, LayerSelect,
    ModelConfig, ModelError, ParamSet, PolicyModel,
};
pub use sampling::{
    greedy_decode, sample_candidates, sample_from_state, sample_one, DecodeParams,
    SampledSequence, SamplingError,
};
pub use tensor::Tensor;
