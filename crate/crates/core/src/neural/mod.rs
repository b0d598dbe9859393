//! Hand-written neural kernel and the sequence models built on it.

mod gradcheck;
mod layers;
mod model;
mod params;
mod persist;
mod train;

pub use gradcheck::{
    check_attention, check_embedding, check_layer_norm, check_lstm, check_model, check_store, run_all as gradcheck_all,
    tiny_config, GradReport, FD_STEP,
};
pub use layers::{
    dropout, dropout_backward, softmax_cross_entropy, Attention, CrossEntropy, Embedding, FeedForward, KvCache, LayerNorm,
    Linear, Lstm, LstmState, LAYER_NORM_EPS,
};
pub use model::{choose_part, time_major_targets, Arch, ForwardCache, Mode, Model, ModelConfig, OnlineState, EVAL_WINDOW};
pub use params::{Adam, AdamConfig, Float, Grads, ParamId, ParamStore};
pub use train::{evaluate, train, truth_hints, EpochLog, TrainConfig, TrainReport, LOG_HEADER};
pub use persist::NEURAL_KIND;
