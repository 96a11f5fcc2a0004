//! Differentiable core: tensors, the autodiff tape, parameter storage,
//! standard layers, the optimizer, and finite-difference gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_grad_check, GradReport};
pub use graph::{GradMap, Gradients, Graph, Var};
pub use layers::{
    cosine_sim, cosine_var, mean_pool, mlp_forward, multi_head_attention, transformer_encode,
    Activation, AttentionSpec, Ffn, LayerNorm, Linear, Mha, MhaInit, Mlp, PositionalEncoding,
    TransformerEncoder, COS_EPS,
};
pub use optim::AdamW;
pub use params::{Init, ParamStore};
pub use tensor::Tensor2D;
