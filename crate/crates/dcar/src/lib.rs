//! Dynamic chunk-wise autoregressive sequence modeling on a synthetic
//! token world: training, cached inference, scheduler policy optimization,
//! and an evaluation suite, all on a small tape-based autodiff core.

pub mod checkpoint;
pub mod config;
pub mod dcpo;
pub mod decode;
pub mod evalsuite;
pub mod infer;
pub mod model;
pub mod policy;
pub mod optim;
pub mod tensor;
pub mod world;
