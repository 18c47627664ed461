//! Resampling SSM network: token or feature embedding, a stack of multi-branch
//! blocks, and a classification or next-token head.
//!
//! Each block splits its channels across branches. A branch optionally
//! compresses its slice by selective resampling, runs a diagonal SSM, and
//! decompresses back to the input length. Branch outputs are concatenated,
//! added to the block input and normalized.

mod checkpoint;
mod config;
mod model;
mod norm;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{
    even_widths, Activation, BlockConfig, BranchConfig, HeadKind, InputKind, NetworkConfig, NormKind, NormPosition,
    Pooling, SsmKind,
};
pub use model::{Bound, Forward, Input, Mode, Model, Param, Target};
pub use norm::{
    batchnorm_tape, rmsnorm, rmsnorm_tape, BatchMoments, BatchNormMode, BATCHNORM_EPS, BATCHNORM_MOMENTUM, RMS_EPS,
};

#[cfg(test)]
mod tests;
