//! In-context learning for categorical outcomes as functional gradient
//! descent, executed exactly by a constructed attention network. Includes the
//! explicit GD oracle, constructed and trainable attention models, synthetic
//! data generators, meta-training, and numerical verifiers for the
//! exact-equivalence and stationary-point claims.

pub mod error;
pub mod numerics;
pub mod kernels;
pub mod gd_oracle;
pub mod attention;
pub mod datagen;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
