//! Journey-based positional attention for character-level language models.
//!
//! Each position carries a planar rotation per coordinate pair. Attention
//! between a query at `p` and a key/value at `q ≤ p` sees the key (and, for
//! the JoFormer variants, the value) transformed by the composition of the
//! rotations met along the way. Because rotations in the same plane commute,
//! the composition is a rotation by a difference of exclusive prefix sums,
//! so the whole mechanism costs the same as rotary attention.
//!
//! Modules, bottom up:
//!
//! - [`tensor`] and [`autograd`]: dense tensors and a reverse-mode tape.
//! - [`rotation`]: frequency schedules, cumulative angles, pair rotations.
//! - [`model`]: the shared single-head backbone and its three variants.
//! - [`data`], [`training`], [`metrics`]: the language-modeling harness.
//! - [`oracle`]: brute-force references and gradient checks.
//! - [`cli`]: the `joformer` command implementations.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rotation;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use error::{ConfigError, DataError, FormatError, ModelError, TensorError, TrainError};
pub use model::{ModelConfig, Parameters, Variant};
pub use tensor::{DType, Scalar, Tensor};
