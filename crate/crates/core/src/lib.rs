//! Differentially private sequence-model training with teacher ensembles.
//!
//! The crate is `no_std` + `alloc`. It contains every algorithmic piece of the
//! pipeline and nothing that touches the filesystem:
//!
//!  - [`mechanisms`]: Laplace/Gaussian samplers, noisy argmax over teacher votes
//!    and noisy posterior aggregation.
//!  - [`accountant`]: Rényi-DP curves, composition, conversion to (ε, δ) and
//!    noise calibration, plus a Monte Carlo ε estimator.
//!  - [`corpus`]: a synthetic speech-like corpus, disjoint partitioning and
//!    token error rates.
//!  - [`seqmodel`]: frame classifier, recurrent CTC model and RNN transducer with
//!    exact losses, hand-written backward passes, decoding and optimizers.
//!  - [`pate`]: teacher training, aggregation, private relabeling of public data
//!    and student training with sequence-level distillation.
//!  - [`dpsgd`]: the clipped/noised SGD baseline with budget enforcement.
//!  - [`mia`]: model inversion by likelihood ascent on the input features.
//!
//! Every randomized routine takes an explicit seeded stream (see [`rng`]), so a
//! run is fully determined by its configuration and seed.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod accountant;
pub mod corpus;
pub mod dpsgd;
mod error;
pub mod linalg;
pub mod math;
pub mod mechanisms;
pub mod mia;
mod par;
pub mod pate;
pub mod rng;
pub mod seqmodel;

pub use error::{Error, Result};
