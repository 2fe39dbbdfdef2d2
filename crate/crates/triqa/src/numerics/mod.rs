//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The engine is deliberately minimal: exactly the primitives the audio
//! network and the QA network need, generic over [`Scalar`] so every
//! differentiable computation can be replayed in `f64` for finite-difference
//! verification. All execution is single-threaded per graph; determinism is
//! part of the contract.

mod adam;
mod gradcheck;
mod lstm;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use lstm::{bilstm_sequence, init_lstm_params, lstm_sequence, LstmVars};
pub use params::{ParamSet, Parameter};
pub use tape::{BnBatchStats, Tape, Var};
pub use tensor::{Scalar, Tensor};

use rand_chacha::rand_core::SeedableRng;

/// Deterministic RNG for a (seed, stream) pair. Distinct streams give
/// independent sequences under the same master seed.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
