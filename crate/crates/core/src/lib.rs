//! Greedy dynamic feature selection (DFS) over variable feature sets.
//!
//! Each instance exposes its own finite set of measurable features, every
//! feature carries a prior descriptor vector ("features of features"), and a
//! budget of `k` features is revealed one at a time before the final
//! prediction. Selection is trained end-to-end through a Gumbel-softmax
//! relaxation of the pick; the predictor and policy are permutation-invariant
//! and -equivariant set networks over feature tokens `[x·m, m, z]`.
//!
//! Modules:
//! - [`diffcore`]: dense f64 tensors, a reverse-mode tape, and an Adam optimizer
//! - [`concrete`]: Gumbel sampling, tempered softmax, relaxed mask updates
//! - [`setmodel`]: set encoders (DeepSets / self-attention), policy + predictor heads
//! - [`dfsengine`]: the k-step selection protocol: training, rollouts, evaluation
//! - [`oracle`]: exact naive-Bayes posterior / conditional-mutual-information reference
//! - [`dataio`]: instance construction from images, bag-of-words corpora, synthetic specs
//! - [`gradcheck`]: finite-difference gradient verification used by tests and selfcheck
//! - [`selfcheck`]: runnable verification suites (gradients, Gumbel-max, permutation)

pub mod concrete;
pub mod dataio;
pub mod dfsengine;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod oracle;
pub mod selfcheck;
pub mod setmodel;

pub use error::{CoreError, Result};
