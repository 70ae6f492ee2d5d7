//! Closed-loop adversarial attack engine.
//!
//! The crate builds adversarial examples against a black-box ("blind")
//! classifier using gradients from a white-box surrogate ensemble. Three
//! complementary generators produce candidate perturbations each round:
//!
//! * [`attacks::cw_generate`] — dense, l2-regularized gradient descent,
//! * [`attacks::jsma_generate`] — sparse saliency-pair pixel edits,
//! * [`attacks::sta_generate`] — a smooth spatial warp of the image.
//!
//! A mixer blends the candidates with simplex weights found by randomized
//! hill climbing on a score that trades black-box confidence, surrogate
//! stability, and structural similarity. Heuristic (or remote-LLM) agents
//! critique each round, retune generator hyperparameters, and escalate the
//! perturbation budget when progress stalls. [`orchestrator::run`] wires the
//! whole loop together.
//!
//! Everything is f64, deterministic given seeds, and sized for desk-scale
//! experiments: small images, small hand-rolled networks, CPU only.

pub mod agents;
pub mod attacks;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod mixer;
pub mod modelfile;
pub mod models;
pub mod nn;
pub mod orchestrator;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;
