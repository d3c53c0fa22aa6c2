//! Reference-free verification of text-to-image model APIs through
//! boundary-aware prompt optimization.
//!
//! The pipeline crafts a verification prompt that sits on the target model's
//! own semantic boundary: anchor identification by coordinate-gradient suffix
//! search ([`suffix_opt`]), bisection along the anchor pair's embedding path
//! ([`boundary`]), and a targeted suffix search toward the boundary point.
//! [`verify`] scores prompts by output consistency and runs the two-phase
//! owner/user protocol. [`model_sim`] provides a synthetic model family whose
//! boundaries are known in closed form.

pub mod boundary;
pub mod embed;
pub mod endpoint;
pub mod error;
pub mod model_sim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod suffix_opt;
pub mod verify;

pub use embed::{cosine, interpolate, token_gradient, Embedding, EncoderParams, GradientTable, Objective, Prompt, TokenId, Vocab};
pub use error::{BpoError, Result};
pub use model_sim::{build_family, default_family, ConceptAnchor, ImageProxy, ModelRegistry, ModelSpec};
