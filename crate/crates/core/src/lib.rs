//! Sparse black-box adversarial attacks on video classifiers.
//!
//! The pipeline builds a spatial mask from center-surround saliency, prunes
//! frames with a PPO-trained frame-deletion policy, and searches for a
//! minimal adversarial direction inside the resulting sparse subspace with a
//! sign-based zeroth-order optimizer. Threat models are only reachable through
//! [`oracle::Oracle::query`].

pub mod error;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod metrics;
pub mod ppo;
pub mod saliency;
pub mod signopt;
pub mod video;

pub use error::{Error, Result};
pub use video::{Dims, Label, Mask, VideoTensor};
