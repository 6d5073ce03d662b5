//! Context-aware virtual adversarial training (CaVAT) for semi-supervised
//! segmentation with non-differentiable constraints.
//!
//! A small convolutional segmenter is trained on a labeled cross-entropy term
//! plus an unlabeled term: the KL divergence between predictions on clean and
//! adversarially perturbed inputs, and a connectivity constraint whose
//! gradient is estimated with REINFORCE.

pub mod adversarial;
pub mod baselines;
pub mod checkpoint;
pub mod constraints;
pub mod data;
pub mod grid;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod net;

pub use grid::{Adjacency, BinaryMask, DiscreteMask, Grid, Image, ProbMap, RngState};
pub use net::{ArchConfig, NetworkParams};
