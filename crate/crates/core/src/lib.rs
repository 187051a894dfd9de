//! Attention-map losses for compositional scene arrangement, a synthetic
//! differentiable backend, and verifier-driven initial-noise refinement.

pub mod attention;
pub mod backend;
pub mod constraints;
pub mod grad;
pub mod losses;
pub mod par;
pub mod pipeline;
pub mod verifier;
