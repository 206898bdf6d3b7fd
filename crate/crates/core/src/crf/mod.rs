//! The prototype-amortized CRF tagger: label prototypes from support tokens,
//! dot-product emissions, Gaussian transition scores generated from
//! prototype pairs and sampled by reparameterization, and linear-chain
//! inference (forward, marginals, Viterbi, NLL).

mod chain;
mod prototype;
mod transition;

pub use chain::{
    forward_log_partition, marginals_vjp, path_score, sequence_nll, sequence_nll_grad,
    token_marginals, viterbi_decode, ForwardBackward, LabelDistribution,
};
pub use prototype::{compute_prototypes, emission_scores, emission_scores_backward, PrototypeSet};
pub use transition::{
    sample_transition_scores, TransitionGenParams, TransitionMoments, TransitionSamples,
};

use crate::math::Matrix;
use alloc::vec::Vec;

/// Emission matrix plus the sampled transition matrices of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfScores {
    pub emissions: Matrix,
    pub transitions: Vec<Matrix>,
}

impl CrfScores {
    pub fn sample_count(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_finite(&self) -> bool {
        self.emissions.is_finite() && self.transitions.iter().all(Matrix::is_finite)
    }
}
