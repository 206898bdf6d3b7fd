//! The prototype-amortized CRF tagger as one trainable unit: encoder + transition generator,
//! with an episode-level forward pass and its hand-written backward pass.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::crf::{
    compute_prototypes, emission_scores, emission_scores_backward, sample_transition_scores,
    viterbi_decode, LabelDistribution, PrototypeSet, TransitionGenParams, TransitionMoments,
    TransitionSamples,
};
use crate::encoder::{EncoderCache, EncoderConfig, EncoderParams, TokenEncoder};
use crate::math::Matrix;
use crate::{rng, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Initial bias of the generated log standard deviation.
    pub log_sigma_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            log_sigma_bias: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub transition: TransitionGenParams,
}

/// A support sequence (possibly prompt-extended) with per-token labels;
/// `None` marks tokens excluded from the prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSeq {
    pub tokens: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySeq {
    pub tokens: Vec<String>,
    pub gold: Vec<usize>,
}

/// An episode in model terms: label count plus encoded-ready sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInput {
    pub num_labels: usize,
    pub support: Vec<SupportSeq>,
    pub query: Vec<QuerySeq>,
}

#[derive(Debug, Clone)]
pub struct QueryForward {
    cache: EncoderCache,
    pub embeddings: Matrix,
    pub emissions: Matrix,
    pub samples: Option<TransitionSamples>,
}

#[derive(Debug, Clone)]
pub struct EpisodeForward {
    support_caches: Vec<EncoderCache>,
    pub prototypes: PrototypeSet,
    pub moments: TransitionMoments,
    pub sigma: Matrix,
    pub queries: Vec<QueryForward>,
}

impl EpisodeForward {
    /// Token marginals of query `q`, averaged over its transition samples
    /// (the mean transitions when no samples were drawn).
    pub fn marginals(&self, q: usize) -> Result<LabelDistribution> {
        let query = &self.queries[q];
        match &query.samples {
            Some(s) => crate::crf::token_marginals(&query.emissions, &s.samples),
            None => crate::crf::token_marginals(&query.emissions, core::slice::from_ref(&self.moments.mu)),
        }
    }

    /// Viterbi paths under the mean transition scores.
    pub fn decode(&self) -> Result<Vec<Vec<usize>>> {
        self.queries
            .iter()
            .map(|q| viterbi_decode(&q.emissions, &self.moments.mu).map(|(p, _)| p))
            .collect()
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::init(&config.encoder, seed)?,
            transition: TransitionGenParams::init(
                config.encoder.hidden,
                config.log_sigma_bias,
                rng::derive(seed, &[rng::tag("transition")]),
            ),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            transition: TransitionGenParams::zeros(self.transition.hidden()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.tensors().iter().chain(self.transition.tensors().iter())
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Encodes the episode, builds prototypes and transition moments and, when
    /// `sample_count > 0`, draws transition samples for every query sequence.
    pub fn forward_episode(
        &self,
        input: &EpisodeInput,
        sample_count: usize,
        seed: u64,
    ) -> Result<EpisodeForward> {
        let mut support_caches = Vec::with_capacity(input.support.len());
        let mut support_emb = Vec::with_capacity(input.support.len());
        for s in &input.support {
            let (emb, cache) = self.encoder.encode(&s.tokens, s.prompt_len)?;
            support_emb.push(emb.matrix);
            support_caches.push(cache);
        }
        let pairs: Vec<(&Matrix, &[Option<usize>])> = support_emb
            .iter()
            .zip(&input.support)
            .map(|(e, s)| (e, s.labels.as_slice()))
            .collect();
        let prototypes = compute_prototypes(&pairs, input.num_labels)?;
        let moments = self.transition.forward(&prototypes.vectors)?;
        let sigma = moments.sigma();
        let mut queries = Vec::with_capacity(input.query.len());
        for (qi, q) in input.query.iter().enumerate() {
            let (emb, cache) = self.encoder.encode(&q.tokens, 0)?;
            let emissions = emission_scores(&emb.matrix, &prototypes.vectors)?;
            let samples = if sample_count > 0 {
                Some(sample_transition_scores(
                    &moments.mu,
                    &sigma,
                    sample_count,
                    rng::derive(seed, &[qi as u64]),
                )?)
            } else {
                None
            };
            queries.push(QueryForward {
                cache,
                embeddings: emb.matrix,
                emissions,
                samples,
            });
        }
        Ok(EpisodeForward {
            support_caches,
            prototypes,
            moments,
            sigma,
            queries,
        })
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// gradient w.r.t. each query's emissions is `d_emissions[q]` and w.r.t.
    /// each of its transition samples is `d_samples[q][r]`.
    pub fn backward_episode(
        &self,
        input: &EpisodeInput,
        fwd: &EpisodeForward,
        d_emissions: &[Matrix],
        d_samples: &[Vec<Matrix>],
        grads: &mut ModelParams,
    ) {
        let l = input.num_labels;
        let h = self.encoder.config.hidden;
        let mut d_protos = Matrix::zeros(l, h);
        let mut d_mu = Matrix::zeros(l, l);
        let mut d_log_sigma = Matrix::zeros(l, l);
        for (qi, q) in fwd.queries.iter().enumerate() {
            let (d_q, d_p) = emission_scores_backward(&q.embeddings, &fwd.prototypes.vectors, &d_emissions[qi]);
            d_protos.add_scaled(1.0, &d_p);
            self.encoder.backward(&q.cache, &d_q, &mut grads.encoder);
            if let (Some(samples), Some(ds)) = (&q.samples, d_samples.get(qi)) {
                if !ds.is_empty() {
                    let (dm, dls) = samples.backward(&fwd.sigma, ds);
                    d_mu.add_scaled(1.0, &dm);
                    d_log_sigma.add_scaled(1.0, &dls);
                }
            }
        }
        self.transition.backward(
            &fwd.prototypes.vectors,
            &fwd.moments,
            &d_mu,
            &d_log_sigma,
            &mut grads.transition,
            &mut d_protos,
        );
        let labels: Vec<&[Option<usize>]> = input.support.iter().map(|s| s.labels.as_slice()).collect();
        let d_support = fwd.prototypes.backward(&d_protos, &labels);
        for (cache, d) in fwd.support_caches.iter().zip(&d_support) {
            self.encoder.backward(cache, d, &mut grads.encoder);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::sequence_nll_grad;
    use alloc::string::ToString;
    use alloc::vec;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    pub(crate) fn tiny_input() -> EpisodeInput {
        EpisodeInput {
            num_labels: 3,
            support: vec![
                SupportSeq {
                    tokens: toks(&["a", "hit", "b"]),
                    labels: vec![Some(0), Some(1), Some(0)],
                    prompt_len: 0,
                },
                SupportSeq {
                    tokens: toks(&["c", "hit", "up", "x"]),
                    labels: vec![Some(0), Some(1), Some(2), None],
                    prompt_len: 1,
                },
            ],
            query: vec![QuerySeq {
                tokens: toks(&["b", "hit", "up"]),
                gold: vec![0, 1, 2],
            }],
        }
    }

    fn tiny_model() -> ModelParams {
        ModelParams::init(
            &ModelConfig {
                encoder: EncoderConfig {
                    hidden: 4,
                    vocab_size: 32,
                    max_len: 16,
                    init_scale: 0.5,
                },
                log_sigma_bias: -1.0,
            },
            3,
        )
        .unwrap()
    }

    fn nll(model: &ModelParams, input: &EpisodeInput) -> f64 {
        let fwd = model.forward_episode(input, 1, 11).unwrap();
        let q = &fwd.queries[0];
        crate::crf::sequence_nll(&q.emissions, &q.samples.as_ref().unwrap().samples, &input.query[0].gold).unwrap()
    }

    #[test]
    fn episode_nll_gradient_matches_finite_differences() {
        let model = tiny_model();
        let input = tiny_input();
        let fwd = model.forward_episode(&input, 1, 11).unwrap();
        let q = &fwd.queries[0];
        let (_, d_em, d_tr) =
            sequence_nll_grad(&q.emissions, &q.samples.as_ref().unwrap().samples, &input.query[0].gold).unwrap();
        let mut grads = model.zeros_like();
        model.backward_episode(&input, &fwd, &[d_em], &[d_tr], &mut grads);
        let eps = 1e-6;
        let mut checked = 0;
        for t in 0..2 {
            for i in 0..grads.encoder.tensors()[t].len() {
                let g = grads.encoder.tensors()[t][i];
                let mut a = model.clone();
                a.encoder.tensors_mut()[t][i] += eps;
                let mut b = model.clone();
                b.encoder.tensors_mut()[t][i] -= eps;
                let fd = (nll(&a, &input) - nll(&b, &input)) / (2.0 * eps);
                assert!((fd - g).abs() <= 1e-4 * fd.abs().max(1e-2), "encoder {t}[{i}]: {fd} vs {g}");
                checked += usize::from(g != 0.0);
            }
        }
        for t in 0..5 {
            for i in 0..grads.transition.tensors()[t].len() {
                let g = grads.transition.tensors()[t][i];
                let mut a = model.clone();
                a.transition.tensors_mut()[t][i] += eps;
                let mut b = model.clone();
                b.transition.tensors_mut()[t][i] -= eps;
                let fd = (nll(&a, &input) - nll(&b, &input)) / (2.0 * eps);
                assert!((fd - g).abs() <= 1e-4 * fd.abs().max(1e-2), "transition {t}[{i}]: {fd} vs {g}");
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn decode_without_samples() {
        let model = tiny_model();
        let fwd = model.forward_episode(&tiny_input(), 0, 0).unwrap();
        assert!(fwd.queries[0].samples.is_none());
        let paths = fwd.decode().unwrap();
        assert_eq!(paths[0].len(), 3);
        let m = fwd.marginals(0).unwrap();
        assert_eq!(m.tokens(), 3);
    }
}
