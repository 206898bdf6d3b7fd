//! Toy contextual encoder standing in for a pretrained transformer.
//!
//! Tokens are hashed into an embedding table; each row is then mixed with
//! the sentence mean through a projection and a residual connection:
//! `out_j = e_j + tanh(P [e_j ; mean(e)])`. The [`TokenEncoder`] trait is the
//! adapter surface a pretrained backend would implement.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::{axpy, tanh, Matrix};
use crate::{rng, Error, Result};

pub const MASK_TOKEN: &str = "[mask]";
pub const SEP_TOKEN: &str = "[SEP]";
const MASK_ID: usize = 1;
const SEP_ID: usize = 2;
const RESERVED: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Standard deviation of the initial embedding entries.
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            hidden: 16,
            vocab_size: 4096,
            max_len: 128,
            init_scale: 0.5,
        }
    }

    /// Shape of a BERT-base adapter.
    pub fn full_scale() -> Self {
        Self {
            hidden: 768,
            vocab_size: 30522,
            max_len: 128,
            init_scale: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.vocab_size <= RESERVED || self.max_len == 0 {
            return Err(Error::InvalidConfig(String::from(
                "encoder needs positive hidden size and max length and a vocabulary beyond the reserved ids",
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::InvalidConfig(String::from("init_scale must be positive")));
        }
        Ok(())
    }

    /// Vocabulary id of `token`; words are lower-cased and hash-bucketed.
    pub fn token_id(&self, token: &str) -> usize {
        match token {
            MASK_TOKEN => MASK_ID,
            SEP_TOKEN => SEP_ID,
            _ => {
                let lower = token.to_lowercase();
                RESERVED + (rng::fnv1a(lower.as_bytes()) % (self.vocab_size - RESERVED) as u64) as usize
            }
        }
    }
}

/// Encoder output for one (possibly prompt-extended) sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub matrix: Matrix,
    /// Number of trailing rows that belong to an appended prompt.
    pub prompt_len: usize,
}

/// What the tagger needs from an encoder backend.
pub trait TokenEncoder {
    type Cache;

    fn hidden(&self) -> usize;

    fn encode(&self, tokens: &[String], prompt_len: usize) -> Result<(TokenEmbeddings, Self::Cache)>;

    /// Accumulates parameter gradients for upstream `d_out` into `grads`.
    fn backward(&self, cache: &Self::Cache, d_out: &Matrix, grads: &mut Self);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embeddings: Matrix,
    /// `H × 2H`, applied to `[e_j ; context]`.
    pub projection: Matrix,
}

/// Intermediate values of [`EncoderParams::encode`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    ids: Vec<usize>,
    raw: Matrix,
    context: Vec<f64>,
    activation: Matrix,
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag("encoder-init")]);
        let h = config.hidden;
        let mut embeddings = Matrix::zeros(config.vocab_size, h);
        embeddings
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = config.init_scale * rng.sample::<f64, _>(StandardNormal));
        let bound = 1.0 / crate::math::sqrt(2.0 * h as f64);
        let mut projection = Matrix::zeros(h, 2 * h);
        projection
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..bound));
        Ok(Self {
            config: config.clone(),
            embeddings,
            projection,
        })
    }

    /// Zero-valued parameters with the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embeddings: Matrix::zeros(self.embeddings.rows(), self.embeddings.cols()),
            projection: Matrix::zeros(self.projection.rows(), self.projection.cols()),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [self.embeddings.as_slice(), self.projection.as_slice()]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.embeddings.as_mut_slice(), self.projection.as_mut_slice()]
    }
}

impl TokenEncoder for EncoderParams {
    type Cache = EncoderCache;

    fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn encode(&self, tokens: &[String], prompt_len: usize) -> Result<(TokenEmbeddings, EncoderCache)> {
        let n = tokens.len();
        if n > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        if n == 0 || prompt_len > n {
            return Err(Error::ShapeMismatch("empty sequence or prompt longer than input".into()));
        }
        let h = self.config.hidden;
        let ids: Vec<usize> = tokens.iter().map(|t| self.config.token_id(t)).collect();
        let mut raw = Matrix::zeros(n, h);
        let mut context = vec![0.0; h];
        for (j, &id) in ids.iter().enumerate() {
            raw.row_mut(j).copy_from_slice(self.embeddings.row(id));
            axpy(&mut context, 1.0 / n as f64, self.embeddings.row(id));
        }
        let mut activation = Matrix::zeros(n, h);
        let mut out = raw.clone();
        let mut joined = vec![0.0; 2 * h];
        joined[h..].copy_from_slice(&context);
        for j in 0..n {
            joined[..h].copy_from_slice(raw.row(j));
            self.projection.matvec(&joined, activation.row_mut(j));
            for (a, o) in activation.row_mut(j).iter_mut().zip(out.row_mut(j)) {
                *a = tanh(*a);
                *o += *a;
            }
        }
        Ok((
            TokenEmbeddings {
                matrix: out,
                prompt_len,
            },
            EncoderCache {
                ids,
                raw,
                context,
                activation,
            },
        ))
    }

    fn backward(&self, cache: &EncoderCache, d_out: &Matrix, grads: &mut Self) {
        let h = self.config.hidden;
        let n = cache.ids.len();
        let mut d_raw = d_out.clone();
        let mut d_context = vec![0.0; h];
        let mut d_pre = vec![0.0; h];
        let mut joined = vec![0.0; 2 * h];
        let mut d_joined = vec![0.0; 2 * h];
        joined[h..].copy_from_slice(&cache.context);
        for j in 0..n {
            for k in 0..h {
                let a = cache.activation[(j, k)];
                d_pre[k] = d_out[(j, k)] * (1.0 - a * a);
            }
            joined[..h].copy_from_slice(cache.raw.row(j));
            grads.projection.rank1_acc(1.0, &d_pre, &joined);
            d_joined.iter_mut().for_each(|v| *v = 0.0);
            self.projection.matvec_t_acc(&d_pre, &mut d_joined);
            axpy(d_raw.row_mut(j), 1.0, &d_joined[..h]);
            axpy(&mut d_context, 1.0, &d_joined[h..]);
        }
        for (j, &id) in cache.ids.iter().enumerate() {
            axpy(grads.embeddings.row_mut(id), 1.0, d_raw.row(j));
            axpy(grads.embeddings.row_mut(id), 1.0 / n as f64, &d_context);
        }
    }
}
