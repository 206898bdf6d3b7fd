use alloc::vec;
use alloc::vec::Vec;

use crate::math::{axpy, dot, Matrix};
use crate::{Error, Result};

/// One prototype per label of the session label space.
///
/// Labels without support tokens borrow a prototype: `I-c` falls back to
/// `B-c`, then to `O`; `B-c` falls back to `O`. `source[l]` names the label
/// whose tokens define row `l` (`None` only when not even `O` has tokens, in
/// which case the row is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Matrix,
    pub counts: Vec<usize>,
    pub source: Vec<Option<usize>>,
}

/// Per-label mean of support token embeddings. `support` pairs each
/// instance's embedding rows with a per-row label, `None` for rows (prompt
/// tokens) that take no part.
pub fn compute_prototypes(
    support: &[(&Matrix, &[Option<usize>])],
    num_labels: usize,
) -> Result<PrototypeSet> {
    let hidden = support
        .first()
        .map(|(m, _)| m.cols())
        .ok_or_else(|| Error::ShapeMismatch("empty support set".into()))?;
    let mut sums = Matrix::zeros(num_labels, hidden);
    let mut counts = vec![0usize; num_labels];
    for (emb, labels) in support {
        if emb.rows() != labels.len() || emb.cols() != hidden {
            return Err(Error::ShapeMismatch("support embeddings vs labels".into()));
        }
        for (t, label) in labels.iter().enumerate() {
            if let Some(l) = *label {
                if l >= num_labels {
                    return Err(Error::ShapeMismatch("support label outside the space".into()));
                }
                axpy(sums.row_mut(l), 1.0, emb.row(t));
                counts[l] += 1;
            }
        }
    }
    let classes = (num_labels - 1) / 2;
    let mut source: Vec<Option<usize>> = (0..num_labels)
        .map(|l| (counts[l] > 0).then_some(l))
        .collect();
    for l in 1..num_labels {
        if source[l].is_none() {
            let begin = (l > classes).then(|| l - classes);
            let borrowed = begin.and_then(|b| source[b]);
            source[l] = borrowed.or(source[0]);
            // Missing I- labels are routine with single-token triggers.
            if borrowed.is_some() {
                log::debug!("label {l} has no support tokens; borrowing prototype {:?}", source[l]);
            } else {
                log::warn!("label {l} has no support tokens; borrowing prototype {:?}", source[l]);
            }
        }
    }
    let mut vectors = Matrix::zeros(num_labels, hidden);
    for l in 0..num_labels {
        if let Some(s) = source[l] {
            let inv = 1.0 / counts[s] as f64;
            for (v, x) in vectors.row_mut(l).iter_mut().zip(sums.row(s)) {
                *v = x * inv;
            }
        }
    }
    Ok(PrototypeSet {
        vectors,
        counts,
        source,
    })
}

impl PrototypeSet {
    pub fn num_labels(&self) -> usize {
        self.vectors.rows()
    }

    /// Gradient w.r.t. each support instance's embedding rows, given the
    /// gradient w.r.t. the prototype rows.
    pub fn backward(&self, d_protos: &Matrix, support_labels: &[&[Option<usize>]]) -> Vec<Matrix> {
        let hidden = self.vectors.cols();
        let mut owned = Matrix::zeros(self.num_labels(), hidden);
        for l in 0..self.num_labels() {
            if let Some(s) = self.source[l] {
                axpy(owned.row_mut(s), 1.0 / self.counts[s] as f64, d_protos.row(l));
            }
        }
        support_labels
            .iter()
            .map(|labels| {
                let mut d = Matrix::zeros(labels.len(), hidden);
                for (t, label) in labels.iter().enumerate() {
                    if let Some(l) = *label {
                        d.row_mut(t).copy_from_slice(owned.row(l));
                    }
                }
                d
            })
            .collect()
    }
}

/// `scores[t][l] = ⟨query_t, prototype_l⟩`.
pub fn emission_scores(query: &Matrix, prototypes: &Matrix) -> Result<Matrix> {
    if query.cols() != prototypes.cols() {
        return Err(Error::ShapeMismatch("query and prototype widths differ".into()));
    }
    let mut out = Matrix::zeros(query.rows(), prototypes.rows());
    for t in 0..query.rows() {
        for l in 0..prototypes.rows() {
            out[(t, l)] = dot(query.row(t), prototypes.row(l));
        }
    }
    Ok(out)
}

/// Returns `(∂/∂query, ∂/∂prototypes)` for upstream `d_scores`.
pub fn emission_scores_backward(
    query: &Matrix,
    prototypes: &Matrix,
    d_scores: &Matrix,
) -> (Matrix, Matrix) {
    let mut d_query = Matrix::zeros(query.rows(), query.cols());
    let mut d_protos = Matrix::zeros(prototypes.rows(), prototypes.cols());
    for t in 0..query.rows() {
        for l in 0..prototypes.rows() {
            let g = d_scores[(t, l)];
            if g != 0.0 {
                axpy(d_query.row_mut(t), g, prototypes.row(l));
                axpy(d_protos.row_mut(l), g, query.row(t));
            }
        }
    }
    (d_query, d_protos)
}
