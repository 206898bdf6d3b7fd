use alloc::vec::Vec;

use crate::crf::LabelDistribution;
use crate::math::{softmax, Matrix};
use crate::{Error, Result};

fn check(p: &LabelDistribution, gold: &[usize], w: &Matrix) -> Result<()> {
    let l = p.num_labels();
    if gold.len() != p.tokens() {
        return Err(Error::ShapeMismatch("gold length vs distribution rows".into()));
    }
    if w.rows() < l || w.cols() < l {
        return Err(Error::ShapeMismatch("attention matrix smaller than label space".into()));
    }
    if gold.iter().any(|&g| g >= l) {
        return Err(Error::ShapeMismatch("gold label outside the label space".into()));
    }
    Ok(())
}

/// `s = Σₜ p[t]ᵀ W onehot(y[t])`, reading the top-left `L × L` block of `W`.
pub fn attention_scores(p: &LabelDistribution, gold: &[usize], w: &Matrix) -> Result<f64> {
    check(p, gold, w)?;
    let pm = p.matrix();
    Ok(gold
        .iter()
        .enumerate()
        .map(|(t, &y)| (0..pm.cols()).map(|a| pm[(t, a)] * w[(a, y)]).sum::<f64>())
        .sum())
}

/// Adds `scale · ∂s/∂W` into `d_w`.
pub fn attention_scores_grad(p: &LabelDistribution, gold: &[usize], scale: f64, d_w: &mut Matrix) {
    let pm = p.matrix();
    for (t, &y) in gold.iter().enumerate() {
        for a in 0..pm.cols() {
            d_w[(a, y)] += scale * pm[(t, a)];
        }
    }
}

/// Softmax over teacher scores; a lone teacher gets weight 1.
pub fn teacher_weights(scores: &[f64]) -> Vec<f64> {
    match scores.len() {
        0 => Vec::new(),
        1 => alloc::vec![1.0],
        _ => softmax(scores),
    }
}

/// `Σᵢ αᵢ pᵢ`.
pub fn combine_teachers(weights: &[f64], dists: &[&LabelDistribution]) -> Result<LabelDistribution> {
    let first = dists
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no teacher distributions".into()))?;
    if weights.len() != dists.len() {
        return Err(Error::ShapeMismatch("one weight per teacher".into()));
    }
    let shape = first.matrix().shape();
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (&a, p) in weights.iter().zip(dists) {
        if p.matrix().shape() != shape {
            return Err(Error::ShapeMismatch("teacher distributions differ in shape".into()));
        }
        out.add_scaled(a, p.matrix());
    }
    LabelDistribution::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::exp;
    use alloc::vec;
    use rand::Rng;

    fn dist(rows: &[Vec<f64>]) -> LabelDistribution {
        LabelDistribution::new(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn identity_and_zero_matrices() {
        let gold = [0, 2, 1];
        let p = LabelDistribution::one_hot(&gold, 3);
        assert_eq!(attention_scores(&p, &gold, &Matrix::identity(3)).unwrap(), 3.0);
        assert_eq!(attention_scores(&p, &gold, &Matrix::zeros(5, 5)).unwrap(), 0.0);
        assert!(attention_scores(&p, &[0, 3, 1], &Matrix::identity(3)).is_err());
    }

    #[test]
    fn bilinear_matches_triple_loop() {
        let mut rng = crate::rng::stream(21, &[]);
        let p = dist(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]);
        let w = Matrix::from_vec(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
        let gold = [2, 0];
        let mut expect = 0.0;
        for t in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    let y = if gold[t] == b { 1.0 } else { 0.0 };
                    expect += p.matrix()[(t, a)] * w[(a, b)] * y;
                }
            }
        }
        assert!((attention_scores(&p, &gold, &w).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn weights_examples() {
        assert!(teacher_weights(&[0.7, 0.7]).iter().all(|w| (w - 0.5).abs() < 1e-15));
        assert_eq!(teacher_weights(&[3.0]), vec![1.0]);
        let w = teacher_weights(&[1.0, 0.0]);
        let e = exp(1.0);
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn combination_examples() {
        let p1 = dist(&[vec![1.0, 0.0], vec![0.2, 0.8]]);
        let p2 = dist(&[vec![0.0, 1.0], vec![0.6, 0.4]]);
        assert_eq!(combine_teachers(&[1.0, 0.0], &[&p1, &p2]).unwrap(), p1);
        assert_eq!(combine_teachers(&[0.3, 0.7], &[&p1, &p1]).unwrap().matrix().as_slice()[..2], [1.0, 0.0]);
        let avg = combine_teachers(&[0.5, 0.5], &[&p1, &p2]).unwrap();
        let expect = [0.5, 0.5, 0.4, 0.6];
        for (x, y) in avg.matrix().as_slice().iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
        let p3 = dist(&[vec![1.0, 0.0]]);
        assert!(combine_teachers(&[0.5, 0.5], &[&p1, &p3]).is_err());
    }
}
