use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math::{exp, logsumexp, Matrix};
use crate::{Error, Result};

/// Per-token posteriors over the label space; rows are distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution(Matrix);

impl LabelDistribution {
    pub const ROW_TOLERANCE: f64 = 1e-6;

    pub fn new(m: Matrix) -> Result<Self> {
        for row in m.iter_rows() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite())
                || (sum - 1.0).abs() > Self::ROW_TOLERANCE
            {
                return Err(Error::ShapeMismatch(
                    "label distribution rows must be non-negative and sum to 1".into(),
                ));
            }
        }
        Ok(Self(m))
    }

    /// One-hot rows for `labels` over `num_labels`.
    pub fn one_hot(labels: &[usize], num_labels: usize) -> Self {
        let mut m = Matrix::zeros(labels.len(), num_labels);
        for (t, &l) in labels.iter().enumerate() {
            m[(t, l)] = 1.0;
        }
        Self(m)
    }

    pub fn uniform(tokens: usize, num_labels: usize) -> Self {
        Self(Matrix::filled(tokens, num_labels, 1.0 / num_labels as f64))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn num_labels(&self) -> usize {
        self.0.cols()
    }
}

fn check_scores(emissions: &Matrix, transitions: &Matrix) -> Result<()> {
    let l = emissions.cols();
    if emissions.rows() == 0 || l == 0 {
        return Err(Error::ShapeMismatch("empty emission matrix".into()));
    }
    if transitions.shape() != (l, l) {
        return Err(Error::ShapeMismatch("transition matrix must be L x L".into()));
    }
    if emissions.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("emissions"));
    }
    if transitions.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("transitions"));
    }
    Ok(())
}

/// Score of one label path: Σ emissions + Σ transitions between neighbours.
pub fn path_score(emissions: &Matrix, transitions: &Matrix, path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &l) in path.iter().enumerate() {
        s += emissions[(t, l)];
        if t > 0 {
            s += transitions[(path[t - 1], l)];
        }
    }
    s
}

/// Log-space forward and backward tables, optionally carrying a tangent
/// (directional derivative) for a perturbation of the emissions.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub log_z: f64,
    alpha: Matrix,
    beta: Matrix,
    tangent: Option<Tangents>,
}

#[derive(Debug, Clone)]
struct Tangents {
    direction: Matrix,
    log_z: f64,
    alpha: Matrix,
    beta: Matrix,
}

impl ForwardBackward {
    pub fn new(emissions: &Matrix, transitions: &Matrix) -> Result<Self> {
        check_scores(emissions, transitions)?;
        Ok(Self::run(emissions, transitions, None))
    }

    fn run(em: &Matrix, tr: &Matrix, direction: Option<&Matrix>) -> Self {
        let (n, l) = em.shape();
        let mut alpha = Matrix::zeros(n, l);
        let mut beta = Matrix::zeros(n, l);
        let mut alpha_t = Matrix::zeros(n, l);
        let mut beta_t = Matrix::zeros(n, l);
        let mut buf = vec![0.0; l];
        alpha.row_mut(0).copy_from_slice(em.row(0));
        if let Some(g) = direction {
            alpha_t.row_mut(0).copy_from_slice(g.row(0));
        }
        for t in 1..n {
            for b in 0..l {
                for a in 0..l {
                    buf[a] = alpha[(t - 1, a)] + tr[(a, b)];
                }
                let lse = logsumexp(&buf);
                alpha[(t, b)] = em[(t, b)] + lse;
                if let Some(g) = direction {
                    let mut acc = 0.0;
                    for a in 0..l {
                        acc += exp(buf[a] - lse) * alpha_t[(t - 1, a)];
                    }
                    alpha_t[(t, b)] = g[(t, b)] + acc;
                }
            }
        }
        for t in (0..n.saturating_sub(1)).rev() {
            for a in 0..l {
                for b in 0..l {
                    buf[b] = tr[(a, b)] + em[(t + 1, b)] + beta[(t + 1, b)];
                }
                let lse = logsumexp(&buf);
                beta[(t, a)] = lse;
                if let Some(g) = direction {
                    let mut acc = 0.0;
                    for b in 0..l {
                        acc += exp(buf[b] - lse) * (g[(t + 1, b)] + beta_t[(t + 1, b)]);
                    }
                    beta_t[(t, a)] = acc;
                }
            }
        }
        let last = alpha.row(n - 1);
        let log_z = logsumexp(last);
        let tangent = direction.map(|g| {
            let lz_t = last
                .iter()
                .zip(alpha_t.row(n - 1))
                .map(|(&a, &at)| exp(a - log_z) * at)
                .sum();
            Tangents {
                direction: g.clone(),
                log_z: lz_t,
                alpha: alpha_t,
                beta: beta_t,
            }
        });
        Self {
            log_z,
            alpha,
            beta,
            tangent,
        }
    }

    pub fn marginals(&self) -> Matrix {
        let (n, l) = self.alpha.shape();
        let mut m = Matrix::zeros(n, l);
        for t in 0..n {
            for k in 0..l {
                m[(t, k)] = exp(self.alpha[(t, k)] + self.beta[(t, k)] - self.log_z);
            }
        }
        m
    }

    /// Σₜ P(yₜ₋₁ = a, yₜ = b), the expected transition counts.
    pub fn expected_transitions(&self, em: &Matrix, tr: &Matrix) -> Matrix {
        let (n, l) = em.shape();
        let mut out = Matrix::zeros(l, l);
        for t in 1..n {
            for a in 0..l {
                let left = self.alpha[(t - 1, a)] - self.log_z;
                for b in 0..l {
                    out[(a, b)] += exp(left + tr[(a, b)] + em[(t, b)] + self.beta[(t, b)]);
                }
            }
        }
        out
    }

    /// Directional derivatives of the marginals and expected transition
    /// counts along the stored emission tangent.
    fn tangent_outputs(&self, em: &Matrix, tr: &Matrix) -> (Matrix, Matrix) {
        let tg = self.tangent.as_ref().expect("tangent pass");
        let (n, l) = em.shape();
        let mut d_em = Matrix::zeros(n, l);
        for t in 0..n {
            for k in 0..l {
                let mu = exp(self.alpha[(t, k)] + self.beta[(t, k)] - self.log_z);
                d_em[(t, k)] = mu * (tg.alpha[(t, k)] + tg.beta[(t, k)] - tg.log_z);
            }
        }
        let mut d_tr = Matrix::zeros(l, l);
        for t in 1..n {
            for a in 0..l {
                let left = self.alpha[(t - 1, a)] - self.log_z;
                let left_t = tg.alpha[(t - 1, a)] - tg.log_z;
                for b in 0..l {
                    let xi = exp(left + tr[(a, b)] + em[(t, b)] + self.beta[(t, b)]);
                    d_tr[(a, b)] += xi * (left_t + tg.direction[(t, b)] + tg.beta[(t, b)]);
                }
            }
        }
        (d_em, d_tr)
    }
}

/// log Σ over all label paths of exp(path score).
pub fn forward_log_partition(emissions: &Matrix, transitions: &Matrix) -> Result<f64> {
    Ok(ForwardBackward::new(emissions, transitions)?.log_z)
}

fn check_gold(emissions: &Matrix, gold: &[usize]) -> Result<()> {
    if gold.len() != emissions.rows() {
        return Err(Error::ShapeMismatch("gold length differs from sequence length".into()));
    }
    if gold.iter().any(|&g| g >= emissions.cols()) {
        return Err(Error::ShapeMismatch("gold label outside the label space".into()));
    }
    Ok(())
}

/// Mean over transition samples of `log Z − score(gold)`.
pub fn sequence_nll(emissions: &Matrix, samples: &[Matrix], gold: &[usize]) -> Result<f64> {
    Ok(sequence_nll_grad(emissions, samples, gold)?.0)
}

/// [`sequence_nll`] with its gradient w.r.t. the emissions and each sample.
pub fn sequence_nll_grad(
    emissions: &Matrix,
    samples: &[Matrix],
    gold: &[usize],
) -> Result<(f64, Matrix, Vec<Matrix>)> {
    if samples.is_empty() {
        return Err(Error::ShapeMismatch("at least one transition sample".into()));
    }
    check_gold(emissions, gold)?;
    let r = samples.len() as f64;
    let (n, l) = emissions.shape();
    let mut loss = 0.0;
    let mut d_em = Matrix::zeros(n, l);
    let mut d_tr = Vec::with_capacity(samples.len());
    for tr in samples {
        let fb = ForwardBackward::new(emissions, tr)?;
        loss += (fb.log_z - path_score(emissions, tr, gold)) / r;
        d_em.add_scaled(1.0 / r, &fb.marginals());
        let mut dt = fb.expected_transitions(emissions, tr);
        for t in 1..n {
            dt[(gold[t - 1], gold[t])] -= 1.0;
        }
        dt.as_mut_slice().iter_mut().for_each(|v| *v /= r);
        d_tr.push(dt);
    }
    for (t, &g) in gold.iter().enumerate() {
        d_em[(t, g)] -= 1.0;
    }
    Ok((loss.max(0.0), d_em, d_tr))
}

/// Forward–backward token marginals averaged over the transition samples.
pub fn token_marginals(emissions: &Matrix, samples: &[Matrix]) -> Result<LabelDistribution> {
    if samples.is_empty() {
        return Err(Error::ShapeMismatch("at least one transition sample".into()));
    }
    let mut acc = Matrix::zeros(emissions.rows(), emissions.cols());
    for tr in samples {
        acc.add_scaled(1.0 / samples.len() as f64, &ForwardBackward::new(emissions, tr)?.marginals());
    }
    Ok(LabelDistribution(acc))
}

/// Vector–Jacobian product of the token marginals of one CRF: given
/// `upstream = ∂f/∂marginals`, returns `∂f/∂emissions` and `∂f/∂transitions`.
///
/// Marginals are the gradient of `log Z`, so this is a Hessian–vector
/// product of `log Z`, evaluated as a forward-mode derivative of the
/// forward–backward pass along `upstream`.
pub fn marginals_vjp(
    emissions: &Matrix,
    transitions: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_scores(emissions, transitions)?;
    if upstream.shape() != emissions.shape() {
        return Err(Error::ShapeMismatch("upstream gradient shape".into()));
    }
    let fb = ForwardBackward::run(emissions, transitions, Some(upstream));
    Ok(fb.tangent_outputs(emissions, transitions))
}

/// Highest-scoring label path and its score. Ties go to the lower label index.
pub fn viterbi_decode(emissions: &Matrix, transitions: &Matrix) -> Result<(Vec<usize>, f64)> {
    check_scores(emissions, transitions)?;
    let (n, l) = emissions.shape();
    let mut delta = emissions.row(0).to_vec();
    let mut next = vec![0.0; l];
    let mut back = vec![0usize; n * l];
    for t in 1..n {
        for b in 0..l {
            let mut best = 0;
            let mut best_score = delta[0] + transitions[(0, b)];
            for a in 1..l {
                let s = delta[a] + transitions[(a, b)];
                if s > best_score {
                    best = a;
                    best_score = s;
                }
            }
            back[t * l + b] = best;
            next[b] = best_score + emissions[(t, b)];
        }
        core::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    for k in 1..l {
        if delta[k] > delta[last] {
            last = k;
        }
    }
    let score = delta[last];
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t * l + path[t]];
    }
    Ok((path, score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ln;
    use rand::Rng;

    /// Every label path of length `n` over `l` labels.
    fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let total = l.pow(n as u32);
        for mut code in 0..total {
            let mut p = vec![0; n];
            for slot in p.iter_mut().rev() {
                *slot = code % l;
                code /= l;
            }
            out.push(p);
        }
        out
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    struct Brute {
        log_z: f64,
        marginals: Matrix,
        best: Vec<usize>,
    }

    fn brute(em: &Matrix, tr: &Matrix) -> Brute {
        let (n, l) = em.shape();
        let paths = all_paths(n, l);
        let scores: Vec<f64> = paths.iter().map(|p| path_score(em, tr, p)).collect();
        let log_z = logsumexp(&scores);
        let mut marginals = Matrix::zeros(n, l);
        for (p, s) in paths.iter().zip(&scores) {
            let w = exp(s - log_z);
            for (t, &k) in p.iter().enumerate() {
                marginals[(t, k)] += w;
            }
        }
        let best_i = (0..paths.len())
            .fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        Brute {
            log_z,
            marginals,
            best: paths[best_i].clone(),
        }
    }

    #[test]
    fn single_token_reduces_to_softmax() {
        let em = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]);
        let tr = Matrix::zeros(3, 3);
        let lz = forward_log_partition(&em, &tr).unwrap();
        assert!((lz - logsumexp(em.row(0))).abs() < 1e-12);
        let m = token_marginals(&em, core::slice::from_ref(&tr)).unwrap();
        let sm = crate::math::softmax(em.row(0));
        for k in 0..3 {
            assert!((m.matrix()[(0, k)] - sm[k]).abs() < 1e-12);
        }
        assert_eq!(viterbi_decode(&em, &tr).unwrap().0, vec![2]);
    }

    #[test]
    fn uniform_scores_have_closed_form() {
        let em = Matrix::zeros(3, 4);
        let tr = Matrix::zeros(4, 4);
        assert!((forward_log_partition(&em, &tr).unwrap() - 3.0 * ln(4.0)).abs() < 1e-12);
        let m = token_marginals(&em, &[tr]).unwrap();
        assert!(m.matrix().as_slice().iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn nan_input_rejected() {
        let mut em = Matrix::zeros(2, 2);
        em[(1, 1)] = f64::NAN;
        assert_eq!(
            forward_log_partition(&em, &Matrix::zeros(2, 2)),
            Err(Error::NonFinite("emissions"))
        );
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = crate::rng::stream(1, &[]);
        for _ in 0..40 {
            let n = rng.random_range(1..=4);
            let l = rng.random_range(1..=5);
            let em = random(&mut rng, n, l);
            let tr = random(&mut rng, l, l);
            let b = brute(&em, &tr);
            let fb = ForwardBackward::new(&em, &tr).unwrap();
            assert!((fb.log_z - b.log_z).abs() < 1e-8);
            let m = fb.marginals();
            for (x, y) in m.as_slice().iter().zip(b.marginals.as_slice()) {
                assert!((x - y).abs() < 1e-8);
            }
            let (path, score) = viterbi_decode(&em, &tr).unwrap();
            assert_eq!(path, b.best);
            assert!((score - path_score(&em, &tr, &path)).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_for_two_tokens_by_enumeration() {
        let mut rng = crate::rng::stream(2, &[]);
        let em = random(&mut rng, 2, 2);
        let tr = random(&mut rng, 2, 2);
        let gold = [1, 0];
        let paths = all_paths(2, 2);
        let z: f64 = paths.iter().map(|p| exp(path_score(&em, &tr, p))).sum();
        let expected = -ln(exp(path_score(&em, &tr, &gold)) / z);
        let nll = sequence_nll(&em, &[tr], &gold).unwrap();
        assert!((nll - expected).abs() < 1e-12);
    }

    #[test]
    fn single_label_space_has_zero_loss() {
        let em = Matrix::from_rows(&[vec![0.7], vec![-3.0], vec![2.0]]);
        let tr = Matrix::from_rows(&[vec![1.5]]);
        assert_eq!(sequence_nll(&em, &[tr], &[0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn viterbi_is_shift_invariant() {
        let mut rng = crate::rng::stream(3, &[]);
        let em = random(&mut rng, 4, 5);
        let tr = random(&mut rng, 5, 5);
        let shifted_em = em.map(|v| v + 3.25);
        let shifted_tr = tr.map(|v| v + 3.25);
        assert_eq!(
            viterbi_decode(&em, &tr).unwrap().0,
            viterbi_decode(&shifted_em, &shifted_tr).unwrap().0
        );
    }

    #[test]
    fn viterbi_ties_prefer_lower_labels() {
        let em = Matrix::zeros(3, 3);
        let tr = Matrix::zeros(3, 3);
        assert_eq!(viterbi_decode(&em, &tr).unwrap().0, vec![0, 0, 0]);
    }

    fn finite_diff(f: impl Fn(&Matrix) -> f64, at: &Matrix) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(at.rows(), at.cols());
        for i in 0..at.as_slice().len() {
            let mut p = at.clone();
            p.as_mut_slice()[i] += h;
            let mut q = at.clone();
            q.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&p) - f(&q)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(4, &[]);
        let em = random(&mut rng, 3, 3);
        let tr = random(&mut rng, 3, 3);
        let gold = [2, 0, 1];
        let (_, d_em, d_tr) = sequence_nll_grad(&em, core::slice::from_ref(&tr), &gold).unwrap();
        let fd_em = finite_diff(|e| sequence_nll(e, core::slice::from_ref(&tr), &gold).unwrap(), &em);
        let fd_tr = finite_diff(|t| sequence_nll(&em, core::slice::from_ref(t), &gold).unwrap(), &tr);
        assert_close(&d_em, &fd_em, 1e-5);
        assert_close(&d_tr[0], &fd_tr, 1e-5);
    }

    #[test]
    fn marginal_vjp_matches_finite_differences() {
        let mut rng = crate::rng::stream(5, &[]);
        let em = random(&mut rng, 4, 3);
        let tr = random(&mut rng, 3, 3);
        let up = random(&mut rng, 4, 3);
        let f = |e: &Matrix, t: &Matrix| {
            let m = ForwardBackward::new(e, t).unwrap().marginals();
            crate::math::dot(m.as_slice(), up.as_slice())
        };
        let (d_em, d_tr) = marginals_vjp(&em, &tr, &up).unwrap();
        assert_close(&d_em, &finite_diff(|e| f(e, &tr), &em), 1e-5);
        assert_close(&d_tr, &finite_diff(|t| f(&em, t), &tr), 1e-5);
    }
}
