//! Oracle suites: exhaustive path enumeration for the CRF and central finite
//! differences for every hand-written gradient.

use std::time::{Duration, Instant};

use cifsed_core::crf::{
    forward_log_partition, sequence_nll, sequence_nll_grad, token_marginals, viterbi_decode,
    TransitionSamples,
};
use cifsed_core::distill::{
    distillation_gradient, teacher_predict, DistillOptions, ModelSnapshot, SnapshotMeta,
    TeacherTargets, SNAPSHOT_VERSION,
};
use cifsed_core::encoder::EncoderConfig;
use cifsed_core::math::Matrix;
use cifsed_core::model::{EpisodeInput, ModelConfig, ModelParams, QuerySeq, SupportSeq};
use cifsed_core::rng;
use rand::Rng;
use serde::Serialize;

pub const ORACLE_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
const EPS: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub trials: usize,
    pub max_log_z_error: f64,
    pub max_marginal_error: f64,
    pub viterbi_mismatches: usize,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_log_z_error <= ORACLE_TOLERANCE
            && self.max_marginal_error <= ORACLE_TOLERANCE
            && self.viterbi_mismatches == 0
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
}

/// Every label path of length `n` over `l` labels, in lexicographic order.
fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![Vec::new()];
    for _ in 0..n {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..l).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    paths
}

fn brute_score(em: &Matrix, tr: &Matrix, path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &y) in path.iter().enumerate() {
        s += em[(t, y)];
        if t > 0 {
            s += tr[(path[t - 1], y)];
        }
    }
    s
}

/// Compares the CRF routines against enumeration over all `L^n` paths for
/// every `n ≤ 4`, `L ≤ 5`, cycling shapes until `trials` score sets are done.
pub fn crf_oracle(trials: usize, seed: u64) -> OracleReport {
    let start = Instant::now();
    let mut rng = rng::stream(seed, &[rng::tag("crf-oracle")]);
    let shapes: Vec<(usize, usize)> = (1..=4).flat_map(|n| (1..=5).map(move |l| (n, l))).collect();
    let mut report = OracleReport {
        trials,
        max_log_z_error: 0.0,
        max_marginal_error: 0.0,
        viterbi_mismatches: 0,
        elapsed: Duration::ZERO,
    };
    for trial in 0..trials {
        let (n, l) = shapes[trial % shapes.len()];
        let em = random_matrix(&mut rng, n, l);
        let tr = random_matrix(&mut rng, l, l);
        let paths = all_paths(n, l);
        let scores: Vec<f64> = paths.iter().map(|p| brute_score(&em, &tr, p)).collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = top + scores.iter().map(|s| (s - top).exp()).sum::<f64>().ln();
        let mut marg = vec![vec![0.0; l]; n];
        for (p, s) in paths.iter().zip(&scores) {
            let w = (s - log_z).exp();
            for (t, &y) in p.iter().enumerate() {
                marg[t][y] += w;
            }
        }
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });

        let got_z = forward_log_partition(&em, &tr).expect("valid scores");
        report.max_log_z_error = report.max_log_z_error.max((got_z - log_z).abs());
        let got_m = token_marginals(&em, std::slice::from_ref(&tr)).expect("valid scores");
        for (t, row) in marg.iter().enumerate() {
            for (y, v) in row.iter().enumerate() {
                report.max_marginal_error = report.max_marginal_error.max((got_m.matrix()[(t, y)] - v).abs());
            }
        }
        let (path, _) = viterbi_decode(&em, &tr).expect("valid scores");
        if path != paths[best] {
            report.viterbi_mismatches += 1;
        }
    }
    report.elapsed = start.elapsed();
    report
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.entries > 0 && self.max_rel_error <= GRADIENT_TOLERANCE
    }
}

fn rel_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(REL_FLOOR)
}

/// Checks `analytic` against central differences of `f` over every entry of
/// `at`.
fn check_slice(name: &str, at: &[f64], analytic: &[f64], f: &dyn Fn(&[f64]) -> f64) -> GradCheck {
    let mut worst: f64 = 0.0;
    let mut x = at.to_vec();
    for i in 0..at.len() {
        x[i] = at[i] + EPS;
        let up = f(&x);
        x[i] = at[i] - EPS;
        let down = f(&x);
        x[i] = at[i];
        worst = worst.max(rel_error((up - down) / (2.0 * EPS), analytic[i]));
    }
    GradCheck {
        name: name.to_string(),
        entries: at.len(),
        max_rel_error: worst,
    }
}

fn with_data(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), data.to_vec())
}

fn toy_model(seed: u64) -> ModelParams {
    ModelParams::init(
        &ModelConfig {
            encoder: EncoderConfig {
                hidden: 4,
                vocab_size: 24,
                max_len: 8,
                init_scale: 0.5,
            },
            log_sigma_bias: -1.0,
        },
        seed,
    )
    .expect("valid toy config")
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

/// Toy episode: one class (L = 3), three-token sequences.
fn toy_episode() -> EpisodeInput {
    EpisodeInput {
        num_labels: 3,
        support: vec![
            SupportSeq {
                tokens: words(&["he", "blew", "up"]),
                labels: vec![Some(0), Some(1), Some(2)],
                prompt_len: 0,
            },
            SupportSeq {
                tokens: words(&["they", "left", "[mask]"]),
                labels: vec![Some(0), Some(0), None],
                prompt_len: 1,
            },
        ],
        query: vec![QuerySeq {
            tokens: words(&["she", "blew", "up"]),
            gold: vec![0, 1, 2],
        }],
    }
}

fn snapshot(params: ModelParams) -> ModelSnapshot {
    ModelSnapshot {
        params,
        attention: Matrix::identity(3),
        meta: SnapshotMeta {
            version: SNAPSHOT_VERSION,
            session: 0,
            classes: Vec::new(),
            seed: 0,
        },
    }
}

/// Finite-difference checks of the CRF likelihood (emissions, μ, log σ), the
/// total distillation loss (encoder parameters) and the attention scores (W).
pub fn gradient_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = rng::stream(seed, &[rng::tag("gradient-checks")]);
    let (n, l) = (3, 3);
    let em = random_matrix(&mut rng, n, l);
    let mu = random_matrix(&mut rng, l, l);
    let log_sigma = random_matrix(&mut rng, l, l).map(|v| 0.5 * v - 1.0);
    let noise = vec![random_matrix(&mut rng, l, l)];
    let gold = [0, 1, 2];
    let nll = |em: &Matrix, mu: &Matrix, ls: &Matrix| {
        let samples = TransitionSamples::from_noise(mu, &ls.map(f64::exp), noise.clone()).expect("finite");
        sequence_nll(em, &samples.samples, &gold).expect("valid")
    };
    let samples = TransitionSamples::from_noise(&mu, &log_sigma.map(f64::exp), noise.clone()).expect("finite");
    let (_, d_em, d_tr) = sequence_nll_grad(&em, &samples.samples, &gold).expect("valid");
    let (d_mu, d_ls) = samples.backward(&log_sigma.map(f64::exp), &d_tr);

    let mut checks = vec![
        check_slice("sequence_nll / emissions", em.as_slice(), d_em.as_slice(), &|x| {
            nll(&with_data(&em, x), &mu, &log_sigma)
        }),
        check_slice("sequence_nll / mu", mu.as_slice(), d_mu.as_slice(), &|x| {
            nll(&em, &with_data(&mu, x), &log_sigma)
        }),
        check_slice("sequence_nll / log sigma", log_sigma.as_slice(), d_ls.as_slice(), &|x| {
            nll(&em, &mu, &with_data(&log_sigma, x))
        }),
    ];

    let input = toy_episode();
    let student = toy_model(seed ^ 1);
    let teachers = TeacherTargets {
        dists: vec![
            teacher_predict(&snapshot(toy_model(seed ^ 2)), &input, 1, 3).expect("valid"),
            teacher_predict(&snapshot(toy_model(seed ^ 3)), &input, 1, 4).expect("valid"),
        ],
        is_ancestor: vec![true, false],
    };
    let w = random_matrix(&mut rng, l, l).map(|v| 0.2 * v);
    let options = DistillOptions {
        use_attention: true,
        learn_attention: true,
        samples: 1,
        seed: 5,
    };
    let total = |s: &ModelParams, w: &Matrix| {
        distillation_gradient(s, &input, &teachers, w, options).expect("valid").loss.l
    };
    let g = distillation_gradient(&student, &input, &teachers, &w, options).expect("valid");
    for (t, name) in ["total loss / token embeddings", "total loss / encoder projection"]
        .into_iter()
        .enumerate()
    {
        let at = student.encoder.tensors()[t].to_vec();
        checks.push(check_slice(name, &at, g.grads.encoder.tensors()[t], &|x| {
            let mut s = student.clone();
            s.encoder.tensors_mut()[t].copy_from_slice(x);
            total(&s, &w)
        }));
    }
    checks.push(check_slice("total loss / attention W", w.as_slice(), g.d_attention.as_slice(), &|x| {
        total(&student, &with_data(&w, x))
    }));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_enumeration_counts() {
        assert_eq!(all_paths(4, 5).len(), 625);
        assert_eq!(all_paths(2, 3)[..4], [vec![0, 0], vec![0, 1], vec![0, 2], vec![1, 0]]);
    }

    #[test]
    fn oracle_passes_on_a_few_trials() {
        assert!(crf_oracle(20, 1).passed());
    }
}
