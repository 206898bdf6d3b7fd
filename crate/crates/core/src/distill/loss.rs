use crate::crf::LabelDistribution;
use crate::math::{ln, Matrix};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Student probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dis: f64,
    pub l_stu: f64,
    pub l: f64,
}

pub fn total_loss(l_dis: f64, l_stu: f64) -> LossBreakdown {
    LossBreakdown {
        l_dis,
        l_stu,
        l: l_dis + l_stu,
    }
}

fn same_shape(a: &LabelDistribution, b: &LabelDistribution) -> Result<()> {
    if a.matrix().shape() != b.matrix().shape() {
        return Err(Error::ShapeMismatch("teacher and student distributions".into()));
    }
    Ok(())
}

/// Token-averaged cross entropy `−Σ p_tea log p_stu`.
pub fn distillation_loss(teacher: &LabelDistribution, student: &LabelDistribution) -> Result<f64> {
    same_shape(teacher, student)?;
    let (n, _) = teacher.matrix().shape();
    let total: f64 = teacher
        .matrix()
        .as_slice()
        .iter()
        .zip(student.matrix().as_slice())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| -p * ln(q.max(PROB_FLOOR)))
        .sum();
    Ok(total / n as f64)
}

/// Adds `scale · ∂l_dis/∂p_stu` into `d_student`.
pub fn distillation_loss_grad(
    teacher: &LabelDistribution,
    student: &LabelDistribution,
    scale: f64,
    d_student: &mut Matrix,
) {
    let n = teacher.tokens() as f64;
    for ((d, p), q) in d_student
        .as_mut_slice()
        .iter_mut()
        .zip(teacher.matrix().as_slice())
        .zip(student.matrix().as_slice())
    {
        if *p > 0.0 && *q > PROB_FLOOR {
            *d -= scale * p / (q * n);
        }
    }
}

/// Token-averaged negative log probability of the gold labels.
pub fn student_loss(student: &LabelDistribution, gold: &[usize]) -> Result<f64> {
    if gold.len() != student.tokens() || gold.iter().any(|&g| g >= student.num_labels()) {
        return Err(Error::ShapeMismatch("gold labels vs student distribution".into()));
    }
    let m = student.matrix();
    let total: f64 = gold
        .iter()
        .enumerate()
        .map(|(t, &y)| -ln(m[(t, y)].max(PROB_FLOOR)))
        .sum();
    Ok(total / gold.len() as f64)
}

pub fn student_loss_grad(student: &LabelDistribution, gold: &[usize], scale: f64, d_student: &mut Matrix) {
    let n = gold.len() as f64;
    let m = student.matrix();
    for (t, &y) in gold.iter().enumerate() {
        let q = m[(t, y)];
        if q > PROB_FLOOR {
            d_student[(t, y)] -= scale / (q * n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::Rng;

    fn dist(rows: &[Vec<f64>]) -> LabelDistribution {
        LabelDistribution::new(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn uniform_self_distillation_is_log_l() {
        let u = LabelDistribution::uniform(3, 4);
        assert!((distillation_loss(&u, &u).unwrap() - ln(4.0)).abs() < 1e-12);
    }

    #[test]
    fn perfect_one_hot_match_is_zero() {
        let p = LabelDistribution::one_hot(&[1, 0], 3);
        assert_eq!(distillation_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(student_loss(&p, &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_cross_entropy() {
        let tea = dist(&[vec![0.2, 0.3, 0.5]]);
        let stu = dist(&[vec![0.1, 0.6, 0.3]]);
        let expect = -(0.2 * ln(0.1) + 0.3 * ln(0.6) + 0.5 * ln(0.3));
        assert!((distillation_loss(&tea, &stu).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_student_mass_is_floored() {
        let tea = dist(&[vec![0.5, 0.5]]);
        let stu = dist(&[vec![1.0, 0.0]]);
        let l = distillation_loss(&tea, &stu).unwrap();
        assert!(l.is_finite());
        assert!((l - 0.5 * -ln(PROB_FLOOR)).abs() < 1e-9);
    }

    #[test]
    fn student_loss_examples() {
        let u = LabelDistribution::uniform(5, 11);
        assert!((student_loss(&u, &[0, 3, 10, 1, 1]).unwrap() - ln(11.0)).abs() < 1e-12);
        let p = dist(&[vec![0.7, 0.2, 0.1], vec![0.25, 0.25, 0.5]]);
        let expect = (-ln(0.2) - ln(0.5)) / 2.0;
        assert!((student_loss(&p, &[1, 2]).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn total_is_exact_sum() {
        assert_eq!(total_loss(0.0, 0.0).l, 0.0);
        assert_eq!(total_loss(1.5, 2.5).l, 4.0);
        let b = total_loss(0.1, 0.2);
        assert_eq!(b.l_dis + b.l_stu, b.l);
    }

    #[test]
    fn self_distillation_equals_entropy() {
        let mut rng = crate::rng::stream(31, &[]);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
            let rows: Vec<Vec<f64>> = raw
                .chunks(3)
                .map(|c| {
                    let s: f64 = c.iter().sum();
                    c.iter().map(|v| v / s).collect()
                })
                .collect();
            let p = dist(&rows);
            let entropy: f64 = rows
                .iter()
                .map(|r| -r.iter().map(|v| v * ln(*v)).sum::<f64>())
                .sum::<f64>()
                / 2.0;
            assert!((distillation_loss(&p, &p).unwrap() - entropy).abs() < 1e-9);
        }
    }
}
