//! Fine-tuning objective: task loss, retention-rate loss, distillation of
//! the teacher's prediction and of its final token representations.
//!
//! Every function accepts a batch laid out one sample per row and averages
//! over the rows.

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rate: f64,
    pub pred: f64,
    pub token: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rate: 2.0,
            pred: 0.5,
            token: 0.0,
        }
    }
}

fn rows_cols(v: &Var<'_>) -> (usize, usize) {
    let t = v.value();
    (t.rows(), t.cols())
}

/// Mean cross-entropy of `logits` (S×C) against integer labels.
pub fn task_loss<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (s, c) = rows_cols(logits);
    if labels.len() != s {
        return contract(format!("{} labels for {s} rows of logits", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return contract(format!("label {bad} outside 0..{c}"));
    }
    let mut onehot = vec![0.0; s * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let y = logits.tape().constant(Tensor::new(logits.shape(), onehot)?);
    Ok(logits.log_softmax().mul(&y)?.sum().scale(-1.0 / s as f64))
}

/// Mean over samples and stages of `(ρ_k − ρ̂_k)²`; `rho_hat` is S×K.
pub fn rate_loss<'t>(rho_hat: &Var<'t>, targets: &[f64]) -> Result<Var<'t>> {
    let (s, k) = rows_cols(rho_hat);
    if targets.len() != k {
        return Err(Error::Dimension {
            op: "rate_loss",
            left: rho_hat.shape(),
            right: vec![targets.len()],
        });
    }
    let t = rho_hat
        .tape()
        .constant(Tensor::new(rho_hat.shape(), targets.repeat(s))?);
    Ok(rho_hat.sub(&t)?.square().sum().scale(1.0 / (s * k) as f64))
}

/// Mean `KL(teacher ‖ student)` with the teacher as reference distribution.
pub fn pred_similarity<'t>(teacher: &Tensor, student_logits: &Var<'t>) -> Result<Var<'t>> {
    let shape = student_logits.shape();
    if teacher.shape() != shape.as_slice() {
        return Err(Error::Dimension {
            op: "pred_similarity",
            left: teacher.shape().to_vec(),
            right: shape,
        });
    }
    let s = teacher.rows();
    let tape = student_logits.tape();
    let log_y = student_logits.softmax().log_clamp(LOG_FLOOR);
    let entropy_term: f64 = teacher.data().iter().map(|&p| p * p.max(LOG_FLOOR).ln()).sum();
    let cross = log_y.mul(&tape.constant(teacher.clone()))?.sum();
    Ok(cross.neg().add_scalar(entropy_term).scale(1.0 / s as f64))
}

/// Mean over samples of `1 − cos(t′, t)`, each sample's retained tokens
/// flattened into one vector. `teacher[i]` and `student[i]` hold sample `i`.
pub fn token_similarity<'t>(teacher: &[Tensor], student: &[Var<'t>]) -> Result<Var<'t>> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return contract("token similarity needs one teacher per student sample");
    }
    let mut total: Option<Var<'t>> = None;
    for (t, s) in teacher.iter().zip(student) {
        if t.shape() != s.shape().as_slice() {
            return Err(Error::Dimension {
                op: "token_similarity",
                left: t.shape().to_vec(),
                right: s.shape(),
            });
        }
        let t_norm = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let s_sq = s.square().sum();
        if t_norm == 0.0 || s_sq.item() == 0.0 {
            return contract("cosine similarity of a zero-norm vector");
        }
        let dot = s.mul(&s.tape().constant(t.clone()))?.sum();
        let cos = dot.mul(&s_sq.sqrt().recip())?.scale(1.0 / t_norm);
        let term = cos.neg().add_scalar(1.0);
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty").scale(1.0 / teacher.len() as f64))
}

pub struct LossTerms<'t> {
    pub cls: Var<'t>,
    pub rate: Option<Var<'t>>,
    pub pred: Option<Var<'t>>,
    pub token: Option<Var<'t>>,
}

/// `L_cls + λ1·L_rate + λ2·L_pred + λ3·L_token`; absent terms count as zero.
pub fn total<'t>(terms: &LossTerms<'t>, w: &LossWeights) -> Result<Var<'t>> {
    let mut acc = terms.cls;
    for (term, weight) in [(terms.rate, w.rate), (terms.pred, w.pred), (terms.token, w.token)] {
        if let Some(t) = term {
            if weight != 0.0 {
                acc = acc.add(&t.scale(weight))?;
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[1, 5]));
        assert!((task_loss(&uniform, &[2]).unwrap().item() - 5f64.ln()).abs() < 1e-15);
        let sure = tape.constant(Tensor::matrix(1, 3, vec![50.0, 0.0, 0.0]).unwrap());
        assert!(task_loss(&sure, &[0]).unwrap().item() < 1e-20);
        assert!(task_loss(&sure, &[3]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let labels = [1, 0, 3];
        let l = task_loss(&tape.constant(Tensor::matrix(3, 4, raw.clone()).unwrap()), &labels).unwrap();
        let oracle: f64 = raw
            .chunks(4)
            .zip(labels)
            .map(|(r, y)| r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[y])
            .sum::<f64>()
            / 3.0;
        assert!((l.item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn rate_loss_examples() {
        let tape = Tape::new();
        let exact = tape.constant(Tensor::matrix(1, 3, vec![0.7, 0.49, 0.343]).unwrap());
        assert_eq!(rate_loss(&exact, &[0.7, 0.49, 0.343]).unwrap().item(), 0.0);
        let one = tape.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        assert!((rate_loss(&one, &[0.7]).unwrap().item() - 0.04).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<f64> = (0..15).map(|_| rng.random()).collect();
        let targets = [0.7, 0.49, 0.343];
        let l = rate_loss(&tape.constant(Tensor::matrix(5, 3, raw.clone()).unwrap()), &targets).unwrap();
        let mut oracle = 0.0;
        for m in 0..5 {
            for k in 0..3 {
                oracle += (targets[k] - raw[m * 3 + k]).powi(2);
            }
        }
        assert!((l.item() - oracle / 15.0).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 3, vec![0.2, -1.0, 0.5]).unwrap());
        let same = logits.softmax().value().as_ref().clone();
        assert!(pred_similarity(&same, &logits).unwrap().item().abs() < 1e-15);

        let even = tape.constant(Tensor::zeros(&[1, 2]));
        let t = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!((pred_similarity(&t, &even).unwrap().item() - 2f64.ln()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0).collect();
        let mut tp: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        for r in tp.chunks_mut(4) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= s);
        }
        let student = tape.constant(Tensor::matrix(2, 4, raw.clone()).unwrap());
        let kl = pred_similarity(&Tensor::matrix(2, 4, tp.clone()).unwrap(), &student).unwrap();
        let mut oracle = 0.0;
        for r in 0..2 {
            let z: f64 = raw[r * 4..r * 4 + 4].iter().map(|x| x.exp()).sum();
            for c in 0..4 {
                let y = raw[r * 4 + c].exp() / z;
                oracle += tp[r * 4 + c] * (tp[r * 4 + c] / y).ln();
            }
        }
        assert!((kl.item() - oracle / 2.0).abs() < 1e-12);
        assert!(kl.item() >= 0.0);
    }

    #[test]
    fn cosine_examples() {
        let tape = Tape::new();
        let t = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let same = tape.constant(t.clone());
        assert!(
            token_similarity(std::slice::from_ref(&t), &[same])
                .unwrap()
                .item()
                .abs()
                < 1e-15
        );
        let anti = tape.constant(t.map(|x| -x));
        assert!((token_similarity(std::slice::from_ref(&t), &[anti]).unwrap().item() - 2.0).abs() < 1e-15);
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(token_similarity(std::slice::from_ref(&t), &[zero]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let l = token_similarity(
            &[Tensor::matrix(3, 2, a.clone()).unwrap()],
            &[tape.constant(Tensor::matrix(3, 2, b.clone()).unwrap())],
        )
        .unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((l.item() - (1.0 - dot / (na * nb))).abs() < 1e-14);
    }

    #[test]
    fn weighted_total() {
        let tape = Tape::new();
        let c = |x: f64| tape.constant(Tensor::scalar(x));
        let terms = LossTerms {
            cls: c(1.5),
            rate: Some(c(0.1)),
            pred: Some(c(0.3)),
            token: Some(c(0.2)),
        };
        let zero = LossWeights {
            rate: 0.0,
            pred: 0.0,
            token: 0.0,
        };
        assert_eq!(total(&terms, &zero).unwrap().item(), 1.5);
        let w = LossWeights {
            rate: 2.0,
            pred: 0.5,
            token: 10.0,
        };
        assert!((total(&terms, &w).unwrap().item() - (1.5 + 0.2 + 0.15 + 2.0)).abs() < 1e-15);
        let only_cls = LossTerms {
            cls: c(0.7),
            rate: Some(c(0.0)),
            pred: Some(c(0.0)),
            token: None,
        };
        assert_eq!(total(&only_cls, &LossWeights::default()).unwrap().item(), 0.7);
    }
}
