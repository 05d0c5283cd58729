//! Training objectives: cross-entropy, label smoothing, the LST
//! teacher-mixing loss, and the KLD/cross-entropy gradient equivalence check.

use crate::autodiff::{Tape, Var};
use crate::cor::TeacherOutput;
use crate::error::{Error, Result};
use crate::tensor::{matmul_tn_acc, Tensor};

/// Floor applied to probabilities before taking logs. Clamps are counted in
/// the breakdown, never silent.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetProvenance {
    Hard,
    UniformSmoothed,
    Teacher,
    Mixed,
}

/// Per-position soft target rows.
#[derive(Debug, Clone)]
pub struct SoftTarget {
    /// [T' x K]; each row sums to 1.
    pub rows: Tensor,
    pub provenance: TargetProvenance,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Sum over non-excluded positions.
    pub total: f64,
    pub per_position: Vec<f64>,
    /// Non-padding positions contributing to the total.
    pub token_count: usize,
    /// Number of clamped log arguments (zero probability under nonzero
    /// target weight).
    pub floored: usize,
}

impl LossBreakdown {
    pub fn per_token(&self) -> f64 {
        if self.token_count == 0 {
            0.0
        } else {
            self.total / self.token_count as f64
        }
    }
}

/// Eq.-style mixed loss: per position t,
/// -sum_k (lambda * onehot(x_t) + (1 - lambda) * teacher_k) * log p_k.
/// `active` marks positions included in the loss (padding excluded);
/// `None` includes every row.
pub fn lst_loss(
    student_probs: &Tensor,
    hard_labels: &[usize],
    teacher: &TeacherOutput,
    lambda: f64,
    active: Option<&[bool]>,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0,1]")));
    }
    let (rows, k) = (student_probs.rows(), student_probs.cols());
    if hard_labels.len() != rows || !teacher.probs.same_shape(student_probs) {
        return Err(Error::ShapeMismatch(
            "student/teacher/label row mismatch".into(),
        ));
    }
    let mut per_position = Vec::with_capacity(rows);
    let mut total = 0.0;
    let mut token_count = 0;
    let mut floored = 0;
    for r in 0..rows {
        if let Some(a) = active {
            if !a[r] {
                per_position.push(0.0);
                continue;
            }
        }
        let srow = student_probs.row(r);
        let trow = teacher.probs.row(r);
        let mut loss = 0.0;
        for c in 0..k {
            let w = lambda * f64::from(c == hard_labels[r]) + (1.0 - lambda) * trow[c];
            if w == 0.0 {
                continue;
            }
            if srow[c] < PROB_FLOOR {
                floored += 1;
            }
            loss -= w * srow[c].max(PROB_FLOOR).ln();
        }
        per_position.push(loss);
        total += loss;
        token_count += 1;
    }
    Ok(LossBreakdown {
        total,
        per_position,
        token_count,
        floored,
    })
}

/// (1 - eps) * one-hot + eps * uniform(1/K).
pub fn label_smoothing_targets(hard_labels: &[usize], k: usize, eps: f64) -> Result<SoftTarget> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Contract(format!("smoothing {eps} outside [0,1)")));
    }
    let mut rows = Tensor::zeros(vec![hard_labels.len(), k]);
    for (r, &label) in hard_labels.iter().enumerate() {
        for c in 0..k {
            rows.data[r * k + c] = eps / k as f64;
        }
        rows.data[r * k + label] += 1.0 - eps;
    }
    Ok(SoftTarget {
        rows,
        provenance: if eps == 0.0 {
            TargetProvenance::Hard
        } else {
            TargetProvenance::UniformSmoothed
        },
    })
}

/// Mixed LST target rows for the differentiable path.
pub fn mixed_targets(
    hard_labels: &[usize],
    teacher: &TeacherOutput,
    lambda: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0,1]")));
    }
    let (rows, k) = (teacher.probs.rows(), teacher.probs.cols());
    if hard_labels.len() != rows {
        return Err(Error::ShapeMismatch("label/teacher row mismatch".into()));
    }
    let mut t = Tensor::zeros(vec![rows, k]);
    for r in 0..rows {
        for c in 0..k {
            t.data[r * k + c] = (1.0 - lambda) * teacher.probs.at(r, c);
        }
        t.data[r * k + hard_labels[r]] += lambda;
    }
    Ok(t)
}

/// Differentiable loss node over raw logits: log-softmax then weighted NLL
/// against arbitrary soft target rows. `row_weights` excludes padding and
/// carries the per-token normalization.
pub fn soft_ce_on_tape(
    tape: &mut Tape,
    logits: Var,
    targets: Tensor,
    row_weights: Vec<f64>,
) -> Var {
    let logp = tape.log_softmax_rows(logits);
    tape.weighted_nll(logp, targets, row_weights)
}

/// Gradient discrepancy between KL(teacher || student) and the cross-entropy
/// H(teacher, student) for a linear-softmax student (logits = features * W).
///
/// The cross-entropy gradient runs through the autodiff tape; the KLD
/// gradient is the hand-derived route W^T <- features^T (softmax - teacher).
/// The two must agree elementwise: the teacher-entropy term carries no
/// parameter dependence.
pub fn kld_equivalence_check(teacher_rows: &Tensor, features: &Tensor, weights: &Tensor) -> f64 {
    let (rows, feat) = (features.rows(), features.cols());
    let k = weights.cols();
    assert_eq!(weights.rows(), feat);
    assert_eq!(teacher_rows.rows(), rows);
    assert_eq!(teacher_rows.cols(), k);

    // Route 1: autodiff gradient of H(teacher, student).
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let w = tape.leaf(weights.clone());
    let logits = tape.matmul(x, w);
    let loss = soft_ce_on_tape(&mut tape, logits, teacher_rows.clone(), vec![1.0; rows]);
    tape.backward(loss);
    let ce_grad = tape.grad(w).to_vec();

    // Route 2: hand gradient of KL(teacher || student):
    // d/dlogits = softmax(logits) - teacher, chained to W by features^T.
    let logit_vals = tape.value(logits).clone();
    let probs = crate::cor::softmax_rows_with_temperature(&logit_vals, 1.0);
    let mut dlogits = vec![0.0; rows * k];
    for i in 0..rows * k {
        dlogits[i] = probs.data[i] - teacher_rows.data[i];
    }
    let mut kld_grad = vec![0.0; feat * k];
    matmul_tn_acc(&mut kld_grad, &features.data, &dlogits, feat, rows, k);

    ce_grad
        .iter()
        .zip(&kld_grad)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// KLD and cross-entropy values for the same linear-softmax student, for the
/// value-level part of the equivalence property.
pub fn kld_and_ce_values(teacher_rows: &Tensor, features: &Tensor, weights: &Tensor) -> (f64, f64) {
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let w = tape.leaf(weights.clone());
    let logits = tape.matmul(x, w);
    let logp = tape.log_softmax_rows(logits);
    let (rows, k) = (teacher_rows.rows(), teacher_rows.cols());
    let mut ce = 0.0;
    let mut kld = 0.0;
    for r in 0..rows {
        for c in 0..k {
            let t = teacher_rows.at(r, c);
            if t > 0.0 {
                ce -= t * tape.value(logp).at(r, c);
                kld += t * (t.ln() - tape.value(logp).at(r, c));
            }
        }
    }
    (kld, ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn teacher(rows: Tensor) -> TeacherOutput {
        TeacherOutput { probs: rows }
    }

    #[test]
    fn lambda_one_is_plain_ce() {
        // uniform student over K=4: loss = ln 4 regardless of teacher
        let student = Tensor::matrix(1, 4, vec![0.25; 4]);
        let t = teacher(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]));
        let b = lst_loss(&student, &[2], &t, 1.0, None).unwrap();
        assert!((b.total - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_ce_against_teacher() {
        let student = Tensor::matrix(1, 2, vec![0.5, 0.5]);
        let t = teacher(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let b = lst_loss(&student, &[1], &t, 0.0, None).unwrap();
        assert!((b.total - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mixed_target_hand_value() {
        // lambda=0.9, hard label 0, teacher [0.2, 0.8] -> target [0.92, 0.08]
        // against uniform student: loss = ln 2
        let student = Tensor::matrix(1, 2, vec![0.5, 0.5]);
        let t = teacher(Tensor::matrix(1, 2, vec![0.2, 0.8]));
        let b = lst_loss(&student, &[0], &t, 0.9, None).unwrap();
        assert!((b.total - 2.0f64.ln()).abs() < 1e-12);
        let m = mixed_targets(&[0], &t, 0.9).unwrap();
        assert!((m.at(0, 0) - 0.92).abs() < 1e-12);
        assert!((m.at(0, 1) - 0.08).abs() < 1e-12);
    }

    #[test]
    fn lst_linearity_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 5;
        for _ in 0..20 {
            let mut srow: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = srow.iter().sum();
            srow.iter_mut().for_each(|v| *v /= s);
            let mut trow: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let ts: f64 = trow.iter().sum();
            trow.iter_mut().for_each(|v| *v /= ts);
            let student = Tensor::matrix(1, k, srow);
            let t = teacher(Tensor::matrix(1, k, trow));
            let label = rng.gen_range(0..k);
            let lambda = rng.gen_range(0.0..1.0);
            let l0 = lst_loss(&student, &[label], &t, 0.0, None).unwrap().total;
            let l1 = lst_loss(&student, &[label], &t, 1.0, None).unwrap().total;
            let lm = lst_loss(&student, &[label], &t, lambda, None).unwrap().total;
            assert!(
                (lm - (lambda * l1 + (1.0 - lambda) * l0)).abs() < 1e-12,
                "linearity violated"
            );
        }
    }

    #[test]
    fn one_hot_teacher_makes_lambda_irrelevant() {
        let student = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]);
        let mut hot = Tensor::zeros(vec![1, 3]);
        hot.data[1] = 1.0;
        let t = teacher(hot);
        let a = lst_loss(&student, &[1], &t, 0.0, None).unwrap().total;
        let b = lst_loss(&student, &[1], &t, 0.7, None).unwrap().total;
        let c = lst_loss(&student, &[1], &t, 1.0, None).unwrap().total;
        assert!((a - b).abs() < 1e-15);
        assert!((b - c).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_floored_and_flagged() {
        let student = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        let t = teacher(Tensor::matrix(1, 2, vec![0.0, 1.0]));
        let b = lst_loss(&student, &[1], &t, 0.0, None).unwrap();
        assert_eq!(b.floored, 1);
        assert!((b.total - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        let student = Tensor::matrix(1, 2, vec![0.5, 0.5]);
        let t = teacher(Tensor::matrix(1, 2, vec![0.5, 0.5]));
        assert!(lst_loss(&student, &[0], &t, -0.1, None).is_err());
        assert!(lst_loss(&student, &[0], &t, 1.1, None).is_err());
    }

    #[test]
    fn padding_rows_excluded() {
        let student = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.9, 0.1]);
        let t = teacher(Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]));
        let b = lst_loss(&student, &[0, 0], &t, 1.0, Some(&[true, false])).unwrap();
        assert_eq!(b.token_count, 1);
        assert_eq!(b.per_position[1], 0.0);
        assert!((b.total - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothing_zero_is_one_hot() {
        let t = label_smoothing_targets(&[1], 3, 0.0).unwrap();
        assert_eq!(t.rows.data, vec![0.0, 1.0, 0.0]);
        assert_eq!(t.provenance, TargetProvenance::Hard);
    }

    #[test]
    fn smoothing_hand_value() {
        let t = label_smoothing_targets(&[2], 4, 0.1).unwrap();
        let expect = [0.025, 0.025, 0.925, 0.025];
        for (a, b) in t.rows.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let k = rng.gen_range(2..10);
            let eps = rng.gen_range(0.0..1.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..k)).collect();
            let t = label_smoothing_targets(&labels, k, eps).unwrap();
            for r in 0..4 {
                let s: f64 = t.rows.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    fn random_distribution_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![rows, k]);
        for r in 0..rows {
            let mut sum = 0.0;
            for c in 0..k {
                let v: f64 = rng.gen_range(0.01..1.0);
                t.data[r * k + c] = v;
                sum += v;
            }
            for c in 0..k {
                t.data[r * k + c] /= sum;
            }
        }
        t
    }

    #[test]
    fn kld_ce_gradients_agree() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, feat, k) = (4, 3, 6);
            let teacher_rows = random_distribution_rows(&mut rng, rows, k);
            let features = Tensor::matrix(
                rows,
                feat,
                (0..rows * feat).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let weights = Tensor::matrix(
                feat,
                k,
                (0..feat * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let d = kld_equivalence_check(&teacher_rows, &features, &weights);
            assert!(d <= 1e-10, "seed {seed}: discrepancy {d}");
        }
    }

    #[test]
    fn kld_zero_when_teacher_equals_student_but_ce_is_entropy() {
        // teacher = student distribution: KLD value 0, CE = teacher entropy > 0
        let features = Tensor::matrix(1, 1, vec![1.0]);
        let weights = Tensor::matrix(1, 3, vec![0.3, -0.4, 0.8]);
        let probs = crate::cor::softmax_rows_with_temperature(
            &Tensor::matrix(1, 3, vec![0.3, -0.4, 0.8]),
            1.0,
        );
        let (kld, ce) = kld_and_ce_values(&probs, &features, &weights);
        assert!(kld.abs() < 1e-12);
        assert!(ce > 0.0);
        let d = kld_equivalence_check(&probs, &features, &weights);
        assert!(d <= 1e-10);
    }

    #[test]
    fn one_hot_teacher_ce_is_nll() {
        let features = Tensor::matrix(1, 2, vec![1.0, -0.5]);
        let weights = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6]);
        let mut hot = Tensor::zeros(vec![1, 3]);
        hot.data[2] = 1.0;
        let (_, ce) = kld_and_ce_values(&hot, &features, &weights);
        // NLL of class 2 by hand
        let logits = [
            1.0 * 0.1 + -0.5 * 0.4,
            1.0 * 0.2 + -0.5 * -0.5,
            1.0 * -0.3 + -0.5 * 0.6,
        ];
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        assert!((ce - (lse - logits[2])).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        // soft_ce_on_tape over logits must equal lst_loss over the softmax probs
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (rows, k) = (3, 5);
        let logits = Tensor::matrix(
            rows,
            k,
            (0..rows * k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let t = teacher(random_distribution_rows(&mut rng, rows, k));
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..k)).collect();
        let lambda = 0.4;

        let probs = crate::cor::softmax_rows_with_temperature(&logits, 1.0);
        let value = lst_loss(&probs, &labels, &t, lambda, None).unwrap().total;

        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let tgt = mixed_targets(&labels, &t, lambda).unwrap();
        let node = soft_ce_on_tape(&mut tape, l, tgt, vec![1.0; rows]);
        assert!((tape.value(node).data[0] - value).abs() < 1e-10);
    }
}
