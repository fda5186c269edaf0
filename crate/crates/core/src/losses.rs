//! The four objective terms and their weighted combination.
//!
//! Adversarial signs are carried by gradient-reversal layers in front of the
//! discriminators, so both discriminator losses appear here as ordinary
//! positive cross-entropies.

use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tape, Var};
use crate::transferability::PROB_EPS;
use crate::{Error, Result};

/// Mean cross-entropy over the labeled source batch.
pub fn classification_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean binary cross-entropy of per-image domain probabilities
/// (1 = source, 0 = target).
pub fn domain_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, domain_labels: &[T]) -> Result<Var> {
    tape.binary_cross_entropy(probs, domain_labels, T::from_f64_lossy(PROB_EPS))
}

/// Mean binary cross-entropy over every patch of every image; each patch
/// inherits its image's domain label.
pub fn patch_loss<T: Scalar>(tape: &mut Tape<T>, patch_probs: Var, domain_labels: &[T]) -> Result<Var> {
    let s = tape.shape(patch_probs).to_vec();
    if s.len() != 2 || s[0] != domain_labels.len() {
        return Err(Error::invalid(
            "patch_loss",
            format!("probabilities {s:?} vs {} domain labels", domain_labels.len()),
        ));
    }
    let per_patch: Vec<T> = domain_labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, s[1]))
        .collect();
    tape.binary_cross_entropy(patch_probs, &per_patch, T::from_f64_lossy(PROB_EPS))
}

/// Mutual information between target inputs and predicted classes,
/// `H(mean p) − mean H(p)` with natural-log entropy.
pub fn self_clustering_mi<T: Scalar>(tape: &mut Tape<T>, target_logits: Var) -> Result<Var> {
    let s = tape.shape(target_logits).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::invalid(
            "self_clustering_mi",
            format!("need a non-empty [B_t, K] logit batch, got {s:?}"),
        ));
    }
    let p = tape.softmax(target_logits);
    let mean_p = tape.mean_axis(p, 0)?;
    let h_mean = tape.entropy(mean_p);
    let h_each = tape.entropy(p);
    let mean_h = tape.mean(h_each);
    tape.sub(h_mean, mean_h)
}

/// Weights of the adversarial and clustering terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.01,
            gamma: 0.1,
        }
    }
}

/// Scalar values of every term of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_clc: f64,
    pub l_dis: f64,
    pub l_pat: f64,
    pub mi: f64,
    pub total: f64,
}

/// Tape handles of the four terms.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_clc: Var,
    pub l_dis: Var,
    pub l_pat: Var,
    pub mi: Var,
}

/// `L_clc + α·L_dis + β·L_pat − γ·I`; fails naming the first non-finite term.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, parts: &LossParts, weights: LossWeights) -> Result<(Var, LossReport)> {
    let terms = [
        ("l_clc", parts.l_clc),
        ("l_dis", parts.l_dis),
        ("l_pat", parts.l_pat),
        ("mi", parts.mi),
    ];
    let mut values = [0.0; 4];
    for (slot, (name, v)) in values.iter_mut().zip(terms) {
        let x = tape.value(v).item().to_f64_lossy();
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {x}")));
        }
        *slot = x;
    }
    let w = |x: f64| T::from_f64_lossy(x);
    let dis = tape.scale(parts.l_dis, w(weights.alpha));
    let pat = tape.scale(parts.l_pat, w(weights.beta));
    let mi = tape.scale(parts.mi, w(weights.gamma));
    let total = tape.add(parts.l_clc, dis)?;
    let total = tape.add(total, pat)?;
    let total = tape.sub(total, mi)?;
    let report = LossReport {
        l_clc: values[0],
        l_dis: values[1],
        l_pat: values[2],
        mi: values[3],
        total: tape.value(total).item().to_f64_lossy(),
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss = {}", report.total)));
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar(tape: &mut Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros([3, 4]));
        let v = classification_loss(&mut tape, l, &[0, 1, 3]).unwrap();
        assert!((scalar(&mut tape, v) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_cross_entropy_near_zero() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_f64([2, 2], &[20.0, -20.0, -20.0, 20.0]).unwrap());
        let v = classification_loss(&mut tape, l, &[0, 1]).unwrap();
        assert!(scalar(&mut tape, v) < 1e-15);
    }

    #[test]
    fn label_out_of_range_fails() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros([1, 4]));
        assert!(classification_loss(&mut tape, l, &[4]).is_err());
    }

    #[test]
    fn half_probabilities_give_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full([4], 0.5));
        let v = domain_loss(&mut tape, p, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((scalar(&mut tape, v) - 2f64.ln()).abs() < 1e-15);
        let pp = tape.constant(Tensor::full([2, 3], 0.5));
        let v = patch_loss(&mut tape, pp, &[1.0, 0.0]).unwrap();
        assert!((scalar(&mut tape, v) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_discrimination_near_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_f64([2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap());
        let v = patch_loss(&mut tape, p, &[1.0, 0.0]).unwrap();
        assert!(scalar(&mut tape, v) < 2e-7);
        let d = tape.constant(Tensor::from_f64([2], &[1.0, 0.0]).unwrap());
        let v = domain_loss(&mut tape, d, &[1.0, 0.0]).unwrap();
        assert!(scalar(&mut tape, v) < 2e-7);
    }

    #[test]
    fn mi_extremes() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros([5, 4]));
        let v = self_clustering_mi(&mut tape, u).unwrap();
        assert!(scalar(&mut tape, v).abs() < 1e-12);
        let hot = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 60.0 } else { 0.0 });
        let h = tape.constant(hot);
        let v = self_clustering_mi(&mut tape, h).unwrap();
        assert!((scalar(&mut tape, v) - 4f64.ln()).abs() < 1e-9);
        let empty = tape.constant(Tensor::zeros([0, 4]));
        assert!(self_clustering_mi(&mut tape, empty).is_err());
    }

    #[test]
    fn zero_weights_leave_classification_only() {
        let mut tape = Tape::new();
        let vals = [0.7, 0.3, 0.2, 0.5];
        let v: Vec<Var> = vals.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let parts = LossParts {
            l_clc: v[0],
            l_dis: v[1],
            l_pat: v[2],
            mi: v[3],
        };
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let (t, r) = total_loss(&mut tape, &parts, zero).unwrap();
        assert_eq!(tape.value(t).item(), 0.7);
        assert_eq!(r.total, 0.7);
        let (_, r) = total_loss(&mut tape, &parts, LossWeights::default()).unwrap();
        assert!((r.total - (0.7 + 0.3 + 0.01 * 0.2 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut tape = Tape::new();
        let ok = tape.constant(Tensor::scalar(0.1));
        let bad = tape.constant(Tensor::scalar(f64::NAN));
        let parts = LossParts {
            l_clc: ok,
            l_dis: ok,
            l_pat: bad,
            mi: ok,
        };
        let err = total_loss(&mut tape, &parts, LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("l_pat"), "{err}");
        assert!(err.is_numerical());
    }
}
