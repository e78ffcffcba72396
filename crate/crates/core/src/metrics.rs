//! Graded ordinal evaluation.
//!
//! A prediction is a graded false negative when it underestimates the true
//! severity, a graded false positive when it overestimates it, and a true
//! positive on exact match. The three fractions partition the prediction set,
//! and precision/recall/F1 compose from them with the usual algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fractions of exact matches, overestimates and underestimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradedCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
    pub n_total: usize,
}

/// Count match/over/under fractions over parallel prediction/actual lists.
pub fn graded_counts(preds: &[usize], actuals: &[usize]) -> Result<GradedCounts> {
    if preds.is_empty() || preds.len() != actuals.len() {
        return Err(Error::Shape(format!(
            "graded_counts needs equal nonzero lengths, got {} and {}",
            preds.len(),
            actuals.len()
        )));
    }
    let n = preds.len() as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &a) in preds.iter().zip(actuals) {
        match p.cmp(&a) {
            std::cmp::Ordering::Equal => tp += 1,
            std::cmp::Ordering::Greater => fp += 1,
            std::cmp::Ordering::Less => fn_ += 1,
        }
    }
    Ok(GradedCounts {
        tp: tp as f64 / n,
        fp: fp as f64 / n,
        fn_: fn_ as f64 / n,
        n_total: preds.len(),
    })
}

/// Graded precision, recall and F1 from the count fractions. Any zero
/// denominator yields 0 for that metric.
pub fn graded_prf(counts: &GradedCounts) -> (f64, f64, f64) {
    let gp = if counts.tp + counts.fp > 0.0 {
        counts.tp / (counts.tp + counts.fp)
    } else {
        0.0
    };
    let gr = if counts.tp + counts.fn_ > 0.0 {
        counts.tp / (counts.tp + counts.fn_)
    } else {
        0.0
    };
    let gf = if gp + gr > 0.0 {
        2.0 * gp * gr / (gp + gr)
    } else {
        0.0
    };
    (gp, gr, gf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let c = graded_counts(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (1.0, 0.0, 0.0));
        assert_eq!(graded_prf(&c), (1.0, 1.0, 1.0));
    }

    #[test]
    fn pure_overestimation() {
        let c = graded_counts(&[3, 3, 3], &[0, 0, 0]).unwrap();
        assert_eq!(c.fp, 1.0);
        assert_eq!(graded_prf(&c), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_enumerated_case() {
        // actuals [0,1,2,3], preds [0,2,2,2]: match, over, match, under.
        let c = graded_counts(&[0, 2, 2, 2], &[0, 1, 2, 3]).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0.5, 0.25, 0.25));
        let (gp, gr, gf) = graded_prf(&c);
        assert!((gp - 2.0 / 3.0).abs() < 1e-12);
        assert!((gr - 2.0 / 3.0).abs() < 1e-12);
        assert!((gf - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn counts_partition_to_one() {
        let c = graded_counts(&[0, 1, 1, 3, 2], &[1, 1, 0, 2, 2]).unwrap();
        assert!((c.tp + c.fp + c.fn_ - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_mismatched_or_empty() {
        assert!(graded_counts(&[], &[]).is_err());
        assert!(graded_counts(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let preds = [0, 2, 1, 3, 2, 0];
        let actuals = [1, 2, 1, 2, 3, 0];
        let a = graded_counts(&preds, &actuals).unwrap();
        let perm = [5, 3, 0, 4, 1, 2];
        let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let a2: Vec<usize> = perm.iter().map(|&i| actuals[i]).collect();
        let b = graded_counts(&p2, &a2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn swapping_roles_swaps_fp_fn_and_gp_gr() {
        let preds = [0, 2, 1, 3, 2, 0];
        let actuals = [1, 2, 1, 2, 3, 0];
        let fwd = graded_counts(&preds, &actuals).unwrap();
        let rev = graded_counts(&actuals, &preds).unwrap();
        assert_eq!(fwd.fp, rev.fn_);
        assert_eq!(fwd.fn_, rev.fp);
        let (gp_f, gr_f, gf_f) = graded_prf(&fwd);
        let (gp_r, gr_r, gf_r) = graded_prf(&rev);
        assert_eq!(gp_f, gr_r);
        assert_eq!(gr_f, gp_r);
        assert_eq!(gf_f, gf_r);
    }
}
