//! Classification and ranking metrics, plus whole-split scoring.
//!
//! Spam is the positive class throughout. Thresholded metrics come from
//! [`prf1`]; ranking quality from [`average_precision`] and [`auc`],
//! each of which has a brute-force oracle in the tests.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EncodedReview;
use crate::model::{forward, HyperParams, ModelError, ModelParams};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric needs at least one example")]
    Empty,
    #[error("metric undefined: {reason}")]
    Undefined { reason: String },
    #[error("model does not fit this corpus: {reason}")]
    SizeMismatch { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One review's model output next to its gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub review_id: String,
    /// Probability of the spam class.
    pub spam_score: f64,
    pub gold: u8,
}

/// Thresholded binary metrics with their confusion counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub false_neg: usize,
}

/// Full split-level report. Ranking metrics are `None` when the split
/// contains a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub false_neg: usize,
    pub n: usize,
}

fn check_scores(examples: &[ScoredExample]) -> Result<()> {
    for e in examples {
        if !e.spam_score.is_finite() {
            return Err(EvalError::Undefined {
                reason: format!("non-finite score for {:?}", e.review_id),
            });
        }
    }
    Ok(())
}

/// Precision, recall, and F1 at a score threshold. A review is predicted
/// spam when its score reaches the threshold. Degenerate denominators
/// yield 0 by convention.
pub fn prf1(examples: &[ScoredExample], threshold: f64) -> Result<PrF1> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    check_scores(examples)?;
    let (mut tp, mut fp, mut tn, mut false_neg) = (0usize, 0usize, 0usize, 0usize);
    for e in examples {
        let predicted_spam = e.spam_score >= threshold;
        match (predicted_spam, e.gold == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => false_neg += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + false_neg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrF1 {
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        false_neg,
    })
}

fn ranked(examples: &[ScoredExample]) -> Vec<&ScoredExample> {
    let mut order: Vec<&ScoredExample> = examples.iter().collect();
    order.sort_by(|a, b| {
        b.spam_score
            .partial_cmp(&a.spam_score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.review_id.cmp(&b.review_id))
    });
    order
}

/// Mean of precision-at-k over the ranks k holding a spam review, with
/// score ties broken by ascending review id.
pub fn average_precision(examples: &[ScoredExample]) -> Result<f64> {
    check_scores(examples)?;
    let n_pos = examples.iter().filter(|e| e.gold == 1).count();
    if n_pos == 0 {
        return Err(EvalError::Undefined {
            reason: "average precision needs at least one positive".to_string(),
        });
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, e) in ranked(examples).iter().enumerate() {
        if e.gold == 1 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Probability that a random spam review outscores a random clean one,
/// ties counting half.
pub fn auc(examples: &[ScoredExample]) -> Result<f64> {
    check_scores(examples)?;
    let n_pos = examples.iter().filter(|e| e.gold == 1).count();
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Undefined {
            reason: "area under the curve needs both classes".to_string(),
        });
    }
    // Average ranks over tied scores, then the rank-sum statistic.
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| {
        examples[a]
            .spam_score
            .partial_cmp(&examples[b].spam_score)
            .unwrap_or(Ordering::Equal)
    });
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len()
            && examples[order[j]].spam_score == examples[order[i]].spam_score
        {
            j += 1;
        }
        // Ranks are 1-based; everything in [i, j) shares the average.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if examples[k].gold == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Runs the classifier over a split and pairs each spam probability with
/// its gold label. Fails up front if any review indexes outside the
/// model's embedding tables.
pub fn score_reviews(
    params: &ModelParams,
    hp: &HyperParams,
    reviews: &[EncodedReview],
) -> Result<Vec<ScoredExample>> {
    let sizes = params.sizes();
    for r in reviews {
        let max_token = r.tokens.iter().flatten().max().copied().unwrap_or(0);
        if max_token >= sizes.n_tokens || r.user >= sizes.n_users || r.product >= sizes.n_products
        {
            return Err(EvalError::SizeMismatch {
                reason: format!(
                    "review {:?} needs tables of at least {} tokens / {} users / {} products, \
                     model has {} / {} / {}",
                    r.review_id,
                    max_token + 1,
                    r.user + 1,
                    r.product + 1,
                    sizes.n_tokens,
                    sizes.n_users,
                    sizes.n_products
                ),
            });
        }
    }
    let mut scored = Vec::with_capacity(reviews.len());
    // Fresh tape per chunk keeps memory flat; no gradients are needed.
    for chunk in reviews.chunks(128) {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        for r in chunk {
            let trace = forward(&mut tape, &bound, r, hp)?;
            scored.push(ScoredExample {
                review_id: r.review_id.clone(),
                spam_score: trace.probs.data()[1],
                gold: r.label as u8,
            });
        }
    }
    Ok(scored)
}

/// Scores a split and assembles the full report at the given threshold.
pub fn evaluate(
    params: &ModelParams,
    hp: &HyperParams,
    reviews: &[EncodedReview],
    threshold: f64,
) -> Result<MetricReport> {
    let scored = score_reviews(params, hp, reviews)?;
    let base = prf1(&scored, threshold)?;
    let ap = average_precision(&scored).ok();
    let area = auc(&scored).ok();
    Ok(MetricReport {
        precision: base.precision,
        recall: base.recall,
        f1: base.f1,
        ap,
        auc: area,
        tp: base.tp,
        fp: base.fp,
        tn: base.tn,
        false_neg: base.false_neg,
        n: scored.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ex(id: &str, score: f64, gold: u8) -> ScoredExample {
        ScoredExample {
            review_id: id.to_string(),
            spam_score: score,
            gold,
        }
    }

    #[test]
    fn prf1_all_correct() {
        let xs = [ex("a", 0.9, 1), ex("b", 0.1, 0), ex("c", 0.8, 1)];
        let m = prf1(&xs, 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert_eq!((m.tp, m.fp, m.tn, m.false_neg), (2, 0, 1, 0));
    }

    #[test]
    fn prf1_no_predicted_positives() {
        let xs = [ex("a", 0.2, 1), ex("b", 0.1, 0)];
        let m = prf1(&xs, 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn prf1_mixed_confusion() {
        // tp=2, fp=1, fn=2 → P=2/3, R=1/2, F1=4/7.
        let xs = [
            ex("a", 0.9, 1),
            ex("b", 0.8, 1),
            ex("c", 0.7, 0),
            ex("d", 0.2, 1),
            ex("e", 0.1, 1),
            ex("f", 0.3, 0),
        ];
        let m = prf1(&xs, 0.5).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 0.5).abs() < 1e-15);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn prf1_threshold_extremes() {
        let xs = [ex("a", 0.6, 1), ex("b", 0.4, 0), ex("c", 0.0, 1)];
        let all_spam = prf1(&xs, 0.0).unwrap();
        assert_eq!(all_spam.recall, 1.0);
        assert_eq!(all_spam.tn, 0);
        let none_spam = prf1(&xs, 1.0 + f64::EPSILON).unwrap();
        assert_eq!(none_spam.recall, 0.0);
        assert_eq!(none_spam.tp, 0);
    }

    #[test]
    fn prf1_rejects_empty_and_nan() {
        assert!(matches!(prf1(&[], 0.5).unwrap_err(), EvalError::Empty));
        let bad = [ex("a", f64::NAN, 1)];
        assert!(prf1(&bad, 0.5).is_err());
    }

    #[test]
    fn ap_single_positive_on_top() {
        let xs = [ex("a", 0.9, 1), ex("b", 0.5, 0), ex("c", 0.1, 0)];
        assert_eq!(average_precision(&xs).unwrap(), 1.0);
    }

    #[test]
    fn ap_positives_at_one_and_three() {
        let xs = [ex("a", 0.9, 1), ex("b", 0.5, 0), ex("c", 0.1, 1)];
        let got = average_precision(&xs).unwrap();
        assert!((got - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ap_breaks_ties_by_review_id() {
        // Equal scores: "a" (spam) sorts before "b", so AP is 1.
        let xs = [ex("b", 0.5, 0), ex("a", 0.5, 1)];
        assert_eq!(average_precision(&xs).unwrap(), 1.0);
    }

    #[test]
    fn ap_requires_a_positive() {
        let xs = [ex("a", 0.9, 0)];
        assert!(matches!(
            average_precision(&xs).unwrap_err(),
            EvalError::Undefined { .. }
        ));
    }

    #[test]
    fn ap_matches_prefix_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for case in 0..50 {
            let n = rng.gen_range(2..40);
            let xs: Vec<ScoredExample> = (0..n)
                .map(|i| {
                    // Coarse scores force plenty of ties.
                    let score = rng.gen_range(0..5) as f64 / 4.0;
                    ex(&format!("r{i:03}"), score, rng.gen_range(0..2) as u8)
                })
                .collect();
            if !xs.iter().any(|e| e.gold == 1) {
                continue;
            }
            // Oracle: explicit precision@k over the same deterministic order.
            let order = ranked(&xs);
            let mut oracle = 0.0;
            let n_pos = xs.iter().filter(|e| e.gold == 1).count();
            for k in 1..=order.len() {
                if order[k - 1].gold == 1 {
                    let hits = order[..k].iter().filter(|e| e.gold == 1).count();
                    oracle += hits as f64 / k as f64;
                }
            }
            oracle /= n_pos as f64;
            let got = average_precision(&xs).unwrap();
            assert!((got - oracle).abs() < 1e-12, "case {case}");
        }
    }

    #[test]
    fn ap_invariant_under_input_permutation() {
        let mut xs = vec![
            ex("a", 0.9, 1),
            ex("b", 0.5, 0),
            ex("c", 0.5, 1),
            ex("d", 0.2, 0),
        ];
        let before = average_precision(&xs).unwrap();
        xs.reverse();
        assert_eq!(average_precision(&xs).unwrap(), before);
    }

    #[test]
    fn auc_perfect_separation() {
        let xs = [ex("a", 0.9, 1), ex("b", 0.8, 1), ex("c", 0.2, 0)];
        assert_eq!(auc(&xs).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_tied_is_half() {
        let xs = [ex("a", 0.5, 1), ex("b", 0.5, 0), ex("c", 0.5, 1)];
        assert_eq!(auc(&xs).unwrap(), 0.5);
    }

    #[test]
    fn auc_requires_both_classes() {
        let xs = [ex("a", 0.9, 1), ex("b", 0.8, 1)];
        assert!(matches!(
            auc(&xs).unwrap_err(),
            EvalError::Undefined { .. }
        ));
    }

    #[test]
    fn auc_matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for case in 0..100 {
            let n = rng.gen_range(2..60);
            let xs: Vec<ScoredExample> = (0..n)
                .map(|i| {
                    let score = rng.gen_range(0..7) as f64 / 6.0;
                    ex(&format!("r{i:03}"), score, rng.gen_range(0..2) as u8)
                })
                .collect();
            let n_pos = xs.iter().filter(|e| e.gold == 1).count();
            if n_pos == 0 || n_pos == xs.len() {
                continue;
            }
            let mut concordant = 0.0;
            for p in xs.iter().filter(|e| e.gold == 1) {
                for q in xs.iter().filter(|e| e.gold == 0) {
                    if p.spam_score > q.spam_score {
                        concordant += 1.0;
                    } else if p.spam_score == q.spam_score {
                        concordant += 0.5;
                    }
                }
            }
            let oracle = concordant / (n_pos * (xs.len() - n_pos)) as f64;
            let got = auc(&xs).unwrap();
            assert!((got - oracle).abs() < 1e-12, "case {case}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_rescaling() {
        let xs = vec![
            ex("a", 0.9, 1),
            ex("b", 0.6, 0),
            ex("c", 0.6, 1),
            ex("d", 0.1, 0),
        ];
        let squashed: Vec<ScoredExample> = xs
            .iter()
            .map(|e| ex(&e.review_id, e.spam_score / 3.0 + 0.1, e.gold))
            .collect();
        assert_eq!(auc(&xs).unwrap(), auc(&squashed).unwrap());
    }

    #[test]
    fn report_serializes_with_short_field_names() {
        let report = MetricReport {
            precision: 1.0,
            recall: 0.5,
            f1: 2.0 / 3.0,
            ap: Some(0.9),
            auc: None,
            tp: 1,
            fp: 0,
            tn: 1,
            false_neg: 1,
            n: 3,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"fn\":1"));
        assert!(json.contains("\"auc\":null"));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
