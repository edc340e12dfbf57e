//! Training objectives: cross entropy for the classifier and a
//! margin-based translation loss over (user, review, product) triplets.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{DenseTensor, ReduceKind, Tape, TensorError, TensorId, UnaryKind};

use super::{BoundParams, ForwardTrace, ModelError, Result};

/// A (head, relation, tail) triple of tape vectors, all 1×d.
#[derive(Debug, Clone, Copy)]
pub struct Triplet {
    pub head: TensorId,
    pub relation: TensorId,
    pub tail: TensorId,
}

impl ForwardTrace {
    /// The triple this review asserts: its author, fused vector, product.
    pub fn positive_triplet(&self) -> Triplet {
        Triplet {
            head: self.user_rep,
            relation: self.relation_rep,
            tail: self.prod_rep,
        }
    }
}

/// Squared distance after projecting head and tail off the hyperplane:
/// ‖(u − w·uᵀ·w) + d − (p − w·pᵀ·w)‖². `w` must be unit length; the
/// check leaves headroom for finite-difference probes around a unit
/// base point.
pub fn transh_distance(
    tape: &mut Tape,
    u: TensorId,
    dvec: TensorId,
    p: TensorId,
    w: TensorId,
) -> Result<TensorId> {
    let norm = tape.value(w).l2_norm();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(ModelError::NonUnitHyperplane { norm });
    }
    let wt = tape.transpose(w)?;
    let project = |tape: &mut Tape, v: TensorId| -> Result<TensorId> {
        let dot = tape.matmul(v, wt)?;
        let along = tape.mul(dot, w)?;
        Ok(tape.sub(v, along)?)
    };
    let u_flat = project(tape, u)?;
    let p_flat = project(tape, p)?;
    let moved = tape.add(u_flat, dvec)?;
    let diff = tape.sub(moved, p_flat)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.reduce_sum_all(sq)?)
}

/// Rescales `v` to unit norm when it is longer than 1, identity below.
/// Differentiable everywhere thanks to a tiny additive floor under the
/// square root.
fn clamp_to_unit(tape: &mut Tape, v: TensorId) -> Result<TensorId> {
    let sq = tape.mul(v, v)?;
    let sum = tape.reduce(ReduceKind::Sum, sq, 1, None)?;
    let safe = tape.add_const(sum, 1e-24)?;
    let norm = tape.unary(UnaryKind::Sqrt, safe)?;
    let over = tape.add_const(norm, -1.0)?;
    let over = tape.relu(over)?;
    let scale = tape.add_const(over, 1.0)?;
    Ok(tape.div(v, scale)?)
}

/// Margin ranking loss: mean over negatives of `max(0, l⁺ − l⁻ + 1)`.
///
/// Head, relation, and tail vectors are clamped to the unit ball before
/// the distance, on both sides of the margin.
pub fn transh_loss(
    tape: &mut Tape,
    params: &BoundParams,
    positive: &Triplet,
    negatives: &[Triplet],
) -> Result<TensorId> {
    if negatives.is_empty() {
        return Err(ModelError::EmptyNegatives);
    }
    let w = params.transh_wd()?;
    let mut clamped: HashMap<TensorId, TensorId> = HashMap::new();
    let mut clamp = |tape: &mut Tape, id: TensorId| -> Result<TensorId> {
        if let Some(&c) = clamped.get(&id) {
            return Ok(c);
        }
        let c = clamp_to_unit(tape, id)?;
        clamped.insert(id, c);
        Ok(c)
    };

    let (ph, pr, pt) = (
        clamp(tape, positive.head)?,
        clamp(tape, positive.relation)?,
        clamp(tape, positive.tail)?,
    );
    let l_pos = transh_distance(tape, ph, pr, pt, w)?;

    let mut total: Option<TensorId> = None;
    for neg in negatives {
        let (nh, nr, nt) = (
            clamp(tape, neg.head)?,
            clamp(tape, neg.relation)?,
            clamp(tape, neg.tail)?,
        );
        let l_neg = transh_distance(tape, nh, nr, nt, w)?;
        let gap = tape.sub(l_pos, l_neg)?;
        let margin = tape.add_const(gap, 1.0)?;
        let hinge = tape.relu(margin)?;
        total = Some(match total {
            None => hinge,
            Some(t) => tape.add(t, hinge)?,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), 1.0 / negatives.len() as f64)?)
}

/// Negative log probability of the gold class, evaluated from logits via
/// log-sum-exp so extreme scores stay finite.
pub fn classification_loss(tape: &mut Tape, logits: TensorId, label: usize) -> Result<TensorId> {
    let (_, classes) = tape.value(logits).dims2()?;
    if label >= classes {
        return Err(ModelError::Tensor(TensorError::IndexOutOfRange {
            index: label,
            size: classes,
        }));
    }
    let peak = tape.reduce(ReduceKind::Max, logits, 1, None)?;
    let shifted = tape.sub(logits, peak)?;
    let exps = tape.unary(UnaryKind::Exp, shifted)?;
    let total = tape.reduce(ReduceKind::Sum, exps, 1, None)?;
    let log_total = tape.unary(UnaryKind::Log, total)?;
    let lse = tape.add(log_total, peak)?;

    let mut one_hot = vec![0.0; classes];
    one_hot[label] = 1.0;
    let picker = tape.constant(DenseTensor::row(&one_hot));
    let picked = tape.mul(logits, picker)?;
    let gold = tape.reduce(ReduceKind::Sum, picked, 1, None)?;
    Ok(tape.sub(lse, gold)?)
}

/// Per-review contributions to the batch objective.
pub struct LossTerms {
    pub ce: TensorId,
    pub relation: Option<TensorId>,
}

/// Batch objective: summed cross entropy plus `beta` times the summed
/// relation losses.
pub fn overall_loss(tape: &mut Tape, terms: &[LossTerms], beta: f64) -> Result<TensorId> {
    if terms.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut ce_total = terms[0].ce;
    for t in &terms[1..] {
        ce_total = tape.add(ce_total, t.ce)?;
    }
    if beta == 0.0 {
        return Ok(ce_total);
    }
    let mut rel_total: Option<TensorId> = None;
    for t in terms {
        if let Some(rel) = t.relation {
            rel_total = Some(match rel_total {
                None => rel,
                Some(acc) => tape.add(acc, rel)?,
            });
        }
    }
    match rel_total {
        None => Ok(ce_total),
        Some(rel) => {
            let weighted = tape.scale(rel, beta)?;
            Ok(tape.add(ce_total, weighted)?)
        }
    }
}

/// Draws up to `n_neg` corrupted triplets per review from the rest of
/// the batch: either the head is replaced by another review's user
/// vector or the tail by another's product vector, never picking a
/// review that shares the same user (resp. product). Reviews with no
/// usable replacement get an empty list.
pub fn sample_negatives<R: Rng>(
    traces: &[ForwardTrace],
    n_neg: usize,
    rng: &mut R,
) -> Vec<Vec<Triplet>> {
    let mut all = Vec::with_capacity(traces.len());
    for (i, trace) in traces.iter().enumerate() {
        let heads: Vec<usize> = traces
            .iter()
            .enumerate()
            .filter(|&(_, t)| t.user != trace.user)
            .map(|(j, _)| j)
            .collect();
        let tails: Vec<usize> = traces
            .iter()
            .enumerate()
            .filter(|&(_, t)| t.product != trace.product)
            .map(|(j, _)| j)
            .collect();
        let mut negs = Vec::with_capacity(n_neg);
        for _ in 0..n_neg {
            let replace_head = match (heads.is_empty(), tails.is_empty()) {
                (true, true) => break,
                (false, true) => true,
                (true, false) => false,
                (false, false) => rng.gen_bool(0.5),
            };
            let positive = traces[i].positive_triplet();
            if replace_head {
                let j = heads[rng.gen_range(0..heads.len())];
                negs.push(Triplet {
                    head: traces[j].user_rep,
                    ..positive
                });
            } else {
                let j = tails[rng.gen_range(0..tails.len())];
                negs.push(Triplet {
                    tail: traces[j].prod_rep,
                    ..positive
                });
            }
        }
        all.push(negs);
    }
    all
}
