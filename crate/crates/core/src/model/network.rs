//! Forward pass: sentence encoding, entity decomposition, review fusion,
//! and the classifier head.

use crate::corpus::EncodedReview;
use crate::tensor::{DenseTensor, Mask, ReduceKind, Tape, TensorId};

use super::{BoundParams, HyperParams, ModelError, Result, Side};

/// Denominator floor when projecting onto a near-zero entity embedding.
const NORM_GUARD: f64 = 1e-8;

/// One attention distribution over a word's context window.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub side: Side,
    /// Grid row of the sentence.
    pub sentence: usize,
    /// Position among the sentence's real tokens.
    pub token: usize,
    pub unit: usize,
    /// 1×(2r+1) weights; positions outside the sentence are exactly zero.
    pub weights: DenseTensor,
}

/// Everything one review leaves behind on the tape, plus value snapshots
/// of the intermediates. Grid-shaped snapshots are padded back to L rows
/// with zeros where the sentence mask is false.
#[derive(Debug)]
pub struct ForwardTrace {
    pub user_rep: TensorId,
    pub prod_rep: TensorId,
    /// Fused review vector; doubles as the relation translation.
    pub relation_rep: TensorId,
    pub logits: TensorId,
    pub s_user: DenseTensor,
    pub s_prod: DenseTensor,
    pub user_par: DenseTensor,
    pub user_orth: DenseTensor,
    pub prod_par: DenseTensor,
    pub prod_orth: DenseTensor,
    /// Class probabilities, spam last.
    pub probs: DenseTensor,
    pub window_attention: Vec<WindowAttention>,
    /// 1×L fusion weights per side, zero at masked rows.
    pub fau_attn_user: DenseTensor,
    pub fau_attn_prod: DenseTensor,
    pub label: usize,
    pub user: usize,
    pub product: usize,
}

/// Encodes one sentence under one entity's view.
///
/// Every real token attends over a window of 2r+1 neighbours (zero-padded
/// at the edges). Each attention unit scores window positions through a
/// tanh feature map conditioned on the entity vector, softmaxes the
/// per-position feature sums, and averages the window rows; units are
/// combined by elementwise max. The token embedding concatenated with its
/// window summary passes through a linear+tanh layer, and the sentence
/// vector is the featurewise max over tokens.
///
/// `token_x` holds the sentence's real-token embeddings, one row each;
/// `row` only labels the attention trace entries.
pub fn mau_sentence(
    tape: &mut Tape,
    params: &BoundParams,
    side: Side,
    row: usize,
    token_x: TensorId,
    entity_vec: TensorId,
    r: usize,
) -> Result<(TensorId, Vec<WindowAttention>)> {
    let (n, _d) = tape.value(token_x).dims2()?;
    let m = params.m();
    let width = 2 * r + 1;

    // Window scores depend only on the absolute position, so compute each
    // unit's per-position score column once and gather per window.
    let mut unit_scores = Vec::with_capacity(m);
    for k in 0..m {
        let xw = tape.matmul(token_x, params.mau_wx(side, k)?)?;
        let ew = tape.matmul(entity_vec, params.mau_we(side, k)?)?;
        let pre = tape.add(xw, ew)?;
        let act = tape.tanh(pre)?;
        unit_scores.push(tape.reduce(ReduceKind::Sum, act, 1, None)?);
    }

    let mut attention = Vec::with_capacity(n * m);
    let mut word_reps = Vec::with_capacity(n);
    for j in 0..n {
        let positions: Vec<Option<usize>> = (0..width)
            .map(|o| {
                let p = j as isize + o as isize - r as isize;
                (p >= 0 && (p as usize) < n).then_some(p as usize)
            })
            .collect();
        let valid: Vec<bool> = positions.iter().map(Option::is_some).collect();
        let mask = Mask::row(&valid);
        let window_x = tape.gather_rows(token_x, &positions)?;

        let mut unit_summaries = Vec::with_capacity(m);
        for (k, scores) in unit_scores.iter().enumerate() {
            let window_scores = tape.gather_rows(*scores, &positions)?;
            let scores_row = tape.transpose(window_scores)?;
            let alpha = tape.masked_softmax(scores_row, Some(&mask))?;
            unit_summaries.push(tape.matmul(alpha, window_x)?);
            attention.push(WindowAttention {
                side,
                sentence: row,
                token: j,
                unit: k,
                weights: tape.value(alpha).clone(),
            });
        }
        let summary = if unit_summaries.len() == 1 {
            unit_summaries[0]
        } else {
            let stacked = tape.concat_rows(&unit_summaries)?;
            tape.reduce(ReduceKind::Max, stacked, 0, None)?
        };
        let x_j = tape.gather_rows(token_x, &[Some(j)])?;
        word_reps.push(tape.concat_last(x_j, summary)?);
    }

    let stacked = tape.concat_rows(&word_reps)?;
    let lin = tape.matmul(stacked, params.sent_wv(side)?)?;
    let pre = tape.add(lin, params.sent_b(side)?)?;
    let features = tape.tanh(pre)?;
    let sentence_vec = tape.reduce(ReduceKind::Max, features, 0, None)?;
    Ok((sentence_vec, attention))
}

/// Splits `s` into its components parallel and orthogonal to `e`.
///
/// The projection coefficient divides by `max(e·e, 1e-8)`, so a zero
/// entity embedding yields a zero parallel part and leaves `s` intact in
/// the orthogonal part.
pub fn orthogonal_decompose(
    tape: &mut Tape,
    s: TensorId,
    e: TensorId,
) -> Result<(TensorId, TensorId)> {
    let et = tape.transpose(e)?;
    let dot_se = tape.matmul(s, et)?;
    let dot_ee = tape.matmul(e, et)?;
    let above = tape.add_const(dot_ee, -NORM_GUARD)?;
    let above = tape.relu(above)?;
    let denom = tape.add_const(above, NORM_GUARD)?;
    let coef = tape.div(dot_se, denom)?;
    let par = tape.mul(coef, e)?;
    let orth = tape.sub(s, par)?;
    Ok((par, orth))
}

/// Mean of the parallel sentence rows: one vector per entity.
pub fn entity_representations(
    tape: &mut Tape,
    user_par: TensorId,
    prod_par: TensorId,
) -> Result<(TensorId, TensorId)> {
    let u = tape.reduce(ReduceKind::Mean, user_par, 0, None)?;
    let p = tape.reduce(ReduceKind::Mean, prod_par, 0, None)?;
    Ok((u, p))
}

/// Fuses the two orthogonal sentence stacks into one review vector.
///
/// Both stacks are mapped into a shared space, gate each other through a
/// sigmoid, and meet in a tanh dot-product affinity matrix. Softmaxed
/// row and column means of that matrix weight the ungated features, and
/// the two weighted summaries concatenate through a final linear map.
/// Returns the fused vector and both attention rows.
pub fn fau_fuse(
    tape: &mut Tape,
    params: &BoundParams,
    user_orth: TensorId,
    prod_orth: TensorId,
) -> Result<(TensorId, TensorId, TensorId)> {
    let du = tape.matmul(user_orth, params.fau_wu()?)?;
    let dp = tape.matmul(prod_orth, params.fau_wp()?)?;
    let gate_u = tape.sigmoid(dp)?;
    let gate_p = tape.sigmoid(du)?;
    let du_hat = tape.mul(du, gate_u)?;
    let dp_hat = tape.mul(dp, gate_p)?;
    let dp_hat_t = tape.transpose(dp_hat)?;
    let affinity = tape.matmul(du_hat, dp_hat_t)?;
    let affinity = tape.tanh(affinity)?;

    let row_means = tape.reduce(ReduceKind::Mean, affinity, 1, None)?;
    let row_means = tape.transpose(row_means)?;
    let attn_user = tape.masked_softmax(row_means, None)?;
    let col_means = tape.reduce(ReduceKind::Mean, affinity, 0, None)?;
    let attn_prod = tape.masked_softmax(col_means, None)?;

    let summary_u = tape.matmul(attn_user, du)?;
    let summary_p = tape.matmul(attn_prod, dp)?;
    let joined = tape.concat_last(summary_u, summary_p)?;
    let fused = tape.matmul(joined, params.fuse_w()?)?;
    Ok((fused, attn_user, attn_prod))
}

/// Two-class head: relu hidden layer, then linear logits.
pub fn classify(tape: &mut Tape, params: &BoundParams, review_vec: TensorId) -> Result<TensorId> {
    let lin = tape.matmul(review_vec, params.cls_wd()?)?;
    let pre = tape.add(lin, params.cls_bd()?)?;
    let hidden = tape.relu(pre)?;
    Ok(tape.matmul(hidden, params.cls_wc()?)?)
}

fn pad_rows(rows: &[(usize, TensorId)], tape: &Tape, l: usize, d: usize) -> DenseTensor {
    let mut out = DenseTensor::zeros(l, d);
    for &(row, id) in rows {
        let src = tape.value(id).data();
        out.data_mut()[row * d..(row + 1) * d].copy_from_slice(src);
    }
    out
}

fn pad_attention(attn: TensorId, rows: &[(usize, Vec<usize>)], tape: &Tape, l: usize) -> DenseTensor {
    let mut out = DenseTensor::zeros(1, l);
    for (slot, (row, _)) in rows.iter().enumerate() {
        out.data_mut()[*row] = tape.value(attn).data()[slot];
    }
    out
}

/// Runs the whole network for one review and records every intermediate.
pub fn forward(
    tape: &mut Tape,
    params: &BoundParams,
    review: &EncodedReview,
    hp: &HyperParams,
) -> Result<ForwardTrace> {
    let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &live) in review.sentence_mask.iter().enumerate() {
        if !live {
            continue;
        }
        let ids: Vec<usize> = review.tokens[i]
            .iter()
            .zip(&review.token_mask[i])
            .filter(|&(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        if ids.is_empty() {
            return Err(ModelError::EmptySentence);
        }
        rows.push((i, ids));
    }
    if rows.is_empty() {
        return Err(ModelError::NoSentences);
    }

    let user_vec = tape.lookup(params.entity_emb(Side::User)?, &[review.user])?;
    let prod_vec = tape.lookup(params.entity_emb(Side::Product)?, &[review.product])?;

    let mut window_attention = Vec::new();
    let mut s_user = Vec::new();
    let mut s_prod = Vec::new();
    let mut user_par = Vec::new();
    let mut user_orth = Vec::new();
    let mut prod_par = Vec::new();
    let mut prod_orth = Vec::new();
    for (row, ids) in &rows {
        let token_x = tape.lookup(params.word_emb()?, ids)?;
        let (su, attn) =
            mau_sentence(tape, params, Side::User, *row, token_x, user_vec, hp.r)?;
        window_attention.extend(attn);
        let (sp, attn) =
            mau_sentence(tape, params, Side::Product, *row, token_x, prod_vec, hp.r)?;
        window_attention.extend(attn);
        let (up, uo) = orthogonal_decompose(tape, su, user_vec)?;
        let (pp, po) = orthogonal_decompose(tape, sp, prod_vec)?;
        s_user.push((*row, su));
        s_prod.push((*row, sp));
        user_par.push((*row, up));
        user_orth.push((*row, uo));
        prod_par.push((*row, pp));
        prod_orth.push((*row, po));
    }

    let stack = |tape: &mut Tape, items: &[(usize, TensorId)]| {
        let ids: Vec<TensorId> = items.iter().map(|&(_, id)| id).collect();
        tape.concat_rows(&ids)
    };
    let user_par_stack = stack(tape, &user_par)?;
    let prod_par_stack = stack(tape, &prod_par)?;
    let user_orth_stack = stack(tape, &user_orth)?;
    let prod_orth_stack = stack(tape, &prod_orth)?;

    let (user_rep, prod_rep) = entity_representations(tape, user_par_stack, prod_par_stack)?;
    let (relation_rep, attn_user, attn_prod) =
        fau_fuse(tape, params, user_orth_stack, prod_orth_stack)?;
    let logits = classify(tape, params, relation_rep)?;

    let y = tape.value(logits).data();
    let peak = y[0].max(y[1]);
    let e0 = (y[0] - peak).exp();
    let e1 = (y[1] - peak).exp();
    let probs = DenseTensor::row(&[e0 / (e0 + e1), e1 / (e0 + e1)]);

    let d = hp.d;
    Ok(ForwardTrace {
        user_rep,
        prod_rep,
        relation_rep,
        logits,
        s_user: pad_rows(&s_user, tape, hp.l, d),
        s_prod: pad_rows(&s_prod, tape, hp.l, d),
        user_par: pad_rows(&user_par, tape, hp.l, d),
        user_orth: pad_rows(&user_orth, tape, hp.l, d),
        prod_par: pad_rows(&prod_par, tape, hp.l, d),
        prod_orth: pad_rows(&prod_orth, tape, hp.l, d),
        probs,
        window_attention,
        fau_attn_user: pad_attention(attn_user, &rows, tape, hp.l),
        fau_attn_prod: pad_attention(attn_prod, &rows, tape, hp.l),
        label: review.label,
        user: review.user,
        product: review.product,
    })
}
