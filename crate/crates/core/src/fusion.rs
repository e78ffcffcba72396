//! Knowledge infusion and severity prediction: cross-attention from text
//! bigrams onto graph node representations, masked mean pooling, the
//! classifier head, and the ordinal soft-label loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// How cross-attention turns scores into fused representations.
///
/// The score matrix has one row per bigram and one column per graph node.
/// `GatedBigramValues` (default) keeps the values on the text side and
/// multiplies each bigram value vector by its strongest node affinity, i.e.
/// the row maximum of the score matrix. `KgValues` uses the score matrix to
/// mix node value vectors instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CrossMode {
    #[default]
    GatedBigramValues,
    KgValues,
}

/// Cross-attention projection parameters, one `(d, d_k)` triple per head
/// plus the `(d, d)` output projection.
pub struct CrossAttnVars {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
    pub out: Var,
}

/// Cross-attention result with retained per-head score matrices and gate
/// columns for the explanation module. Retained rows at masked bigram
/// positions are zeroed.
pub struct CrossAttentionOutput {
    pub out: Var,
    /// Per head: `(L-1, |V|)` node-affinity distributions.
    pub scores: Vec<Array2<f64>>,
    /// Per head: `(L-1, 1)` gate values (row maxima of the scores). Also
    /// populated in `KgValues` mode, where it is retained for saliency only.
    pub gates: Vec<Array2<f64>>,
}

/// Multi-head cross-attention: queries from bigram vectors, keys from graph
/// node vectors. Rows of the score matrix are softmax distributions over
/// nodes. Masked bigram rows of the output are zeroed exactly.
pub fn cross_attention(
    tape: &mut Tape,
    bigrams: Var,
    bigram_mask: &[bool],
    graph_nodes: Var,
    params: &CrossAttnVars,
    mode: CrossMode,
) -> Result<CrossAttentionOutput> {
    let node_count = tape.value(graph_nodes).nrows();
    if node_count == 0 {
        return Err(Error::Shape("cross_attention needs >= 1 graph node".into()));
    }
    let all_nodes = vec![true; node_count];
    let mut heads = Vec::with_capacity(params.q.len());
    let mut scores_kept = Vec::with_capacity(params.q.len());
    let mut gates_kept = Vec::with_capacity(params.q.len());
    for h in 0..params.q.len() {
        let d_k = tape.value(params.q[h]).ncols();
        let q = tape.matmul(bigrams, params.q[h]);
        let k = tape.matmul(graph_nodes, params.k[h]);
        let k_t = tape.transpose(k);
        let raw = tape.matmul(q, k_t);
        let raw = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
        let scores = tape.softmax_masked_rows(raw, &all_nodes)?;
        let gates = tape.row_max(scores);

        let mut s_val = tape.value(scores).clone();
        let mut g_val = tape.value(gates).clone();
        for (r, &valid) in bigram_mask.iter().enumerate() {
            if !valid {
                s_val.row_mut(r).fill(0.0);
                g_val[[r, 0]] = 0.0;
            }
        }
        scores_kept.push(s_val);
        gates_kept.push(g_val);

        let head = match mode {
            CrossMode::GatedBigramValues => {
                let values = tape.matmul(bigrams, params.v[h]);
                tape.mul_col(values, gates)
            }
            CrossMode::KgValues => {
                let values = tape.matmul(graph_nodes, params.v[h]);
                tape.matmul(scores, values)
            }
        };
        heads.push(head);
    }
    let joined = tape.concat_cols(&heads);
    let projected = tape.matmul(joined, params.out);
    let out = tape.zero_rows(projected, bigram_mask);
    Ok(CrossAttentionOutput {
        out,
        scores: scores_kept,
        gates: gates_kept,
    })
}

/// Mean of the valid rows only; excluded rows are never read.
/// Errors if the mask is all-zero.
pub fn masked_mean_pool(tape: &mut Tape, rows: Var, mask: &[bool]) -> Result<Var> {
    tape.mean_rows_masked(rows, mask)
}

/// Classifier head parameters: two affine maps with GELU between.
pub struct ClassifierVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Logits for the pooled representation, shape `(1, C)`.
pub fn classifier_logits(tape: &mut Tape, pooled: Var, params: &ClassifierVars) -> Var {
    let h = tape.matmul(pooled, params.w1);
    let h = tape.add_row(h, params.b1);
    let h = tape.gelu(h);
    let logits = tape.matmul(h, params.w2);
    tape.add_row(logits, params.b2)
}

/// Softmax probabilities from logits plus the predicted class, with argmax
/// ties broken toward the lower severity index.
pub fn classify_from_logits(logits: &[f64]) -> (Vec<f64>, usize) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / denom).collect();
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = j;
        }
    }
    (probs, best)
}

/// Ordinal soft-label distribution over `C` classes:
/// `rho_j = exp(-beta * |y - j|) / sum_k exp(-beta * |y - k|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelDistribution {
    pub rho: Vec<f64>,
}

pub fn soft_labels(y: usize, beta: f64, class_count: usize) -> Result<SoftLabelDistribution> {
    if y >= class_count {
        return Err(Error::Config(format!(
            "label {y} out of range for {class_count} classes"
        )));
    }
    if beta < 0.0 {
        return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
    }
    let weights: Vec<f64> = (0..class_count)
        .map(|j| (-beta * (y as f64 - j as f64).abs()).exp())
        .collect();
    let denom: f64 = weights.iter().sum();
    Ok(SoftLabelDistribution {
        rho: weights.into_iter().map(|w| w / denom).collect(),
    })
}

/// Cross-entropy of a predicted distribution against a soft label:
/// `-sum_j rho_j ln(yhat_j)`. Errors on non-positive predicted entries;
/// the training path avoids this by working in logit space.
pub fn ordinal_loss(yhat: &[f64], labels: &SoftLabelDistribution) -> Result<f64> {
    if yhat.len() != labels.rho.len() {
        return Err(Error::Shape(format!(
            "ordinal_loss got {} predictions for {} classes",
            yhat.len(),
            labels.rho.len()
        )));
    }
    let mut loss = 0.0;
    for (index, (&p, &r)) in yhat.iter().zip(&labels.rho).enumerate() {
        if p <= 0.0 {
            return Err(Error::NonPositiveProbability { index, value: p });
        }
        loss -= r * p.ln();
    }
    Ok(loss)
}

/// Tape node for the same loss computed stably from logits:
/// `-sum_j rho_j log_softmax(logits)_j`, shape `(1, 1)`.
pub fn ordinal_loss_from_logits(tape: &mut Tape, logits: Var, labels: &SoftLabelDistribution) -> Var {
    let logp = tape.log_softmax_rows(logits);
    let rho_col = tape.leaf(Array2::from_shape_vec((labels.rho.len(), 1), labels.rho.clone()).unwrap());
    let weighted = tape.matmul(logp, rho_col);
    tape.scale(weighted, -1.0)
}
