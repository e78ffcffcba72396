//! Contextual text encoding: stacked BiLSTM over token embeddings, masked
//! multi-head self-attention over unigrams, and bigram convolution.
//!
//! All functions record onto a [`Tape`] so the training loop can
//! differentiate through them. Parameters enter as tape leaves; see
//! [`crate::model`] for how they are registered and initialized.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// One LSTM direction: input, recurrent and bias parameters.
///
/// `w_x` is `(in_dim, 4h)`, `w_h` is `(h, 4h)`, `b` is `(1, 4h)` with gate
/// order `[input, forget, cell, output]`.
#[derive(Clone, Copy)]
pub struct LstmDirVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    pub hidden: usize,
}

/// Stacked bidirectional LSTM: one (forward, backward) pair per layer.
pub struct BiLstmVars {
    pub layers: Vec<(LstmDirVars, LstmDirVars)>,
}

fn lstm_direction(tape: &mut Tape, input: Var, params: &LstmDirVars) -> Var {
    let len = tape.value(input).nrows();
    let h = params.hidden;
    let zero = tape.leaf(Array2::zeros((1, h)));
    let mut h_prev = zero;
    let mut c_prev = zero;
    // One projection for the whole sequence; steps slice rows out of it.
    let xw_all = tape.matmul(input, params.w_x);
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let xw = tape.slice_rows(xw_all, t, 1);
        let hw = tape.matmul(h_prev, params.w_h);
        let z = tape.add(xw, hw);
        let z = tape.add_row(z, params.b);
        let i_gate = tape.slice_cols(z, 0, h);
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.slice_cols(z, h, h);
        let f_gate = tape.sigmoid(f_gate);
        let g_cell = tape.slice_cols(z, 2 * h, h);
        let g_cell = tape.tanh(g_cell);
        let o_gate = tape.slice_cols(z, 3 * h, h);
        let o_gate = tape.sigmoid(o_gate);
        let fc = tape.mul(f_gate, c_prev);
        let ig = tape.mul(i_gate, g_cell);
        let c = tape.add(fc, ig);
        let c_act = tape.tanh(c);
        let h_t = tape.mul(o_gate, c_act);
        outputs.push(h_t);
        h_prev = h_t;
        c_prev = c;
    }
    tape.concat_rows(&outputs)
}

/// Encode an `(L, in_dim)` embedding matrix into `(L, d)` contextual
/// vectors, `d = 2h`.
///
/// The recurrence runs over the packed valid subsequence only, then results
/// are scattered back to their original positions; masked rows are never
/// read and their output rows are exactly zero. This keeps every valid
/// output independent of both the values and the amount of padding.
pub fn bilstm_encode(tape: &mut Tape, input: Var, mask: &[bool], params: &BiLstmVars) -> Result<Var> {
    let (rows, _) = tape.value(input).dim();
    if rows < 2 {
        return Err(Error::Shape(format!("bilstm_encode needs L >= 2, got {rows}")));
    }
    assert_eq!(rows, mask.len(), "mask length");
    let valid: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if valid.is_empty() {
        return Err(Error::AllMasked("bilstm_encode".into()));
    }
    {
        let value = tape.value(input);
        if valid
            .iter()
            .any(|&i| value.row(i).iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("bilstm_encode input".into()));
        }
    }

    let all_valid = valid.len() == rows;
    let mut current = if all_valid {
        input
    } else {
        let parts: Vec<Var> = valid.iter().map(|&i| tape.slice_rows(input, i, 1)).collect();
        tape.concat_rows(&parts)
    };
    for (fwd, bwd) in &params.layers {
        let forward_out = lstm_direction(tape, current, fwd);
        let reversed_in = tape.reverse_rows(current);
        let backward_raw = lstm_direction(tape, reversed_in, bwd);
        let backward_out = tape.reverse_rows(backward_raw);
        current = tape.concat_cols(&[forward_out, backward_out]);
    }
    if all_valid {
        return Ok(current);
    }
    // Scatter: rows at masked positions are exactly zero.
    let mut scatter = Array2::zeros((rows, valid.len()));
    for (i, &pos) in valid.iter().enumerate() {
        scatter[[pos, i]] = 1.0;
    }
    let scatter = tape.leaf(scatter);
    Ok(tape.matmul(scatter, current))
}

/// Multi-head projection parameters: per-head query/key/value matrices
/// `(d, d_k)` and the output projection `(d, d)`.
pub struct MultiHeadVars {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_o: Var,
}

/// Attention output plus retained per-head weight matrices for explanation.
/// Retained rows at masked query positions are zeroed so they carry no
/// information from padding.
pub struct AttentionOutput {
    pub out: Var,
    pub retained: Vec<Array2<f64>>,
}

/// Masked multi-head self-attention over contextual unigram vectors.
///
/// Keys at masked positions are excluded from every softmax (probability
/// exactly zero), so changing values there cannot alter valid outputs.
/// Errors if the mask has no valid position.
pub fn unigram_attention(
    tape: &mut Tape,
    h: Var,
    mask: &[bool],
    params: &MultiHeadVars,
) -> Result<AttentionOutput> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked("unigram_attention".into()));
    }
    let mut heads = Vec::with_capacity(params.w_q.len());
    let mut retained = Vec::with_capacity(params.w_q.len());
    for k in 0..params.w_q.len() {
        let d_k = tape.value(params.w_q[k]).ncols();
        let q = tape.matmul(h, params.w_q[k]);
        let key = tape.matmul(h, params.w_k[k]);
        let v = tape.matmul(h, params.w_v[k]);
        let key_t = tape.transpose(key);
        let scores = tape.matmul(q, key_t);
        let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
        let attn = tape.softmax_masked_rows(scores, mask)?;
        let mut kept = tape.value(attn).clone();
        for (r, &valid) in mask.iter().enumerate() {
            if !valid {
                kept.row_mut(r).fill(0.0);
            }
        }
        retained.push(kept);
        heads.push(tape.matmul(attn, v));
    }
    let joined = tape.concat_cols(&heads);
    let out = tape.matmul(joined, params.w_o);
    Ok(AttentionOutput { out, retained })
}

/// Bigram convolution parameters: kernel stored as `(2d, d)` for row-vector
/// application, bias `(1, d)`.
pub struct BigramConvVars {
    pub w: Var,
    pub b: Var,
}

/// Width-2 convolution over adjacent contextual unigram vectors:
/// `b_j = GELU(W [h_j ; h_{j+1}] + b)` for `j = 0 .. L-2`, plus the bigram
/// validity mask `mask[j] && mask[j+1]`.
pub fn bigram_conv(
    tape: &mut Tape,
    h: Var,
    mask: &[bool],
    params: &BigramConvVars,
) -> Result<(Var, Vec<bool>)> {
    let len = tape.value(h).nrows();
    if len < 2 {
        return Err(Error::Shape(format!("bigram_conv needs L >= 2, got {len}")));
    }
    let left = tape.slice_rows(h, 0, len - 1);
    let right = tape.slice_rows(h, 1, len - 1);
    let pairs = tape.concat_cols(&[left, right]);
    let projected = tape.matmul(pairs, params.w);
    let shifted = tape.add_row(projected, params.b);
    let out = tape.gelu(shifted);
    let bigram_mask: Vec<bool> = (0..len - 1).map(|j| mask[j] && mask[j + 1]).collect();
    Ok((out, bigram_mask))
}

/// Number of valid bigrams implied by a token mask.
pub fn bigram_mask_of(mask: &[bool]) -> Vec<bool> {
    (0..mask.len().saturating_sub(1))
        .map(|j| mask[j] && mask[j + 1])
        .collect()
}
