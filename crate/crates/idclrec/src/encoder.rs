//! Item + position embedding and the causal self-attention sequence encoder.
//!
//! The encoder is the standard SASRec stack: per block, multi-head causal
//! self-attention (no projection biases), residual + post layer norm, a
//! position-wise ReLU feed-forward with biases, residual + post layer norm.
//! Dropout is applied to the attention and feed-forward outputs before their
//! residual additions. Left padding positions stay attendable; causality is
//! the only attention mask.

use crate::autodiff::{BoolMat, Tape, Var};
use crate::data::PaddedSequence;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{BoundBlock, BoundParams};
use crate::rng::Rng;

/// Variance guard used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-8;

/// Dropout state for one forward pass; absent means deterministic forward.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

/// Inverted-dropout mask: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Matrix {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn apply_dropout(tape: &Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let (rows, cols) = tape.shape(x);
            let mask = dropout_mask(rows, cols, d.rate, d.rng);
            tape.mul_mask(x, mask)
        }
        _ => x,
    }
}

/// Sequence embedding: `item_embedding[items[t]] + position_embedding[t]`
/// per position.
pub fn embed(tape: &Tape, bp: &BoundParams, seq: &PaddedSequence) -> Result<Var> {
    let (vocab_rows, _) = tape.shape(bp.item_embedding);
    let (n, _) = tape.shape(bp.position_embedding);
    if seq.items.len() != n {
        return Err(Error::Shape(format!(
            "sequence length {} != position table length {n}",
            seq.items.len()
        )));
    }
    let mut indices = Vec::with_capacity(seq.items.len());
    for &item in &seq.items {
        if item as usize >= vocab_rows {
            return Err(Error::Shape(format!(
                "item index {item} out of range 0..{vocab_rows}"
            )));
        }
        indices.push(item as usize);
    }
    let items = tape.gather_rows(bp.item_embedding, indices);
    Ok(tape.add(items, bp.position_embedding))
}

fn attention_block(
    tape: &Tape,
    block: &BoundBlock,
    x: Var,
    heads: usize,
    mask: &BoolMat,
) -> Var {
    let (_, d) = tape.shape(x);
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = tape.matmul(x, block.wq);
    let k = tape.matmul(x, block.wk);
    let v = tape.matmul(x, block.wv);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let scores = tape.scale(tape.matmul_tb(qh, kh), scale);
        let weights = tape.softmax_rows(scores, Some(mask.clone()));
        head_outs.push(tape.matmul(weights, vh));
    }
    let merged = if heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    tape.matmul(merged, block.wo)
}

fn feed_forward(tape: &Tape, block: &BoundBlock, x: Var) -> Var {
    let h = tape.add_row(tape.matmul(x, block.ffn_w1), block.ffn_b1);
    let h = tape.relu(h);
    tape.add_row(tape.matmul(h, block.ffn_w2), block.ffn_b2)
}

/// Run the encoder stack on a sequence embedding, producing the behavior
/// representation. Errors if the output diverges to non-finite values.
pub fn encode(
    tape: &Tape,
    bp: &BoundParams,
    e: Var,
    heads: usize,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let (n, _) = tape.shape(e);
    let mask = BoolMat::causal(n);
    let mut x = e;
    for block in &bp.blocks {
        let attn = attention_block(tape, block, x, heads, &mask);
        let attn = apply_dropout(tape, attn, &mut dropout);
        let res = tape.add(x, attn);
        x = tape.layer_norm(res, block.ln1_gain, block.ln1_bias, LN_EPS);
        let ffn = feed_forward(tape, block, x);
        let ffn = apply_dropout(tape, ffn, &mut dropout);
        let res = tape.add(x, ffn);
        x = tape.layer_norm(res, block.ln2_gain, block.ln2_bias, LN_EPS);
    }
    let finite = tape.with_value(x, Matrix::all_finite);
    if !finite {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(x)
}
