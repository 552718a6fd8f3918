//! Intent-interest disentanglement: causal cross-attention over previous
//! behaviors extracts the interest representation; the residual against the
//! behavior representation is the intent.
//!
//! Queries come from the current-step representations, keys and values from
//! the one-step-shifted (zero-padded) representations, so position `t` only
//! ever aggregates behaviors strictly before `t`. Projections carry bias
//! terms so the zero pad row still produces a usable key/value.

use crate::autodiff::{BoolMat, Tape, Var};
use crate::encoder::LN_EPS;
use crate::params::BoundCross;

/// Interest and intent halves of a behavior representation.
#[derive(Debug, Clone, Copy)]
pub struct DisentangledPair {
    pub interest: Var,
    pub intent: Var,
}

/// Shift rows down one step: row 1 becomes the zero vector, row t takes the
/// behavior at t-1.
pub fn shift_pad(tape: &Tape, h: Var) -> Var {
    tape.shift_down(h)
}

/// Single-head scaled dot-product attention of current behaviors over
/// previous ones, future positions masked.
pub fn causal_cross_attention(tape: &Tape, cross: &BoundCross, h_cur: Var, h_pre: Var) -> Var {
    let (n, d) = tape.shape(h_cur);
    let q = tape.add_row(tape.matmul(h_cur, cross.wq), cross.bq);
    let k = tape.add_row(tape.matmul(h_pre, cross.wk), cross.bk);
    let v = tape.add_row(tape.matmul(h_pre, cross.wv), cross.bv);
    let scores = tape.scale(tape.matmul_tb(q, k), 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scores, Some(BoolMat::causal(n)));
    tape.matmul(weights, v)
}

/// Interest representation: layer-normalized residual sum of the attention
/// output and the behavior representation.
pub fn interest(tape: &Tape, cross: &BoundCross, h: Var, r_hat: Var) -> Var {
    let sum = tape.add(r_hat, h);
    tape.layer_norm(sum, cross.ln_gain, cross.ln_bias, LN_EPS)
}

/// Intent as the exact residual of behavior minus interest.
pub fn intent_residual(tape: &Tape, h: Var, r: Var) -> Var {
    tape.sub(h, r)
}

/// Full disentanglement of a behavior representation.
pub fn disentangle(tape: &Tape, cross: &BoundCross, h: Var) -> DisentangledPair {
    let h_pre = shift_pad(tape, h);
    let r_hat = causal_cross_attention(tape, cross, h, h_pre);
    let r = interest(tape, cross, h, r_hat);
    let i = intent_residual(tape, h, r);
    DisentangledPair {
        interest: r,
        intent: i,
    }
}
