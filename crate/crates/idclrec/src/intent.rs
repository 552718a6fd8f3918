//! User-level categorical intent: select past intents similar to the most
//! recent one, score their mutual relevance, and aggregate them with
//! importance weights.
//!
//! Selection compares `sigmoid(i_last . i_t)` against the threshold; it is a
//! hard, non-differentiable gate computed on values, so gradients flow only
//! through the selected rows and the importance weights.

use crate::autodiff::{Tape, Var};
use crate::matrix::{dot, sigmoid, Matrix};

/// Timesteps whose intents inform the categorical intent. Positions are
/// 0-based row indices into the `N x d` intent matrix; the last position is
/// always present and always last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentSelection {
    pub indices: Vec<usize>,
}

impl IntentSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Select valid timesteps whose intent is at least `delta`-similar to the
/// most recent intent (sigmoid of the dot product), plus the most recent
/// timestep itself. Padding positions are never selectable.
pub fn select_similar(intents: &Matrix, valid_len: usize, delta: f64) -> IntentSelection {
    let n = intents.rows;
    debug_assert!(valid_len >= 1 && valid_len <= n);
    let last = intents.row(n - 1);
    let mut indices = Vec::new();
    for t in n - valid_len..n - 1 {
        if sigmoid(dot(last, intents.row(t))) >= delta {
            indices.push(t);
        }
    }
    indices.push(n - 1);
    IntentSelection { indices }
}

/// Pairwise relevance scores of the selected intents:
/// `sigmoid(Q2 K2^T / sqrt(d))` with bias-free projections.
pub fn relevance_scores(tape: &Tape, wq: Var, wk: Var, selected: Var) -> Var {
    let (_, d) = tape.shape(selected);
    let q = tape.matmul(selected, wq);
    let k = tape.matmul(selected, wk);
    let scaled = tape.scale(tape.matmul_tb(q, k), 1.0 / (d as f64).sqrt());
    tape.sigmoid(scaled)
}

/// Importance weights: softmax over per-intent relevance sums that exclude
/// the self-relevance diagonal. A `1 x m` probability vector.
pub fn importance_weights(tape: &Tape, scores: Var) -> Var {
    let sums = tape.sum_rows_excl_diag(scores);
    tape.softmax_rows(sums, None)
}

/// Uniform weights `1/m`, the average-pooling replacement for importance
/// weights.
pub fn uniform_weights(tape: &Tape, m: usize) -> Var {
    tape.leaf(Matrix::row_vec(vec![1.0 / m as f64; m]))
}

/// Weighted sum of the selected intents: the `1 x d` categorical intent.
pub fn categorical_intent(tape: &Tape, selected: Var, weights: Var) -> Var {
    tape.matmul(weights, selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_flat;
    use crate::rng::Rng;

    fn intents_from_rows(rows: &[&[f64]]) -> Matrix {
        let d = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), d, data)
    }

    #[test]
    fn select_orthogonal_keeps_only_last() {
        // sigmoid(0) = 0.5 < 0.6, so orthogonal intents never qualify.
        let intents = intents_from_rows(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0]]);
        let sel = select_similar(&intents, 3, 0.6);
        assert_eq!(sel.indices, vec![2]);
    }

    #[test]
    fn select_half_threshold_keeps_nonnegative_dots() {
        let intents = intents_from_rows(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.5, 0.5], &[1.0, 1.0]]);
        let sel = select_similar(&intents, 4, 0.5);
        // dots with last row: 1.0, -1.0, 1.0 -> keep t=0 and t=2.
        assert_eq!(sel.indices, vec![0, 2, 3]);
    }

    #[test]
    fn select_zero_threshold_keeps_all_valid() {
        let mut rng = Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..5 * 3).map(|_| rng.next_normal()).collect();
        let intents = Matrix::from_vec(5, 3, data);
        let sel = select_similar(&intents, 5, 0.0);
        assert_eq!(sel.indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn select_never_includes_pads() {
        let mut rng = Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..6 * 3).map(|_| rng.next_normal()).collect();
        let intents = Matrix::from_vec(6, 3, data);
        let sel = select_similar(&intents, 2, 0.0);
        // Only positions 4 and 5 are valid.
        assert_eq!(sel.indices, vec![4, 5]);
    }

    #[test]
    fn selection_nested_in_threshold() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<f64> = (0..8 * 4).map(|_| rng.next_normal()).collect();
            let intents = Matrix::from_vec(8, 4, data);
            let valid = 1 + rng.next_usize(8);
            let mut previous: Option<Vec<usize>> = None;
            for step in 0..=10 {
                let delta = step as f64 / 10.0;
                let sel = select_similar(&intents, valid, delta).indices;
                if let Some(prev) = &previous {
                    assert!(
                        sel.iter().all(|t| prev.contains(t)),
                        "raising delta added timesteps"
                    );
                }
                previous = Some(sel);
            }
        }
    }

    #[test]
    fn relevance_zero_projections_give_half() {
        let tape = Tape::new();
        let wq = tape.leaf(Matrix::zeros(3, 3));
        let wk = tape.leaf(Matrix::zeros(3, 3));
        let sel = tape.leaf(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = relevance_scores(&tape, wq, wk, sel);
        tape.with_value(s, |m| {
            assert_eq!((m.rows, m.cols), (2, 2));
            assert!(m.data.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        });
    }

    #[test]
    fn relevance_singleton_is_one_by_one() {
        let tape = Tape::new();
        let wq = tape.leaf(Matrix::zeros(2, 2));
        let wk = tape.leaf(Matrix::zeros(2, 2));
        let sel = tape.leaf(Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let s = relevance_scores(&tape, wq, wk, sel);
        assert_eq!(tape.shape(s), (1, 1));
    }

    #[test]
    fn relevance_identity_projection_matches_oracle() {
        let mut rng = Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..3 * 4).map(|_| rng.next_normal()).collect();
        let sel_m = Matrix::from_vec(3, 4, data);
        let eye = {
            let mut m = Matrix::zeros(4, 4);
            for i in 0..4 {
                m.set(i, i, 1.0);
            }
            m
        };
        let tape = Tape::new();
        let wq = tape.leaf(eye.clone());
        let wk = tape.leaf(eye);
        let sel = tape.leaf(sel_m.clone());
        let s = relevance_scores(&tape, wq, wk, sel);
        tape.with_value(s, |m| {
            for i in 0..3 {
                for j in 0..3 {
                    let expect = sigmoid(dot(sel_m.row(i), sel_m.row(j)) / 2.0);
                    assert!((m.get(i, j) - expect).abs() < 1e-6);
                }
            }
        });
    }

    #[test]
    fn importance_singleton_is_one() {
        let tape = Tape::new();
        let s = tape.leaf(Matrix::scalar(0.73));
        let beta = importance_weights(&tape, s);
        tape.with_value(beta, |m| assert_eq!(m.data, vec![1.0]));
    }

    #[test]
    fn importance_symmetric_pair_is_half_half() {
        let tape = Tape::new();
        let s = tape.leaf(Matrix::from_vec(2, 2, vec![0.9, 0.3, 0.3, 0.1]));
        let beta = importance_weights(&tape, s);
        tape.with_value(beta, |m| {
            assert!((m.data[0] - 0.5).abs() < 1e-12);
            assert!((m.data[1] - 0.5).abs() < 1e-12);
        });
    }

    #[test]
    fn importance_matches_softmax_oracle() {
        // Off-diagonal row sums 1.2, 0.8, 0.8; frozen oracle values from a
        // direct max-subtracted softmax evaluation.
        let tape = Tape::new();
        let s = tape.leaf(Matrix::from_vec(
            3,
            3,
            vec![9.0, 0.7, 0.5, 0.4, 9.0, 0.4, 0.5, 0.3, 9.0],
        ));
        let beta = importance_weights(&tape, s);
        tape.with_value(beta, |m| {
            let expect = [0.4272335603, 0.2863832198, 0.2863832198];
            for (got, want) in m.data.iter().zip(expect) {
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        });
    }

    #[test]
    fn importance_is_probability_vector() {
        let mut rng = Rng::seed_from_u64(5);
        for m in 1..=20 {
            let data: Vec<f64> = (0..m * m).map(|_| rng.next_f64()).collect();
            let tape = Tape::new();
            let s = tape.leaf(Matrix::from_vec(m, m, data));
            let beta = importance_weights(&tape, s);
            tape.with_value(beta, |b| {
                assert!(b.data.iter().all(|&v| v >= 0.0));
                let sum: f64 = b.data.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "m={m} sum={sum}");
            });
        }
    }

    #[test]
    fn categorical_intent_examples() {
        let tape = Tape::new();
        // Singleton selection: the categorical intent is the last intent.
        let single = tape.leaf(Matrix::from_vec(1, 2, vec![0.3, -0.7]));
        let beta = uniform_weights(&tape, 1);
        let iu = categorical_intent(&tape, single, beta);
        tape.with_value(iu, |m| assert_eq!(m.data, vec![0.3, -0.7]));

        // All intents equal: any convex weights reproduce that vector.
        let same = tape.leaf(Matrix::from_vec(3, 2, vec![1.5, 2.5, 1.5, 2.5, 1.5, 2.5]));
        let w = tape.leaf(Matrix::row_vec(vec![0.2, 0.5, 0.3]));
        let iu = categorical_intent(&tape, same, w);
        tape.with_value(iu, |m| {
            assert!((m.data[0] - 1.5).abs() < 1e-12);
            assert!((m.data[1] - 2.5).abs() < 1e-12);
        });

        // Two axis-aligned intents with equal weights.
        let two = tape.leaf(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let w = tape.leaf(Matrix::row_vec(vec![0.5, 0.5]));
        let iu = categorical_intent(&tape, two, w);
        tape.with_value(iu, |m| assert_eq!(m.data, vec![0.5, 0.5]));
    }

    #[test]
    fn categorical_intent_in_convex_hull() {
        let mut rng = Rng::seed_from_u64(6);
        for _ in 0..10 {
            let m = 2 + rng.next_usize(5);
            let data: Vec<f64> = (0..m * 3).map(|_| rng.next_normal()).collect();
            let rows = Matrix::from_vec(m, 3, data);
            let tape = Tape::new();
            let sel = tape.leaf(rows.clone());
            let sdata: Vec<f64> = (0..m * m).map(|_| rng.next_f64()).collect();
            let s = tape.leaf(Matrix::from_vec(m, m, sdata));
            let beta = importance_weights(&tape, s);
            let iu = categorical_intent(&tape, sel, beta);
            tape.with_value(iu, |v| {
                for c in 0..3 {
                    let lo = (0..m).map(|r| rows.get(r, c)).fold(f64::INFINITY, f64::min);
                    let hi = (0..m)
                        .map(|r| rows.get(r, c))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(v.data[c] >= lo - 1e-12 && v.data[c] <= hi + 1e-12);
                }
            });
        }
    }

    #[test]
    fn zero_projections_equal_mean_pooling_exactly() {
        // Uniform relevance makes beta exactly 1/m, so the weighted sum must
        // match the explicit uniform-weight path bit for bit.
        let mut rng = Rng::seed_from_u64(7);
        let m = 5;
        let rows = Matrix::from_vec(m, 4, (0..m * 4).map(|_| rng.next_normal()).collect());
        let tape = Tape::new();
        let sel = tape.leaf(rows.clone());
        let wq = tape.leaf(Matrix::zeros(4, 4));
        let wk = tape.leaf(Matrix::zeros(4, 4));
        let s = relevance_scores(&tape, wq, wk, sel);
        let beta = importance_weights(&tape, s);
        let weighted = categorical_intent(&tape, sel, beta);
        let uniform = uniform_weights(&tape, m);
        let pooled = categorical_intent(&tape, sel, uniform);
        let a = tape.value_clone(weighted);
        let b = tape.value_clone(pooled);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn gradients_flow_through_weights_and_selected_rows() {
        let mut rng = Rng::seed_from_u64(8);
        let mut theta: Vec<f64> = (0..4 * 3 + 2 * 9).map(|_| rng.next_normal() * 0.5).collect();
        let build = |tape: &Tape, t: &[f64]| -> (Vec<Var>, Var) {
            let intents = tape.leaf(Matrix::from_vec(4, 3, t[..12].to_vec()));
            let wq = tape.leaf(Matrix::from_vec(3, 3, t[12..21].to_vec()));
            let wk = tape.leaf(Matrix::from_vec(3, 3, t[21..30].to_vec()));
            // Fixed full selection keeps the gate stable under perturbation.
            let sel = tape.gather_rows(intents, vec![0, 1, 2, 3]);
            let s = relevance_scores(tape, wq, wk, sel);
            let beta = importance_weights(tape, s);
            let iu = categorical_intent(tape, sel, beta);
            let sq = tape.mul_elem(iu, iu);
            (vec![intents, wq, wk], tape.mean_all(sq))
        };
        let tape = Tape::new();
        let (leaves, loss) = build(&tape, &theta);
        tape.backward(loss);
        let mut analytic = Vec::new();
        for leaf in leaves {
            let (r, c) = tape.shape(leaf);
            let g = tape.take_grad(leaf).unwrap_or_else(|| Matrix::zeros(r, c));
            analytic.extend_from_slice(&g.data);
        }
        let sample: Vec<usize> = (0..theta.len()).collect();
        let rel = grad_check_flat(
            &mut theta,
            &analytic,
            |t| {
                let tape = Tape::new();
                let (_, loss) = build(&tape, t);
                tape.value_at(loss, 0, 0)
            },
            1e-5,
            &sample,
        )
        .unwrap();
        assert!(rel < 1e-4, "max relative error {rel}");
    }
}
