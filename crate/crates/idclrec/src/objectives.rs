//! Training objectives: the dynamic intent loss, InfoNCE, intent-intent
//! contrastive loss with false-negative removal, the intent-item contrastive
//! loss over item centroids, the full-softmax recommendation loss and their
//! weighted total.
//!
//! Batch reductions are arithmetic means over contributing terms, so loss
//! weights stay comparable across batch sizes. Similarity inside InfoNCE is
//! the raw dot product; the bounded sigmoid similarity is used only where a
//! probability-like value is needed (dynamic loss, intent selection).

use crate::autodiff::{BoolMat, Tape, Var};
use crate::data::PaddedSequence;
use crate::error::{Error, Result};
use crate::intent::IntentSelection;

/// Loss-term weights and the contrastive temperature. A weight of exactly
/// zero removes its term from the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_cl1: f64,
    pub lambda_cl2: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.lambda_d < 0.0 || self.lambda_cl1 < 0.0 || self.lambda_cl2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean over consecutive valid intent pairs of `1 - sigmoid(i_t . i_{t+1})`.
/// Zero when the sequence has fewer than two valid positions.
pub fn dynamic_loss(tape: &Tape, intents: Var, valid_len: usize) -> Var {
    let (n, _) = tape.shape(intents);
    debug_assert!(valid_len <= n);
    if valid_len < 2 {
        return tape.scalar(0.0);
    }
    let first = n - valid_len;
    let left = tape.gather_rows(intents, (first..n - 1).collect());
    let right = tape.gather_rows(intents, (first + 1..n).collect());
    let dots = tape.rowwise_dot(left, right);
    let sims = tape.sigmoid(dots);
    let terms = tape.affine(sims, -1.0, 1.0);
    tape.mean_all(terms)
}

/// InfoNCE with dot-product similarity: pull `anchor` toward `positive`,
/// away from `negatives`. Zero when there are no negatives.
pub fn info_nce(tape: &Tape, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Var {
    debug_assert!(tau > 0.0);
    let mut candidates = Vec::with_capacity(1 + negatives.len());
    candidates.push(positive);
    candidates.extend_from_slice(negatives);
    let stacked = tape.concat_rows(&candidates);
    let logits = tape.scale(tape.matmul_tb(anchor, stacked), 1.0 / tau);
    let loss = tape.xent_rows(logits, vec![0], None);
    tape.mean_all(loss)
}

/// Intent-intent contrastive loss over a paired batch: for each pair, both
/// anchor directions against the joint batch, excluding in-batch candidates
/// that share the anchor's target item (false negatives). Mean over pairs.
pub fn cl1_loss(
    tape: &Tape,
    orig_intents: &[Var],
    aug_intents: &[Var],
    targets: &[u32],
    tau: f64,
) -> Var {
    let b = orig_intents.len();
    assert_eq!(aug_intents.len(), b);
    assert_eq!(targets.len(), b);
    if b == 0 {
        return tape.scalar(0.0);
    }
    let mut rows = Vec::with_capacity(2 * b);
    rows.extend_from_slice(orig_intents);
    rows.extend_from_slice(aug_intents);
    let all = tape.concat_rows(&rows);
    let logits = tape.scale(tape.matmul_tb(all, all), 1.0 / tau);
    let mut mask = BoolMat::filled(2 * b, 2 * b, false);
    let mut positives = Vec::with_capacity(2 * b);
    for a in 0..2 * b {
        let u = a % b;
        let partner = (a + b) % (2 * b);
        positives.push(partner);
        mask.set(a, partner, true);
        for c in 0..2 * b {
            if c != partner && targets[c % b] != targets[u] {
                mask.set(a, c, true);
            }
        }
    }
    let losses = tape.xent_rows(logits, positives, Some(mask));
    // Each pair contributes two directions; the per-pair mean is twice the
    // mean over all 2B rows.
    tape.scale(tape.mean_all(losses), 2.0)
}

/// Mean embedding of the items interacted at the selected timesteps.
pub fn item_centroid(
    tape: &Tape,
    item_embedding: Var,
    input: &PaddedSequence,
    selection: &IntentSelection,
) -> Var {
    debug_assert!(!selection.indices.is_empty());
    let ids: Vec<usize> = selection
        .indices
        .iter()
        .map(|&t| {
            let item = input.items[t];
            debug_assert!(item > 0, "selected timestep {t} is padding");
            item as usize
        })
        .collect();
    let rows = tape.gather_rows(item_embedding, ids);
    tape.mean_rows(rows)
}

/// Intent-item contrastive loss: per view, align each intent with its item
/// centroid in both directions; negatives are the other intents and
/// centroids of the same view, with no false-negative removal. Mean over
/// pairs of the four-term sum.
pub fn cl2_loss(tape: &Tape, orig: &[(Var, Var)], aug: &[(Var, Var)], tau: f64) -> Var {
    let b = orig.len();
    assert_eq!(aug.len(), b);
    if b == 0 {
        return tape.scalar(0.0);
    }
    let view_losses = |pairs: &[(Var, Var)]| -> Var {
        let mut rows = Vec::with_capacity(2 * b);
        rows.extend(pairs.iter().map(|&(intent, _)| intent));
        rows.extend(pairs.iter().map(|&(_, centroid)| centroid));
        let all = tape.concat_rows(&rows);
        let logits = tape.scale(tape.matmul_tb(all, all), 1.0 / tau);
        let mut mask = BoolMat::filled(2 * b, 2 * b, false);
        let mut positives = Vec::with_capacity(2 * b);
        for a in 0..2 * b {
            let u = a % b;
            let partner = (a + b) % (2 * b);
            positives.push(partner);
            mask.set(a, partner, true);
            for c in 0..2 * b {
                if c % b != u {
                    mask.set(a, c, true);
                }
            }
        }
        let losses = tape.xent_rows(logits, positives, Some(mask));
        tape.mean_all(losses)
    };
    let o = view_losses(orig);
    let a = view_losses(aug);
    // Four directed terms per pair: two per view, each view mean doubled.
    tape.scale(tape.add(o, a), 2.0)
}

/// Rows 1..=num_items of the embedding table: the scoring candidates, with
/// the padding row excluded.
pub fn active_item_rows(tape: &Tape, item_embedding: Var) -> Var {
    let (rows, _) = tape.shape(item_embedding);
    tape.gather_rows(item_embedding, (1..rows).collect())
}

/// Cross-entropy over the full item set for a single user representation.
/// `active_items` must be the pad-free candidate matrix.
pub fn rec_loss(tape: &Tape, user_repr: Var, target: u32, active_items: Var) -> Result<Var> {
    Ok(rec_loss_batch(tape, &[user_repr], &[target], active_items)?)
}

/// Mean full-softmax cross-entropy over a batch of user representations.
pub fn rec_loss_batch(
    tape: &Tape,
    user_reprs: &[Var],
    targets: &[u32],
    active_items: Var,
) -> Result<Var> {
    assert_eq!(user_reprs.len(), targets.len());
    let (num_items, _) = tape.shape(active_items);
    let mut zero_based = Vec::with_capacity(targets.len());
    for &t in targets {
        if t == 0 {
            return Err(Error::Data("recommendation target is the padding item".into()));
        }
        if t as usize > num_items {
            return Err(Error::Data(format!(
                "recommendation target {t} out of range 1..={num_items}"
            )));
        }
        zero_based.push(t as usize - 1);
    }
    let stacked = tape.concat_rows(user_reprs);
    let logits = tape.matmul_tb(stacked, active_items);
    let losses = tape.xent_rows(logits, zero_based, None);
    Ok(tape.mean_all(losses))
}

/// The already-reduced loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rec: Var,
    pub dynamic: Var,
    pub cl1: Var,
    pub cl2: Var,
}

/// Weighted multi-task total. A zero weight removes its term exactly;
/// non-finite parts are rejected by name.
pub fn total_loss(tape: &Tape, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    tape.check_finite(parts.rec, "rec")?;
    tape.check_finite(parts.dynamic, "dynamic")?;
    tape.check_finite(parts.cl1, "cl1")?;
    tape.check_finite(parts.cl2, "cl2")?;
    let mut total = parts.rec;
    for (part, lambda) in [
        (parts.dynamic, weights.lambda_d),
        (parts.cl1, weights.lambda_cl1),
        (parts.cl2, weights.lambda_cl2),
    ] {
        if lambda != 0.0 {
            total = tape.add(total, tape.scale(part, lambda));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{dot, Matrix};
    use crate::rng::Rng;

    fn leaf_row(tape: &Tape, v: &[f64]) -> Var {
        tape.leaf(Matrix::row_vec(v.to_vec()))
    }

    fn random_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.next_normal()).collect())
            .collect()
    }

    // ---- independent oracles ----------------------------------------------

    fn info_nce_oracle(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
        let mut logits = vec![dot(anchor, positive) / tau];
        for n in negatives {
            logits.push(dot(anchor, n) / tau);
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        z.ln() + mx - logits[0]
    }

    /// Enumerates every anchor's negative set explicitly.
    fn cl1_oracle(orig: &[Vec<f64>], aug: &[Vec<f64>], targets: &[u32], tau: f64) -> f64 {
        let b = orig.len();
        let joint: Vec<&Vec<f64>> = orig.iter().chain(aug.iter()).collect();
        let mut total = 0.0;
        for u in 0..b {
            for (anchor, positive) in [(&orig[u], &aug[u]), (&aug[u], &orig[u])] {
                let negatives: Vec<Vec<f64>> = joint
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| *c != u && *c != b + u && targets[c % b] != targets[u])
                    .map(|(_, v)| (*v).clone())
                    .collect();
                total += info_nce_oracle(anchor, positive, &negatives, tau);
            }
        }
        total / b as f64
    }

    fn cl2_oracle(
        orig: &[(Vec<f64>, Vec<f64>)],
        aug: &[(Vec<f64>, Vec<f64>)],
        tau: f64,
    ) -> f64 {
        let b = orig.len();
        let mut total = 0.0;
        for view in [orig, aug] {
            for u in 0..b {
                let others = |skip: usize| -> Vec<Vec<f64>> {
                    let mut negs = Vec::new();
                    for (j, (i_j, c_j)) in view.iter().enumerate() {
                        if j != skip {
                            negs.push(i_j.clone());
                            negs.push(c_j.clone());
                        }
                    }
                    negs
                };
                let (intent, centroid) = &view[u];
                total += info_nce_oracle(intent, centroid, &others(u), tau);
                total += info_nce_oracle(centroid, intent, &others(u), tau);
            }
        }
        total / b as f64
    }

    // ---- dynamic loss ------------------------------------------------------

    #[test]
    fn dynamic_loss_orthogonal_is_half() {
        let tape = Tape::new();
        let intents = tape.leaf(Matrix::from_vec(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let loss = dynamic_loss(&tape, intents, 3);
        assert!((tape.value_at(loss, 0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dynamic_loss_saturates_to_zero() {
        let tape = Tape::new();
        // Consecutive dots around +20: sigmoid saturates, terms vanish.
        let s = 20.0f64.sqrt();
        let intents = tape.leaf(Matrix::from_vec(3, 1, vec![s, s, s]));
        let loss = dynamic_loss(&tape, intents, 3);
        assert!(tape.value_at(loss, 0, 0) < 1e-8);
    }

    #[test]
    fn dynamic_loss_empty_for_single_valid_position() {
        let tape = Tape::new();
        let intents = tape.leaf(Matrix::from_vec(3, 2, vec![9.0; 6]));
        let loss = dynamic_loss(&tape, intents, 1);
        assert_eq!(tape.value_at(loss, 0, 0), 0.0);
    }

    #[test]
    fn dynamic_loss_ignores_padding_rows() {
        let tape = Tape::new();
        // Two valid rows at the end; garbage in the padding rows must not
        // contribute any pair terms.
        let intents = tape.leaf(Matrix::from_vec(
            4,
            2,
            vec![99.0, -99.0, 42.0, 42.0, 1.0, 0.0, 1.0, 0.0],
        ));
        let loss = dynamic_loss(&tape, intents, 2);
        let expect = 1.0 - crate::matrix::sigmoid(1.0);
        assert!((tape.value_at(loss, 0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn dynamic_loss_in_unit_interval_and_monotone() {
        let mut rng = Rng::seed_from_u64(1);
        let tape = Tape::new();
        let data: Vec<f64> = (0..4 * 3).map(|_| rng.next_normal()).collect();
        let intents = tape.leaf(Matrix::from_vec(4, 3, data.clone()));
        let loss = tape.value_at(dynamic_loss(&tape, intents, 4), 0, 0);
        assert!(loss > 0.0 && loss < 1.0);
        // Increasing one consecutive dot (scaling the last row toward its
        // neighbor) decreases the loss.
        let mut closer = data.clone();
        for c in 0..3 {
            closer[3 * 3 + c] = data[2 * 3 + c] * 2.0;
        }
        let intents2 = tape.leaf(Matrix::from_vec(4, 3, closer));
        let loss2 = tape.value_at(dynamic_loss(&tape, intents2, 4), 0, 0);
        assert!(loss2 < loss);
    }

    // ---- info_nce ----------------------------------------------------------

    #[test]
    fn info_nce_no_negatives_is_zero() {
        let tape = Tape::new();
        let a = leaf_row(&tape, &[0.4, -0.2]);
        let p = leaf_row(&tape, &[1.0, 2.0]);
        let loss = info_nce(&tape, a, p, &[], 1.0);
        assert_eq!(tape.value_at(loss, 0, 0), 0.0);
    }

    #[test]
    fn info_nce_closed_form() {
        // a.p = 1, two negatives with a.n = 0, tau = 1:
        // -log(e / (e + 2)) = 0.5514447139...
        let tape = Tape::new();
        let a = leaf_row(&tape, &[1.0, 0.0]);
        let p = leaf_row(&tape, &[1.0, 0.0]);
        let n1 = leaf_row(&tape, &[0.0, 1.0]);
        let n2 = leaf_row(&tape, &[0.0, -1.0]);
        let loss = info_nce(&tape, a, p, &[n1, n2], 1.0);
        assert!((tape.value_at(loss, 0, 0) - 0.5514447139).abs() < 1e-9);
    }

    #[test]
    fn info_nce_equal_logits_counts_candidates() {
        let tape = Tape::new();
        let a = leaf_row(&tape, &[0.7, -0.3]);
        let p = leaf_row(&tape, &[0.5, 1.1]);
        let negs: Vec<Var> = (0..3).map(|_| leaf_row(&tape, &[0.5, 1.1])).collect();
        let loss = info_nce(&tape, a, p, &negs, 1.0);
        assert!((tape.value_at(loss, 0, 0) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_positive_when_negatives_exist() {
        let mut rng = Rng::seed_from_u64(2);
        let tape = Tape::new();
        for _ in 0..10 {
            let a = leaf_row(&tape, &[rng.next_normal(), rng.next_normal()]);
            let p = leaf_row(&tape, &[rng.next_normal(), rng.next_normal()]);
            let n = leaf_row(&tape, &[rng.next_normal(), rng.next_normal()]);
            let loss = info_nce(&tape, a, p, &[n], 0.7);
            assert!(tape.value_at(loss, 0, 0) > 0.0);
        }
    }

    // ---- cl1 ---------------------------------------------------------------

    #[test]
    fn cl1_degenerate_batch_is_zero() {
        let tape = Tape::new();
        let o = leaf_row(&tape, &[1.0, 2.0]);
        let a = leaf_row(&tape, &[0.5, -0.5]);
        let loss = cl1_loss(&tape, &[o], &[a], &[3], 1.0);
        assert_eq!(tape.value_at(loss, 0, 0), 0.0);
    }

    #[test]
    fn cl1_full_masking_is_zero() {
        // Two pairs sharing one target: every cross candidate is a false
        // negative, so both directions collapse to -log 1.
        let mut rng = Rng::seed_from_u64(3);
        let tape = Tape::new();
        let rows = random_rows(&mut rng, 4, 3);
        let o: Vec<Var> = rows[..2].iter().map(|r| leaf_row(&tape, r)).collect();
        let a: Vec<Var> = rows[2..].iter().map(|r| leaf_row(&tape, r)).collect();
        let loss = cl1_loss(&tape, &o, &a, &[5, 5], 1.0);
        assert_eq!(tape.value_at(loss, 0, 0), 0.0);
    }

    #[test]
    fn cl1_matches_enumeration_oracle() {
        let mut rng = Rng::seed_from_u64(4);
        for (b, targets) in [
            (1usize, vec![1u32]),
            (2, vec![1, 2]),
            (3, vec![1, 2, 3]),
            (3, vec![4, 4, 5]),
            (8, vec![1, 2, 3, 1, 2, 6, 7, 6]),
        ] {
            let orig = random_rows(&mut rng, b, 4);
            let aug = random_rows(&mut rng, b, 4);
            let tape = Tape::new();
            let ov: Vec<Var> = orig.iter().map(|r| leaf_row(&tape, r)).collect();
            let av: Vec<Var> = aug.iter().map(|r| leaf_row(&tape, r)).collect();
            let got = tape.value_at(cl1_loss(&tape, &ov, &av, &targets, 0.8), 0, 0);
            let expect = cl1_oracle(&orig, &aug, &targets, 0.8);
            assert!(
                (got - expect).abs() < 1e-6,
                "B={b} targets={targets:?}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn cl1_shared_target_never_increases_negatives() {
        // Adding a same-target pair must not increase the loss contribution
        // of the anchor's negative set (it is masked out).
        let mut rng = Rng::seed_from_u64(5);
        let orig = random_rows(&mut rng, 3, 4);
        let aug = random_rows(&mut rng, 3, 4);
        // Anchor 0's negatives with distinct targets:
        let base = {
            let joint: Vec<&Vec<f64>> = orig.iter().chain(aug.iter()).collect();
            let negs: Vec<Vec<f64>> = joint
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != 0 && *c != 3)
                .map(|(_, v)| (*v).clone())
                .collect();
            negs.len()
        };
        // With pair 1 sharing anchor 0's target, two candidates drop.
        let targets = vec![9, 9, 2];
        let joint: Vec<&Vec<f64>> = orig.iter().chain(aug.iter()).collect();
        let masked: Vec<Vec<f64>> = joint
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != 0 && *c != 3 && targets[c % 3] != targets[0])
            .map(|(_, v)| (*v).clone())
            .collect();
        assert_eq!(base, 4);
        assert_eq!(masked.len(), 2);
    }

    // ---- centroid ----------------------------------------------------------

    #[test]
    fn centroid_examples() {
        let tape = Tape::new();
        let emb = tape.leaf(Matrix::from_vec(
            4,
            2,
            vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 5.0, 5.0],
        ));
        let input = PaddedSequence {
            items: vec![0, 1, 2, 3],
            valid_len: 3,
        };
        // Items 1 and 2 at timesteps 1 and 2: centroid of (2,0) and (0,2).
        let sel = IntentSelection {
            indices: vec![1, 2],
        };
        let c = item_centroid(&tape, emb, &input, &sel);
        tape.with_value(c, |m| assert_eq!(m.data, vec![1.0, 1.0]));

        // Singleton selection of the last step: the most recent item's row.
        let sel = IntentSelection { indices: vec![3] };
        let c = item_centroid(&tape, emb, &input, &sel);
        tape.with_value(c, |m| assert_eq!(m.data, vec![5.0, 5.0]));

        // All selected timesteps hold the same item.
        let input2 = PaddedSequence {
            items: vec![0, 2, 2, 2],
            valid_len: 3,
        };
        let sel = IntentSelection {
            indices: vec![1, 2, 3],
        };
        let c = item_centroid(&tape, emb, &input2, &sel);
        tape.with_value(c, |m| assert_eq!(m.data, vec![0.0, 2.0]));
    }

    // ---- cl2 ---------------------------------------------------------------

    #[test]
    fn cl2_degenerate_batch_is_zero() {
        let tape = Tape::new();
        let pair = (leaf_row(&tape, &[1.0, 0.0]), leaf_row(&tape, &[0.0, 1.0]));
        let pair2 = (leaf_row(&tape, &[1.0, 1.0]), leaf_row(&tape, &[0.5, 0.5]));
        let loss = cl2_loss(&tape, &[pair], &[pair2], 1.0);
        assert_eq!(tape.value_at(loss, 0, 0), 0.0);
    }

    #[test]
    fn cl2_closed_form_orthogonal_pairs() {
        // Intents equal their centroids, cross pairs orthogonal, B = 2:
        // every one of the four terms is -log(e^s / (e^s + 2)).
        let s: f64 = 1.7;
        let r = s.sqrt();
        let tape = Tape::new();
        let u0 = vec![r, 0.0];
        let u1 = vec![0.0, r];
        let orig = [
            (leaf_row(&tape, &u0), leaf_row(&tape, &u0)),
            (leaf_row(&tape, &u1), leaf_row(&tape, &u1)),
        ];
        let aug = [
            (leaf_row(&tape, &u0), leaf_row(&tape, &u0)),
            (leaf_row(&tape, &u1), leaf_row(&tape, &u1)),
        ];
        let got = tape.value_at(cl2_loss(&tape, &orig, &aug, 1.0), 0, 0);
        let term = -(s.exp() / (s.exp() + 2.0)).ln();
        assert!((got - 4.0 * term).abs() < 1e-9, "{got} vs {}", 4.0 * term);
    }

    #[test]
    fn cl2_matches_enumeration_oracle() {
        let mut rng = Rng::seed_from_u64(6);
        for b in [1usize, 2, 3, 8] {
            let orig: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
                .map(|_| {
                    let i: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
                    let c: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
                    (i, c)
                })
                .collect();
            let aug: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
                .map(|_| {
                    let i: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
                    let c: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
                    (i, c)
                })
                .collect();
            let tape = Tape::new();
            let ov: Vec<(Var, Var)> = orig
                .iter()
                .map(|(i, c)| (leaf_row(&tape, i), leaf_row(&tape, c)))
                .collect();
            let av: Vec<(Var, Var)> = aug
                .iter()
                .map(|(i, c)| (leaf_row(&tape, i), leaf_row(&tape, c)))
                .collect();
            let got = tape.value_at(cl2_loss(&tape, &ov, &av, 1.3), 0, 0);
            let expect = cl2_oracle(&orig, &aug, 1.3);
            assert!((got - expect).abs() < 1e-6, "B={b}: {got} vs {expect}");
        }
    }

    // ---- rec loss ----------------------------------------------------------

    #[test]
    fn rec_loss_uniform_two_items_is_log_two() {
        let tape = Tape::new();
        // Pad row plus two items with identical embeddings: equal scores.
        let emb = tape.leaf(Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]));
        let items = active_item_rows(&tape, emb);
        let h = leaf_row(&tape, &[0.3, -0.2]);
        let loss = rec_loss(&tape, h, 1, items).unwrap();
        assert!((tape.value_at(loss, 0, 0) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_saturates_when_target_dominates() {
        let tape = Tape::new();
        let emb = tape.leaf(Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let items = active_item_rows(&tape, emb);
        let h = leaf_row(&tape, &[50.0, 0.0]);
        let loss = rec_loss(&tape, h, 1, items).unwrap();
        assert!(tape.value_at(loss, 0, 0) < 1e-8);
    }

    #[test]
    fn rec_loss_matches_enumeration_oracle() {
        let mut rng = Rng::seed_from_u64(7);
        let emb_rows = random_rows(&mut rng, 6, 3); // pad + 5 items
        let h_row: Vec<f64> = (0..3).map(|_| rng.next_normal()).collect();
        let tape = Tape::new();
        let emb = tape.leaf(Matrix::from_vec(6, 3, emb_rows.concat()));
        let items = active_item_rows(&tape, emb);
        let h = leaf_row(&tape, &h_row);
        let target = 4u32;
        let got = tape.value_at(rec_loss(&tape, h, target, items).unwrap(), 0, 0);
        let scores: Vec<f64> = (1..6).map(|i| dot(&emb_rows[i], &h_row)).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let expect = -(scores[target as usize - 1].exp() / z).ln();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn rec_loss_rejects_padding_target() {
        let tape = Tape::new();
        let emb = tape.leaf(Matrix::from_vec(3, 2, vec![0.0; 6]));
        let items = active_item_rows(&tape, emb);
        let h = leaf_row(&tape, &[1.0, 1.0]);
        assert!(rec_loss(&tape, h, 0, items).is_err());
    }

    #[test]
    fn batch_losses_permutation_invariant() {
        let mut rng = Rng::seed_from_u64(8);
        let orig = random_rows(&mut rng, 4, 3);
        let aug = random_rows(&mut rng, 4, 3);
        let targets = vec![1u32, 2, 3, 2];
        let perm = [2usize, 0, 3, 1];
        let value = |ord: &[usize]| {
            let tape = Tape::new();
            let ov: Vec<Var> = ord.iter().map(|&i| leaf_row(&tape, &orig[i])).collect();
            let av: Vec<Var> = ord.iter().map(|&i| leaf_row(&tape, &aug[i])).collect();
            let t: Vec<u32> = ord.iter().map(|&i| targets[i]).collect();
            tape.value_at(cl1_loss(&tape, &ov, &av, &t, 1.0), 0, 0)
        };
        let a = value(&[0, 1, 2, 3]);
        let b = value(&perm);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    // ---- total -------------------------------------------------------------

    #[test]
    fn total_reduces_to_rec_when_weights_zero() {
        let tape = Tape::new();
        let parts = LossParts {
            rec: tape.scalar(0.815),
            dynamic: tape.scalar(0.4),
            cl1: tape.scalar(1.3),
            cl2: tape.scalar(2.2),
        };
        let w = LossWeights {
            lambda_d: 0.0,
            lambda_cl1: 0.0,
            lambda_cl2: 0.0,
            tau: 1.0,
        };
        let total = total_loss(&tape, &parts, &w).unwrap();
        assert_eq!(tape.value_at(total, 0, 0), 0.815);
    }

    #[test]
    fn total_weighted_sum_example() {
        let tape = Tape::new();
        let parts = LossParts {
            rec: tape.scalar(1.0),
            dynamic: tape.scalar(1.0),
            cl1: tape.scalar(1.0),
            cl2: tape.scalar(1.0),
        };
        let w = LossWeights {
            lambda_d: 0.3,
            lambda_cl1: 0.5,
            lambda_cl2: 0.1,
            tau: 1.0,
        };
        let total = total_loss(&tape, &parts, &w).unwrap();
        assert!((tape.value_at(total, 0, 0) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn total_rejects_non_finite_part_by_name() {
        let tape = Tape::new();
        let parts = LossParts {
            rec: tape.scalar(1.0),
            dynamic: tape.scalar(1.0),
            cl1: tape.scalar(1.0),
            cl2: tape.scalar(f64::NAN),
        };
        let w = LossWeights {
            lambda_d: 0.1,
            lambda_cl1: 0.1,
            lambda_cl2: 0.1,
            tau: 1.0,
        };
        let err = total_loss(&tape, &parts, &w).unwrap_err();
        assert_eq!(err.to_string(), "cl2 non-finite");
    }
}
