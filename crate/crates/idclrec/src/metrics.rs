//! Full-ranking top-k evaluation: HR@k and NDCG@k over the whole item set,
//! no candidate sampling. Ties rank the target pessimistically and the
//! padding item is excluded from the candidates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{PaddedSequence, PreparedDataset};
use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::model::{self, ModelSettings};
use crate::params::{BoundParams, ModelParams};

/// Cutoffs reported everywhere.
pub const KS: [usize; 3] = [5, 10, 20];

/// Which leave-one-out target to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Aggregated ranking metrics for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_users_evaluated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl MetricsReport {
    pub fn csv_header() -> String {
        let mut cols = vec!["split".to_string(), "seed".to_string(), "n_users".to_string()];
        for k in KS {
            cols.push(format!("hr@{k}"));
        }
        for k in KS {
            cols.push(format!("ndcg@{k}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.split.to_string(),
            self.seed.map_or_else(|| "-".to_string(), |s| s.to_string()),
            self.num_users_evaluated.to_string(),
        ];
        for k in KS {
            cols.push(format!("{:.6}", self.hr[&k]));
        }
        for k in KS {
            cols.push(format!("{:.6}", self.ndcg[&k]));
        }
        cols.join(",")
    }

    /// Arithmetic mean over reports (per-seed runs).
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        assert!(!reports.is_empty());
        let n = reports.len() as f64;
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for k in KS {
            hr.insert(k, reports.iter().map(|r| r.hr[&k]).sum::<f64>() / n);
            ndcg.insert(k, reports.iter().map(|r| r.ndcg[&k]).sum::<f64>() / n);
        }
        MetricsReport {
            split: reports[0].split,
            hr,
            ndcg,
            num_users_evaluated: reports[0].num_users_evaluated,
            seed: None,
        }
    }
}

/// 1-based rank of the target item given scores for items `1..=|V|`
/// (`scores[i]` belongs to item `i+1`). Ties are pessimistic: equal-scored
/// other items count as ranked ahead.
pub fn rank_of_target(scores: &[f64], target: u32) -> usize {
    debug_assert!(target >= 1 && (target as usize) <= scores.len());
    let ts = scores[target as usize - 1];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i + 1 == target as usize {
            continue;
        }
        if s >= ts {
            rank += 1;
        }
    }
    rank
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Score every candidate item for one input sequence with a deterministic
/// forward pass. Returns scores for items `1..=|V|`.
pub fn score_all_items(
    params: &ModelParams,
    input: &PaddedSequence,
    settings: &ModelSettings,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bp = BoundParams::bind(&tape, params);
    let out = model::forward_user(&tape, &bp, &params.dims, input, settings, 0.0, None)?;
    let h = tape.value_clone(out.user_repr);
    let emb = params.get("item_embedding");
    let mut scores = Vec::with_capacity(params.dims.num_items);
    for item in 1..=params.dims.num_items {
        scores.push(dot(emb.row(item), h.row(0)));
    }
    Ok(scores)
}

/// Full-ranking evaluation over every splittable user. Validation inputs are
/// the training prefix; test inputs additionally include the validation
/// target.
pub fn evaluate(
    params: &ModelParams,
    dataset: &PreparedDataset,
    split: Split,
    settings: &ModelSettings,
) -> Result<MetricsReport> {
    if dataset.manifest.num_items != params.dims.num_items {
        return Err(Error::Shape(format!(
            "dataset has {} items, model expects {}",
            dataset.manifest.num_items, params.dims.num_items
        )));
    }
    let (splits, _) = dataset.splits();
    let n = dataset.manifest.max_len;
    let mut hr_sum: BTreeMap<usize, f64> = KS.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg_sum: BTreeMap<usize, f64> = KS.iter().map(|&k| (k, 0.0)).collect();
    let mut evaluated = 0;
    for s in &splits {
        let (items, target): (Vec<u32>, u32) = match split {
            Split::Valid => (s.train_items.clone(), s.valid_target),
            Split::Test => {
                let mut items = s.train_items.clone();
                items.push(s.valid_target);
                (items, s.test_target)
            }
        };
        let input = PaddedSequence::from_items(&items, n);
        let scores = score_all_items(params, &input, settings)?;
        let rank = rank_of_target(&scores, target);
        for k in KS {
            *hr_sum.get_mut(&k).unwrap() += hr_at_k(rank, k);
            *ndcg_sum.get_mut(&k).unwrap() += ndcg_at_k(rank, k);
        }
        evaluated += 1;
    }
    let denom = evaluated.max(1) as f64;
    Ok(MetricsReport {
        split,
        hr: hr_sum.into_iter().map(|(k, v)| (k, v / denom)).collect(),
        ndcg: ndcg_sum.into_iter().map(|(k, v)| (k, v / denom)).collect(),
        num_users_evaluated: evaluated,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Manifest, UserSequence};
    use crate::model::AblationVariant;
    use crate::params::ModelDims;
    use crate::rng::Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 2), 1);
        // Tie at the max: the target loses the tie.
        assert_eq!(rank_of_target(&[0.9, 0.9, 0.3], 1), 2);
        assert_eq!(rank_of_target(&[0.5, 0.6, 0.7], 1), 3);
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..100).map(|_| (rng.next_usize(25) as f64) / 10.0).collect();
            let target = rng.next_usize(100) as u32 + 1;
            // Oracle: sort indices by score descending, targets after ties.
            let mut idx: Vec<usize> = (0..100).collect();
            let t = target as usize - 1;
            idx.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap()
                    .then_with(|| (a == t).cmp(&(b == t)))
            });
            let expect = idx.iter().position(|&i| i == t).unwrap() + 1;
            assert_eq!(rank_of_target(&scores, target), expect);
        }
    }

    #[test]
    fn hr_ndcg_closed_forms() {
        assert_eq!(hr_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert!((ndcg_at_k(3, 5) - 0.5).abs() < 1e-12);
        assert_eq!(hr_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
    }

    fn toy_dataset(num_users: usize, num_items: usize, n: usize, seed: u64) -> PreparedDataset {
        let mut rng = Rng::seed_from_u64(seed);
        let sequences = (0..num_users)
            .map(|u| UserSequence {
                user_index: u as u32,
                items: (0..6)
                    .map(|_| rng.next_usize(num_items) as u32 + 1)
                    .collect(),
            })
            .collect();
        PreparedDataset {
            manifest: Manifest {
                num_users,
                num_items,
                max_len: n,
                min_len: 1,
                seed,
            },
            sequences,
        }
    }

    #[test]
    fn evaluate_metric_hierarchy_and_single_user() {
        let mut rng = Rng::seed_from_u64(2);
        let dims = ModelDims {
            num_items: 12,
            d: 4,
            max_len: 5,
            blocks: 1,
            heads: 1,
        };
        let params = ModelParams::init(dims, &mut rng);
        let settings = ModelSettings {
            delta: 0.5,
            variant: AblationVariant::Full,
        };
        let dataset = toy_dataset(8, 12, 5, 3);
        let report = evaluate(&params, &dataset, Split::Test, &settings).unwrap();
        assert_eq!(report.num_users_evaluated, 8);
        assert!(report.ndcg[&5] <= report.hr[&5] + 1e-12);
        assert!(report.hr[&5] <= report.hr[&10] + 1e-12);
        assert!(report.hr[&10] <= report.hr[&20] + 1e-12);

        // A single-user dataset reports exactly that user's values.
        let single = PreparedDataset {
            manifest: dataset.manifest.clone(),
            sequences: vec![dataset.sequences[0].clone()],
        };
        let single_report = evaluate(&params, &single, Split::Test, &settings).unwrap();
        assert_eq!(single_report.num_users_evaluated, 1);
        for k in KS {
            assert!(single_report.hr[&k] == 0.0 || single_report.hr[&k] == 1.0);
        }
    }

    #[test]
    fn evaluate_rejects_item_count_mismatch() {
        let mut rng = Rng::seed_from_u64(4);
        let dims = ModelDims {
            num_items: 5,
            d: 4,
            max_len: 5,
            blocks: 1,
            heads: 1,
        };
        let params = ModelParams::init(dims, &mut rng);
        let settings = ModelSettings {
            delta: 0.5,
            variant: AblationVariant::Full,
        };
        let dataset = toy_dataset(4, 12, 5, 5);
        assert!(evaluate(&params, &dataset, Split::Valid, &settings).is_err());
    }

    #[test]
    fn report_mean_and_csv_shape() {
        let mk = |v: f64| MetricsReport {
            split: Split::Test,
            hr: KS.iter().map(|&k| (k, v)).collect(),
            ndcg: KS.iter().map(|&k| (k, v / 2.0)).collect(),
            num_users_evaluated: 3,
            seed: Some(1),
        };
        let mean = MetricsReport::mean(&[mk(0.2), mk(0.4)]);
        assert!((mean.hr[&5] - 0.3).abs() < 1e-12);
        assert!((mean.ndcg[&20] - 0.15).abs() < 1e-12);
        assert_eq!(
            MetricsReport::csv_header().split(',').count(),
            mk(0.1).csv_row().split(',').count()
        );
    }
}
