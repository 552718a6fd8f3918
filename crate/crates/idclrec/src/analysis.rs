//! Representation analyses: k-means clustering of intent dumps, similarity
//! distributions within and across clusters, item-combination overlap
//! statistics, and export of per-user intent/interest representations.
//!
//! All similarity values here are `sigmoid(dot)` so they live in (0, 1);
//! item overlap uses the raw dot of one-hot vectors (a shared-item count).

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{PaddedSequence, PreparedDataset};
use crate::error::{Error, Result};
use crate::matrix::{dot, sigmoid, Matrix};
use crate::model::{self, ModelSettings};
use crate::params::{BoundParams, ModelParams};
use crate::rng::Rng;

/// Number of uniform histogram bins over `[0, 1]`.
pub const HIST_BINS: usize = 20;

/// Rows of representations with their row identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprDump {
    pub ids: Vec<String>,
    pub matrix: Matrix,
}

impl ReprDump {
    /// Write `id<TAB>v1 v2 ... vd` lines.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        assert_eq!(self.ids.len(), self.matrix.rows);
        let mut out = String::new();
        for (id, r) in self.ids.iter().zip(0..self.matrix.rows) {
            out.push_str(id);
            out.push('\t');
            for (c, v) in self.matrix.row(r).iter().enumerate() {
                if c > 0 {
                    out.push(' ');
                }
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ids = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: "expected id<TAB>values".into(),
            })?;
            let row: Vec<f64> = values
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| Error::Parse {
                        line: idx + 1,
                        msg: format!("invalid value '{tok}'"),
                    })
                })
                .collect::<Result<_>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Parse {
                        line: idx + 1,
                        msg: "inconsistent row width".into(),
                    });
                }
            }
            ids.push(id.to_string());
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data("representation dump is empty".into()));
        }
        let cols = rows[0].len();
        let data = rows.concat();
        Ok(ReprDump {
            ids,
            matrix: Matrix::from_vec(data.len() / cols, cols, data),
        })
    }
}

/// K-means result. `inertia_trace` records the assignment-phase inertia of
/// every Lloyd iteration.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Converges when assignments
/// stabilize or `max_iters` is reached; an emptied cluster is re-seeded at
/// the point farthest from its assigned centroid.
pub fn kmeans(data: &Matrix, k: usize, max_iters: usize, seed: u64) -> Result<Clustering> {
    let n = data.rows;
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!("cannot fit {k} clusters to {n} points")));
    }
    let mut rng = Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Matrix::zeros(k, data.cols);
    let first = rng.next_usize(n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(data.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.next_usize(n)
        } else {
            let mut threshold = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                threshold -= d;
                if threshold <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for i in 0..n {
            let d = squared_distance(data.row(i), centroids.row(c));
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iters.max(1) {
        // Assignment step.
        let mut changed = false;
        let mut new_inertia = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = squared_distance(data.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            new_inertia += best_d;
        }
        inertia = new_inertia;
        inertia_trace.push(new_inertia);
        if !changed && inertia_trace.len() > 1 {
            break;
        }
        // Update step.
        let mut counts = vec![0usize; k];
        let mut sums = Matrix::zeros(k, data.cols);
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, &v) in sums.row_mut(assignments[i]).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed at the point farthest from its assigned centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = squared_distance(data.row(a), centroids.row(assignments[a]));
                        let db = squared_distance(data.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).copy_from_slice(data.row(far));
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(Clustering {
        assignments,
        centroids,
        inertia,
        inertia_trace,
    })
}

/// Raw similarity values plus their 20-bin histogram over `[0, 1]`;
/// `skipped` counts rows excluded by the operation's membership rule.
#[derive(Debug, Clone)]
pub struct SimilarityDist {
    pub values: Vec<f64>,
    pub histogram: Vec<u64>,
    pub skipped: usize,
}

pub fn histogram20(values: &[f64]) -> Vec<u64> {
    let mut bins = vec![0u64; HIST_BINS];
    for &v in values {
        let b = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        bins[b] += 1;
    }
    bins
}

/// Write `bin_lo,bin_hi,count` rows.
pub fn write_histogram_csv(path: &Path, histogram: &[u64]) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    let width = 1.0 / histogram.len() as f64;
    for (i, count) in histogram.iter().enumerate() {
        out.push_str(&format!(
            "{:.2},{:.2},{count}\n",
            i as f64 * width,
            (i + 1) as f64 * width
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_alignment(reprs: &Matrix, clustering: &Clustering) -> Result<()> {
    if reprs.rows != clustering.assignments.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} assignments",
            reprs.rows,
            clustering.assignments.len()
        )));
    }
    Ok(())
}

/// Per row: sigmoid similarity to the centroid of its own cluster.
pub fn centroid_similarity_dist(reprs: &Matrix, clustering: &Clustering) -> Result<SimilarityDist> {
    check_alignment(reprs, clustering)?;
    let values: Vec<f64> = (0..reprs.rows)
        .map(|i| sigmoid(dot(reprs.row(i), clustering.centroids.row(clustering.assignments[i]))))
        .collect();
    let histogram = histogram20(&values);
    Ok(SimilarityDist {
        values,
        histogram,
        skipped: 0,
    })
}

/// Per row: minimum sigmoid similarity to the other members of its cluster.
/// Rows in singleton clusters are skipped and counted.
pub fn min_intra_similarity_dist(reprs: &Matrix, clustering: &Clustering) -> Result<SimilarityDist> {
    check_alignment(reprs, clustering)?;
    let mut values = Vec::new();
    let mut skipped = 0;
    for i in 0..reprs.rows {
        let own = clustering.assignments[i];
        let mut min_sim = f64::INFINITY;
        let mut found = false;
        for j in 0..reprs.rows {
            if j != i && clustering.assignments[j] == own {
                let s = sigmoid(dot(reprs.row(i), reprs.row(j)));
                if s < min_sim {
                    min_sim = s;
                }
                found = true;
            }
        }
        if found {
            values.push(min_sim);
        } else {
            skipped += 1;
        }
    }
    let histogram = histogram20(&values);
    Ok(SimilarityDist {
        values,
        histogram,
        skipped,
    })
}

/// Per row: the highest average sigmoid similarity to the members of any
/// cluster the row does not belong to. Requires at least two clusters.
pub fn max_avg_inter_similarity_dist(
    reprs: &Matrix,
    clustering: &Clustering,
) -> Result<SimilarityDist> {
    check_alignment(reprs, clustering)?;
    let k = clustering.centroids.rows;
    if k < 2 {
        return Err(Error::Config("inter-cluster similarity needs k >= 2".into()));
    }
    let mut values = Vec::new();
    let mut skipped = 0;
    for i in 0..reprs.rows {
        let own = clustering.assignments[i];
        let mut best: Option<f64> = None;
        for c in 0..k {
            if c == own {
                continue;
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in 0..reprs.rows {
                if clustering.assignments[j] == c {
                    sum += sigmoid(dot(reprs.row(i), reprs.row(j)));
                    count += 1;
                }
            }
            if count > 0 {
                let avg = sum / count as f64;
                if best.is_none_or(|b| avg > b) {
                    best = Some(avg);
                }
            }
        }
        match best {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    let histogram = histogram20(&values);
    Ok(SimilarityDist {
        values,
        histogram,
        skipped,
    })
}

/// Mean dot product (shared-item count) over same-cluster pairs and over
/// cross-cluster pairs of one-hot item vectors.
pub fn item_overlap_similarity(onehots: &Matrix, clustering: &Clustering) -> Result<(f64, f64)> {
    check_alignment(onehots, clustering)?;
    let n = onehots.rows;
    let mut intra_sum = 0.0;
    let mut intra_count = 0usize;
    let mut inter_sum = 0.0;
    let mut inter_count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d = dot(onehots.row(i), onehots.row(j));
            if clustering.assignments[i] == clustering.assignments[j] {
                intra_sum += d;
                intra_count += 1;
            } else {
                inter_sum += d;
                inter_count += 1;
            }
        }
    }
    if intra_count == 0 || inter_count == 0 {
        return Err(Error::Data(
            "item overlap needs at least one same-cluster and one cross-cluster pair".into(),
        ));
    }
    Ok((
        intra_sum / intra_count as f64,
        inter_sum / inter_count as f64,
    ))
}

/// One-hot item vectors (items `1..=|V|`) of each user's full sequence.
pub fn onehot_item_rows(dataset: &PreparedDataset) -> ReprDump {
    let v = dataset.manifest.num_items;
    let mut matrix = Matrix::zeros(dataset.sequences.len(), v);
    let mut ids = Vec::with_capacity(dataset.sequences.len());
    for (r, seq) in dataset.sequences.iter().enumerate() {
        for &item in &seq.items {
            matrix.set(r, item as usize - 1, 1.0);
        }
        ids.push(seq.user_index.to_string());
    }
    ReprDump { ids, matrix }
}

/// Which representations to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Intent,
    Interest,
    Both,
}

impl std::str::FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "intent" => Ok(ExportKind::Intent),
            "interest" => Ok(ExportKind::Interest),
            "both" => Ok(ExportKind::Both),
            other => Err(Error::Config(format!("unknown export kind '{other}'"))),
        }
    }
}

/// Dump every user's categorical intent and most-recent interest, computed
/// from their full sequence with a deterministic forward pass. Returns the
/// written paths.
pub fn export_representations(
    params: &ModelParams,
    dataset: &PreparedDataset,
    which: ExportKind,
    settings: &ModelSettings,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = dataset.manifest.max_len;
    let d = params.dims.d;
    let users = dataset.sequences.len();
    let mut intents = Matrix::zeros(users, d);
    let mut interests = Matrix::zeros(users, d);
    let mut ids = Vec::with_capacity(users);
    for (r, seq) in dataset.sequences.iter().enumerate() {
        let input = PaddedSequence::from_items(&seq.items, n);
        let tape = crate::autodiff::Tape::new();
        let bp = BoundParams::bind(&tape, params);
        let out = model::forward_user(&tape, &bp, &params.dims, &input, settings, 0.0, None)?;
        let i = tape.value_clone(out.categorical);
        let rn = tape.value_clone(out.interest_last);
        intents.row_mut(r).copy_from_slice(i.row(0));
        interests.row_mut(r).copy_from_slice(rn.row(0));
        ids.push(seq.user_index.to_string());
    }
    let mut written = Vec::new();
    if matches!(which, ExportKind::Intent | ExportKind::Both) {
        let path = out_dir.join("intent.tsv");
        ReprDump {
            ids: ids.clone(),
            matrix: intents,
        }
        .save_tsv(&path)?;
        written.push(path);
    }
    if matches!(which, ExportKind::Interest | ExportKind::Both) {
        let path = out_dir.join("interest.tsv");
        ReprDump {
            ids,
            matrix: interests,
        }
        .save_tsv(&path)?;
        written.push(path);
    }
    Ok(written)
}
