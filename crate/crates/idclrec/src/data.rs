//! Interaction ingestion and the training-data pipeline: 5-core filtering,
//! chronological sequence construction, leave-one-out splits, subsequence
//! augmentation, same-target pairing and batch iteration.
//!
//! Item index 0 is reserved for the padding item; real items are 1-based.
//! All ordering rules are deterministic so a prepared dataset is byte-stable
//! for identical inputs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A single `(user, item, timestamp)` event. Duplicates are kept as
/// distinct events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Per-user chronological item list with dense indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_index: u32,
    pub items: Vec<u32>,
}

/// Fixed-length left-padded item window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSequence {
    pub items: Vec<u32>,
    pub valid_len: usize,
}

impl PaddedSequence {
    /// Left-pad (or truncate to the most recent `n` items).
    pub fn from_items(items: &[u32], n: usize) -> Self {
        let valid_len = items.len().min(n);
        let mut padded = vec![0u32; n];
        padded[n - valid_len..].copy_from_slice(&items[items.len() - valid_len..]);
        PaddedSequence {
            items: padded,
            valid_len,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One next-item prediction example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub input: PaddedSequence,
    pub target: u32,
    pub source_user: u32,
}

/// Paired originals and same-target augmentations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub originals: Vec<TrainingInstance>,
    pub augmented: Vec<TrainingInstance>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn targets(&self) -> Vec<u32> {
        self.originals.iter().map(|i| i.target).collect()
    }
}

/// Dense index maps. Users are 0-based, items 1-based (0 = padding), both in
/// order of first appearance in the filtered record stream.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl Vocab {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Raw id of a 1-based item index.
    pub fn item_id(&self, index: u32) -> Option<&str> {
        if index == 0 {
            return None;
        }
        self.items.get(index as usize - 1).map(|s| s.as_str())
    }
}

/// Leave-one-out split of one user sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSequence {
    pub user_index: u32,
    pub train_items: Vec<u32>,
    pub valid_target: u32,
    pub test_target: u32,
}

/// Input file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    fn separator(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown format '{other}'"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Tsv => "tsv",
            Format::Csv => "csv",
        })
    }
}

/// Parse header-less `user<sep>item<sep>timestamp` lines in file order.
/// Four-field lines (`user,item,rating,timestamp`, the common review-dump
/// layout) are accepted with the rating ignored. Blank lines are skipped.
pub fn load_interactions(path: &Path, format: Format) -> Result<Vec<InteractionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let sep = format.separator();
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(sep).map(str::trim).collect();
        let (user, item, ts_str) = match fields.as_slice() {
            [u, i, t] => (u, i, t),
            [u, i, _rating, t] => (u, i, t),
            _ => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected 3 or 4 fields, found {}", fields.len()),
                })
            }
        };
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "empty user or item id".into(),
            });
        }
        let timestamp = parse_timestamp(ts_str).ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("invalid timestamp '{ts_str}'"),
        })?;
        records.push(InteractionRecord {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(records)
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    // Some dumps format integer timestamps as floats.
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v as i64),
        _ => None,
    }
}

/// Iteratively drop users and items with fewer than five interactions until
/// every remaining user and item has at least five. Returns records in their
/// original order. The 5-core of the interaction multigraph is unique, so
/// the deletion order does not matter.
pub fn five_core_filter(records: &[InteractionRecord]) -> Vec<InteractionRecord> {
    let mut keep: Vec<bool> = vec![true; records.len()];
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for (r, k) in records.iter().zip(&keep) {
            if *k {
                *user_count.entry(r.user.as_str()).or_default() += 1;
                *item_count.entry(r.item.as_str()).or_default() += 1;
            }
        }
        let mut changed = false;
        for (r, k) in records.iter().zip(keep.iter_mut()) {
            if *k && (user_count[r.user.as_str()] < 5 || item_count[r.item.as_str()] < 5) {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    records
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(r, _)| r.clone())
        .collect()
}

/// Build per-user chronological sequences and dense index maps. Sequences are
/// sorted by timestamp with file order breaking ties; indices follow first
/// appearance in the record stream.
pub fn build_sequences(records: &[InteractionRecord]) -> (Vec<UserSequence>, Vocab) {
    let mut vocab = Vocab::default();
    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    // (timestamp, file order, item index) per user
    let mut events: Vec<Vec<(i64, usize, u32)>> = Vec::new();
    for (order, r) in records.iter().enumerate() {
        let u = *user_index.entry(r.user.as_str()).or_insert_with(|| {
            vocab.users.push(r.user.clone());
            (vocab.users.len() - 1) as u32
        });
        let i = *item_index.entry(r.item.as_str()).or_insert_with(|| {
            vocab.items.push(r.item.clone());
            vocab.items.len() as u32
        });
        if events.len() <= u as usize {
            events.push(Vec::new());
        }
        events[u as usize].push((r.timestamp, order, i));
    }
    let sequences = events
        .into_iter()
        .enumerate()
        .map(|(u, mut ev)| {
            ev.sort_by_key(|&(ts, order, _)| (ts, order));
            UserSequence {
                user_index: u as u32,
                items: ev.into_iter().map(|(_, _, i)| i).collect(),
            }
        })
        .collect();
    (sequences, vocab)
}

/// Leave-one-out split: last item for test, second-to-last for validation.
/// Returns `None` when the sequence is too short to split.
pub fn split_leave_one_out(seq: &UserSequence) -> Option<SplitSequence> {
    let n = seq.items.len();
    if n < 3 {
        return None;
    }
    Some(SplitSequence {
        user_index: seq.user_index,
        train_items: seq.items[..n - 2].to_vec(),
        valid_target: seq.items[n - 2],
        test_target: seq.items[n - 1],
    })
}

/// Expand a training prefix into every `(prefix, next item)` instance with
/// prefix length at least `min_len`. Prefixes longer than `n` keep the most
/// recent `n` items.
pub fn augment_subsequences(
    train_items: &[u32],
    min_len: usize,
    n: usize,
    source_user: u32,
) -> Vec<TrainingInstance> {
    assert!(min_len >= 1, "min_len must be >= 1");
    let len = train_items.len();
    if len <= min_len {
        return Vec::new();
    }
    (min_len..len)
        .map(|t| TrainingInstance {
            input: PaddedSequence::from_items(&train_items[..t], n),
            target: train_items[t],
            source_user,
        })
        .collect()
}

/// Lookup from target item to the training instances that predict it.
#[derive(Debug, Clone, Default)]
pub struct TargetIndex {
    by_target: HashMap<u32, Vec<usize>>,
}

impl TargetIndex {
    pub fn build(instances: &[TrainingInstance]) -> Self {
        let mut by_target: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, inst) in instances.iter().enumerate() {
            by_target.entry(inst.target).or_default().push(i);
        }
        TargetIndex { by_target }
    }

    pub fn instances_for(&self, target: u32) -> Option<&[usize]> {
        self.by_target.get(&target).map(|v| v.as_slice())
    }
}

/// Pick a uniformly random other instance sharing `instances[i]`'s target;
/// the instance itself when it is the only one with that target.
pub fn sample_same_target(
    instances: &[TrainingInstance],
    index: &TargetIndex,
    i: usize,
    rng: &mut Rng,
) -> Result<usize> {
    let target = instances[i].target;
    let list = index
        .instances_for(target)
        .ok_or_else(|| Error::Data(format!("target {target} absent from index")))?;
    let pos = list
        .iter()
        .position(|&x| x == i)
        .ok_or_else(|| Error::Data(format!("instance {i} missing from index of target {target}")))?;
    if list.len() == 1 {
        return Ok(i);
    }
    let mut k = rng.next_usize(list.len() - 1);
    if k >= pos {
        k += 1;
    }
    Ok(list[k])
}

/// Shuffle instances with the epoch rng and chunk them into paired batches;
/// the final partial batch is kept.
pub fn make_batches(
    instances: &[TrainingInstance],
    index: &TargetIndex,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut originals = Vec::with_capacity(chunk.len());
        let mut augmented = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let j = sample_same_target(instances, index, i, rng)?;
            originals.push(instances[i].clone());
            augmented.push(instances[j].clone());
        }
        batches.push(Batch {
            originals,
            augmented,
        });
    }
    Ok(batches)
}

/// Sidecar manifest of a prepared dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub num_users: usize,
    pub num_items: usize,
    #[serde(rename = "N")]
    pub max_len: usize,
    pub min_len: usize,
    pub seed: u64,
}

/// Summary statistics of a prepared dataset.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

/// A filtered, indexed dataset ready for training. Splits and training
/// instances are derived deterministically from the stored sequences.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub manifest: Manifest,
    pub sequences: Vec<UserSequence>,
}

impl PreparedDataset {
    /// Run the preprocessing pipeline on raw records.
    pub fn from_records(
        records: &[InteractionRecord],
        max_len: usize,
        min_len: usize,
        seed: u64,
    ) -> (Self, Vocab) {
        let filtered = five_core_filter(records);
        let (sequences, vocab) = build_sequences(&filtered);
        let manifest = Manifest {
            num_users: vocab.num_users(),
            num_items: vocab.num_items(),
            max_len,
            min_len,
            seed,
        };
        (
            PreparedDataset {
                manifest,
                sequences,
            },
            vocab,
        )
    }

    pub fn stats(&self) -> DatasetStats {
        let num_interactions: usize = self.sequences.iter().map(|s| s.items.len()).sum();
        let num_users = self.manifest.num_users;
        let num_items = self.manifest.num_items;
        let denom = (num_users * num_items) as f64;
        DatasetStats {
            num_users,
            num_items,
            num_interactions,
            avg_length: if num_users == 0 {
                0.0
            } else {
                num_interactions as f64 / num_users as f64
            },
            sparsity: if denom == 0.0 {
                0.0
            } else {
                1.0 - num_interactions as f64 / denom
            },
        }
    }

    /// Leave-one-out splits; the second value counts users excluded for
    /// having fewer than three interactions.
    pub fn splits(&self) -> (Vec<SplitSequence>, usize) {
        let mut out = Vec::with_capacity(self.sequences.len());
        let mut excluded = 0;
        for seq in &self.sequences {
            match split_leave_one_out(seq) {
                Some(s) => out.push(s),
                None => excluded += 1,
            }
        }
        (out, excluded)
    }

    /// All subsequence-augmented training instances.
    pub fn training_instances(&self) -> Vec<TrainingInstance> {
        let (splits, _) = self.splits();
        let mut out = Vec::new();
        for s in &splits {
            out.extend(augment_subsequences(
                &s.train_items,
                self.manifest.min_len,
                self.manifest.max_len,
                s.user_index,
            ));
        }
        out
    }

    /// Write `sequences.tsv` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let seq_path = dir.join("sequences.tsv");
        let mut buf = String::new();
        for seq in &self.sequences {
            buf.push_str(&seq.user_index.to_string());
            buf.push('\t');
            for (k, item) in seq.items.iter().enumerate() {
                if k > 0 {
                    buf.push(' ');
                }
                buf.push_str(&item.to_string());
            }
            buf.push('\n');
        }
        let mut f = fs::File::create(&seq_path).map_err(|e| Error::io(&seq_path, e))?;
        f.write_all(buf.as_bytes())
            .map_err(|e| Error::io(&seq_path, e))?;
        let man_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
        fs::write(&man_path, json + "\n").map_err(|e| Error::io(&man_path, e))?;
        Ok(())
    }

    /// Load a dataset written by [`PreparedDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join("manifest.json");
        let json = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: Manifest = serde_json::from_str(&json)
            .map_err(|e| Error::Config(format!("manifest decode: {e}")))?;
        let seq_path = dir.join("sequences.tsv");
        let text = fs::read_to_string(&seq_path).map_err(|e| Error::io(&seq_path, e))?;
        let mut sequences = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (user_str, items_str) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: "expected user<TAB>items".into(),
            })?;
            let user_index: u32 = user_str.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("invalid user index '{user_str}'"),
            })?;
            let mut items = Vec::new();
            for tok in items_str.split_whitespace() {
                let item: u32 = tok.parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("invalid item index '{tok}'"),
                })?;
                if item == 0 || item as usize > manifest.num_items {
                    return Err(Error::Parse {
                        line: idx + 1,
                        msg: format!("item index {item} out of range 1..={}", manifest.num_items),
                    });
                }
                items.push(item);
            }
            sequences.push(UserSequence { user_index, items });
        }
        Ok(PreparedDataset {
            manifest,
            sequences,
        })
    }
}
