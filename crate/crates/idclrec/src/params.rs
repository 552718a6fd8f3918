//! Trainable tensors with named access, checkpoint serialization and the
//! finite-difference gradient-check harness.
//!
//! Checkpoint format: `<prefix>.json` maps tensor names to shape, dtype and
//! byte offset; `<prefix>.bin` is one blob of row-major little-endian `f64`
//! values in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Architecture sizes every tensor shape derives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_items: usize,
    pub d: usize,
    #[serde(rename = "N")]
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl ModelDims {
    pub fn d_ff(&self) -> usize {
        4 * self.d
    }

    pub fn head_dim(&self) -> usize {
        debug_assert_eq!(self.d % self.heads, 0);
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.max_len == 0 || self.blocks == 0 || self.heads == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} not divisible by heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

fn tensor_specs(dims: &ModelDims) -> Vec<(String, usize, usize)> {
    let d = dims.d;
    let d_ff = dims.d_ff();
    let mut specs = vec![
        ("item_embedding".to_string(), dims.num_items + 1, d),
        ("position_embedding".to_string(), dims.max_len, d),
    ];
    for b in 0..dims.blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("encoder.{b}.attn.{w}"), d, d));
        }
        specs.push((format!("encoder.{b}.ln1.gain"), 1, d));
        specs.push((format!("encoder.{b}.ln1.bias"), 1, d));
        specs.push((format!("encoder.{b}.ffn.w1"), d, d_ff));
        specs.push((format!("encoder.{b}.ffn.b1"), 1, d_ff));
        specs.push((format!("encoder.{b}.ffn.w2"), d_ff, d));
        specs.push((format!("encoder.{b}.ffn.b2"), 1, d));
        specs.push((format!("encoder.{b}.ln2.gain"), 1, d));
        specs.push((format!("encoder.{b}.ln2.bias"), 1, d));
    }
    for w in ["wq", "wk", "wv"] {
        specs.push((format!("disentangler.{w}"), d, d));
    }
    for b in ["bq", "bk", "bv"] {
        specs.push((format!("disentangler.{b}"), 1, d));
    }
    specs.push(("disentangler.ln.gain".to_string(), 1, d));
    specs.push(("disentangler.ln.bias".to_string(), 1, d));
    specs.push(("intent.wq".to_string(), d, d));
    specs.push(("intent.wk".to_string(), d, d));
    specs
}

/// All trainable tensors, addressable by name and stably ordered.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    names: Vec<String>,
    tensors: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Truncated-normal (std 0.02) init for embeddings and projections,
    /// zeros for biases, gain 1 / bias 0 for layer norms.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Self {
        let specs = tensor_specs(&dims);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        let mut index = HashMap::new();
        for (name, rows, cols) in specs {
            let tensor = if name.ends_with(".gain") {
                Matrix::from_vec(rows, cols, vec![1.0; rows * cols])
            } else if name.ends_with(".bias")
                || name.contains(".ffn.b")
                || name.ends_with(".bq")
                || name.ends_with(".bk")
                || name.ends_with(".bv")
            {
                Matrix::zeros(rows, cols)
            } else {
                let data = (0..rows * cols).map(|_| rng.next_trunc_normal(0.02)).collect();
                Matrix::from_vec(rows, cols, data)
            };
            index.insert(name.clone(), names.len());
            names.push(name);
            tensors.push(tensor);
        }
        ModelParams {
            dims,
            names,
            tensors,
            index,
        }
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self.tensors[self.index[name]]
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor_at(&self, i: usize) -> &Matrix {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.tensors[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for t in &mut self.tensors {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }

    /// Write `<prefix>.json` and `<prefix>.bin`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        if let Some(parent) = prefix.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut manifest = CheckpointManifest {
            dims: self.dims,
            tensors: Vec::with_capacity(self.tensors.len()),
        };
        let mut blob: Vec<u8> = Vec::with_capacity(self.num_scalars() * 8);
        for (name, tensor) in self.iter() {
            manifest.tensors.push(TensorEntry {
                name: name.to_string(),
                rows: tensor.rows,
                cols: tensor.cols,
                dtype: "f64".to_string(),
                offset: blob.len(),
            });
            for v in &tensor.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json_path = manifest_path(prefix);
        let bin_path = blob_path(prefix);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("checkpoint encode: {e}")))?;
        fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
        fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
        Ok(())
    }

    /// Load and validate a checkpoint written by [`ModelParams::save`].
    pub fn load(prefix: &Path) -> Result<Self> {
        let json_path = manifest_path(prefix);
        let json = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&json)
            .map_err(|e| Error::Config(format!("checkpoint decode: {e}")))?;
        manifest.dims.validate()?;
        let bin_path = blob_path(prefix);
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;

        let specs = tensor_specs(&manifest.dims);
        if manifest.tensors.len() != specs.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, config expects {}",
                manifest.tensors.len(),
                specs.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        let mut index = HashMap::new();
        for (entry, (name, rows, cols)) in manifest.tensors.iter().zip(specs) {
            if entry.name != name || entry.rows != rows || entry.cols != cols {
                return Err(Error::Shape(format!(
                    "tensor '{}' is {}x{}, config expects '{}' {}x{}",
                    entry.name, entry.rows, entry.cols, name, rows, cols
                )));
            }
            if entry.dtype != "f64" {
                return Err(Error::Shape(format!(
                    "tensor '{}' has dtype {}, expected f64",
                    entry.name, entry.dtype
                )));
            }
            let len = rows * cols * 8;
            if entry.offset + len > blob.len() {
                return Err(Error::Shape(format!(
                    "tensor '{}' overruns checkpoint blob",
                    entry.name
                )));
            }
            let data = blob[entry.offset..entry.offset + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            index.insert(name.clone(), names.len());
            names.push(name);
            tensors.push(Matrix::from_vec(rows, cols, data));
        }
        Ok(ModelParams {
            dims: manifest.dims,
            names,
            tensors,
            index,
        })
    }
}

fn manifest_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn blob_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dims: ModelDims,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: String,
    offset: usize,
}

/// Per-block encoder parameters bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Cross-attention parameters bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundCross {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// All parameters registered as leaves on one tape, in checkpoint order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub item_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BoundBlock>,
    pub cross: BoundCross,
    pub intent_wq: Var,
    pub intent_wk: Var,
    /// Every leaf in tensor order, for gradient extraction.
    pub all: Vec<Var>,
}

impl BoundParams {
    pub fn bind(tape: &Tape, params: &ModelParams) -> Self {
        let mut all = Vec::with_capacity(params.num_tensors());
        for (_, tensor) in params.iter() {
            all.push(tape.leaf(tensor.clone()));
        }
        let var = |name: &str| all[params.index[name]];
        let blocks = (0..params.dims.blocks)
            .map(|b| BoundBlock {
                wq: var(&format!("encoder.{b}.attn.wq")),
                wk: var(&format!("encoder.{b}.attn.wk")),
                wv: var(&format!("encoder.{b}.attn.wv")),
                wo: var(&format!("encoder.{b}.attn.wo")),
                ln1_gain: var(&format!("encoder.{b}.ln1.gain")),
                ln1_bias: var(&format!("encoder.{b}.ln1.bias")),
                ffn_w1: var(&format!("encoder.{b}.ffn.w1")),
                ffn_b1: var(&format!("encoder.{b}.ffn.b1")),
                ffn_w2: var(&format!("encoder.{b}.ffn.w2")),
                ffn_b2: var(&format!("encoder.{b}.ffn.b2")),
                ln2_gain: var(&format!("encoder.{b}.ln2.gain")),
                ln2_bias: var(&format!("encoder.{b}.ln2.bias")),
            })
            .collect();
        BoundParams {
            item_embedding: var("item_embedding"),
            position_embedding: var("position_embedding"),
            blocks,
            cross: BoundCross {
                wq: var("disentangler.wq"),
                wk: var("disentangler.wk"),
                wv: var("disentangler.wv"),
                bq: var("disentangler.bq"),
                bk: var("disentangler.bk"),
                bv: var("disentangler.bv"),
                ln_gain: var("disentangler.ln.gain"),
                ln_bias: var("disentangler.ln.bias"),
            },
            intent_wq: var("intent.wq"),
            intent_wk: var("intent.wk"),
            all,
        }
    }

    /// Collect per-tensor gradients in checkpoint order; tensors no gradient
    /// reached stay zero.
    pub fn take_grads(&self, tape: &Tape, params: &ModelParams) -> Vec<Matrix> {
        self.all
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                tape.take_grad(v).unwrap_or_else(|| {
                    let t = params.tensor_at(i);
                    Matrix::zeros(t.rows, t.cols)
                })
            })
            .collect()
    }
}

/// Compare analytic gradients with central finite differences on a random
/// sample of parameter coordinates. `loss` must be deterministic (dropout
/// off). Returns the maximum relative error over the sample.
pub fn grad_check(
    params: &mut ModelParams,
    loss: impl Fn(&ModelParams) -> Result<f64>,
    analytic: &[Matrix],
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Config("grad check epsilon must be > 0".into()));
    }
    assert_eq!(analytic.len(), params.num_tensors());
    let mut flat = params.flatten();
    let mut grads = Vec::with_capacity(flat.len());
    for g in analytic {
        grads.extend_from_slice(&g.data);
    }
    let mut rng = Rng::seed_from_u64(seed);
    let n = flat.len();
    let mut sample: Vec<usize> = (0..n_samples.min(n)).map(|_| rng.next_usize(n)).collect();
    sample.sort_unstable();
    sample.dedup();

    let mut max_rel = 0.0_f64;
    for &i in &sample {
        let orig = flat[i];
        flat[i] = orig + epsilon;
        params.set_from_flat(&flat);
        let up = loss(params)?;
        flat[i] = orig - epsilon;
        params.set_from_flat(&flat);
        let down = loss(params)?;
        flat[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = grads[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    params.set_from_flat(&flat);
    Ok(max_rel)
}
