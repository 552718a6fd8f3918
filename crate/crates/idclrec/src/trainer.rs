//! Multi-task training: Adam optimization of the weighted objective, early
//! stopping on validation NDCG@20, checkpointing at every validation best,
//! multi-seed runs and hyperparameter grid search.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{make_batches, PreparedDataset, TargetIndex};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{self, MetricsReport, Split};
use crate::model::{self, AblationVariant, ModelSettings};
use crate::objectives::LossWeights;
use crate::params::{BoundParams, ModelDims, ModelParams};
use crate::rng::Rng;

/// Every training hyperparameter. Defaults: d=64, N=50, 2 blocks and
/// heads, dropout 0.5, tau 1, lr 0.001, batch 256, 300 epochs with
/// patience 40, delta 0.7, lambdas (0.3, 0.5, 0.1), three seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub d: usize,
    #[serde(rename = "N")]
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub delta: f64,
    pub lambda_d: f64,
    pub lambda_cl1: f64,
    pub lambda_cl2: f64,
    pub seeds: Vec<u64>,
    pub variant: AblationVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            max_len: 50,
            blocks: 2,
            heads: 2,
            dropout: 0.5,
            tau: 1.0,
            lr: 0.001,
            batch: 256,
            max_epochs: 300,
            patience: 40,
            delta: 0.7,
            lambda_d: 0.3,
            lambda_cl1: 0.5,
            lambda_cl2: 0.1,
            seeds: vec![1, 2, 3],
            variant: AblationVariant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims(1);
        dims.validate()?;
        self.weights().validate()?;
        if self.batch == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch, max_epochs and patience must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config("delta must be in [0, 1]".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        Ok(())
    }

    pub fn dims(&self, num_items: usize) -> ModelDims {
        ModelDims {
            num_items,
            d: self.d,
            max_len: self.max_len,
            blocks: self.blocks,
            heads: self.heads,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_d: self.lambda_d,
            lambda_cl1: self.lambda_cl1,
            lambda_cl2: self.lambda_cl2,
            tau: self.tau,
        }
    }

    pub fn settings(&self) -> ModelSettings {
        ModelSettings {
            delta: self.delta,
            variant: self.variant,
        }
    }

    /// Parse a JSON object of (possibly partial) config fields.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config decode: {e}")))
    }

    /// Load from JSON (`{...}`) or flat `key=value` lines.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return Self::from_json(&text);
        }
        let mut config = TrainConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected key=value, found '{line}'"),
            })?;
            config.apply_kv(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Set one field from its textual form; used by config files and CLI
    /// flag overrides.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid integer '{v}' for {key}")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid number '{v}' for {key}")))
        };
        match key {
            "d" => self.d = parse_usize(value)?,
            "N" | "n" | "max_len" => self.max_len = parse_usize(value)?,
            "blocks" => self.blocks = parse_usize(value)?,
            "heads" => self.heads = parse_usize(value)?,
            "dropout" => self.dropout = parse_f64(value)?,
            "tau" => self.tau = parse_f64(value)?,
            "lr" => self.lr = parse_f64(value)?,
            "batch" => self.batch = parse_usize(value)?,
            "max_epochs" => self.max_epochs = parse_usize(value)?,
            "patience" => self.patience = parse_usize(value)?,
            "delta" => self.delta = parse_f64(value)?,
            "lambda_d" => self.lambda_d = parse_f64(value)?,
            "lambda_cl1" => self.lambda_cl1 = parse_f64(value)?,
            "lambda_cl2" => self.lambda_cl2 = parse_f64(value)?,
            "seeds" => {
                let mut seeds = Vec::new();
                for tok in value.split(',') {
                    seeds.push(tok.trim().parse::<u64>().map_err(|_| {
                        Error::Config(format!("invalid seed '{tok}'"))
                    })?);
                }
                self.seeds = seeds;
            }
            "variant" => self.variant = AblationVariant::parse(value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

/// Adam with bias correction; betas (0.9, 0.999), eps 1e-8.
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = (0..params.num_tensors())
            .map(|i| {
                let t = params.tensor_at(i);
                Matrix::zeros(t.rows, t.cols)
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = params.tensor_at_mut(i);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m.data[j] / bc1;
                let v_hat = v.data[j] / bc2;
                theta.data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Early-stopping bookkeeping on validation NDCG@20: strict improvement
/// resets the counter, `patience` stale epochs stop the run.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, value: f64) -> StopDecision {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub dynamic: f64,
    pub cl1: f64,
    pub cl2: f64,
    pub total: f64,
    pub valid_hr: [f64; 3],
    pub valid_ndcg: [f64; 3],
    pub wall_time_s: f64,
}

pub fn log_csv_header() -> String {
    "epoch,L_rec,L_d,L_CL1,L_CL2,total,valid_hr@5,valid_hr@10,valid_hr@20,\
     valid_ndcg@5,valid_ndcg@10,valid_ndcg@20,wall_time_s"
        .replace(' ', "")
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = log_csv_header();
    out.push('\n');
    for e in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            e.epoch,
            e.rec,
            e.dynamic,
            e.cl1,
            e.cl2,
            e.total,
            e.valid_hr[0],
            e.valid_hr[1],
            e.valid_hr[2],
            e.valid_ndcg[0],
            e.valid_ndcg[1],
            e.valid_ndcg[2],
            e.wall_time_s,
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Result of one seeded training run.
pub struct TrainOutcome {
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub best_valid_ndcg20: f64,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Train one model. Checkpoints (when a prefix is given) are rewritten at
/// every new validation best; on divergence the last finite state is saved
/// under `<prefix>-abort` and the error propagates.
pub fn train(
    config: &TrainConfig,
    dataset: &PreparedDataset,
    seed: u64,
    checkpoint_prefix: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.max_len != dataset.manifest.max_len {
        return Err(Error::Shape(format!(
            "config N={} but dataset was prepared with N={}",
            config.max_len, dataset.manifest.max_len
        )));
    }
    let instances = dataset.training_instances();
    if instances.is_empty() {
        return Err(Error::Data("no training instances (min_len too large?)".into()));
    }
    let index = TargetIndex::build(&instances);
    let dims = config.dims(dataset.manifest.num_items);
    let settings = config.settings();
    let weights = config.weights();

    let base = Rng::seed_from_u64(seed);
    let mut param_rng = base.derive(1);
    let mut train_rng = base.derive(2);

    let mut params = ModelParams::init(dims, &mut param_rng);
    let mut adam = AdamState::new(&params);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_params = params.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let t0 = Instant::now();
        let batches = make_batches(&instances, &index, config.batch, &mut train_rng)?;
        let mut sums = [0.0f64; 5];
        let mut count = 0usize;
        for batch in &batches {
            let tape = Tape::new();
            let bp = BoundParams::bind(&tape, &params);
            let loss = match model::build_batch_loss(
                &tape,
                &bp,
                &dims,
                batch,
                &settings,
                &weights,
                config.dropout,
                Some(&mut train_rng),
            ) {
                Ok(loss) => loss,
                Err(Error::NonFinite(what)) => {
                    if let Some(prefix) = checkpoint_prefix {
                        params.save(&abort_prefix(prefix))?;
                    }
                    return Err(Error::NonFinite(what));
                }
                Err(e) => return Err(e),
            };
            let (rec, dynamic, cl1, cl2, total) = loss.values(&tape);
            let b = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([rec, dynamic, cl1, cl2, total]) {
                *s += v * b;
            }
            count += batch.len();
            tape.backward(loss.total);
            let grads = bp.take_grads(&tape, &params);
            adam.step(&mut params, &grads, config.lr);
        }
        if !params.all_finite() {
            if let Some(prefix) = checkpoint_prefix {
                best_params.save(&abort_prefix(prefix))?;
            }
            return Err(Error::NonFinite("parameters".into()));
        }
        let denom = count.max(1) as f64;
        let valid = metrics::evaluate(&params, dataset, Split::Valid, &settings)?;
        let entry = EpochLog {
            epoch,
            rec: sums[0] / denom,
            dynamic: sums[1] / denom,
            cl1: sums[2] / denom,
            cl2: sums[3] / denom,
            total: sums[4] / denom,
            valid_hr: [valid.hr[&5], valid.hr[&10], valid.hr[&20]],
            valid_ndcg: [valid.ndcg[&5], valid.ndcg[&10], valid.ndcg[&20]],
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        let decision = stopper.update(epoch, entry.valid_ndcg[2]);
        log.push(entry);
        match decision {
            StopDecision::Improved => {
                best_params = params.clone();
                if let Some(prefix) = checkpoint_prefix {
                    best_params.save(prefix)?;
                }
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_valid_ndcg20) = stopper.best();
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        best_valid_ndcg20,
        log,
        stopped_early,
    })
}

fn abort_prefix(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push("-abort");
    PathBuf::from(p)
}

/// Per-seed training plus test evaluation, and the seed-averaged report.
pub struct MultiSeedOutcome {
    pub per_seed: Vec<(u64, MetricsReport, usize)>,
    pub mean_test: MetricsReport,
}

/// Train once per configured seed, evaluate each best model on the test
/// split, and average. When `out_dir` is given, per-seed logs and
/// checkpoints are written beneath it.
pub fn run_multi_seed(
    config: &TrainConfig,
    dataset: &PreparedDataset,
    out_dir: Option<&Path>,
) -> Result<MultiSeedOutcome> {
    let mut per_seed = Vec::new();
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let seed_dir = out_dir.map(|d| d.join(format!("seed{seed}")));
        if let Some(dir) = &seed_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let prefix = seed_dir.as_ref().map(|d| d.join("checkpoint"));
        let outcome = train(config, dataset, seed, prefix.as_deref())?;
        if let Some(dir) = &seed_dir {
            write_log_csv(&dir.join("log.csv"), &outcome.log)?;
        }
        let mut report =
            metrics::evaluate(&outcome.best_params, dataset, Split::Test, &config.settings())?;
        report.seed = Some(seed);
        reports.push(report.clone());
        per_seed.push((seed, report, outcome.best_epoch));
    }
    let mean_test = MetricsReport::mean(&reports);
    Ok(MultiSeedOutcome {
        per_seed,
        mean_test,
    })
}

/// How grid combinations are enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// Sweep each listed hyperparameter alone, others fixed at the base
    /// config.
    OneAtATime,
    /// Full Cartesian product of the listed hyperparameters.
    Full,
}

/// One evaluated grid cell.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub assignment: Vec<(String, f64)>,
    pub valid_ndcg20: f64,
    pub valid_hr20: f64,
    pub best_epoch: usize,
}

/// Train every grid combination (averaging validation metrics over the
/// configured seeds) and return cells ranked by validation NDCG@20.
pub fn grid_search(
    base: &TrainConfig,
    dataset: &PreparedDataset,
    grids: &[(String, Vec<f64>)],
    mode: GridMode,
) -> Result<Vec<GridCell>> {
    if grids.is_empty() || grids.iter().any(|(_, vs)| vs.is_empty()) {
        return Err(Error::Config("grid must list at least one value per parameter".into()));
    }
    let mut assignments: Vec<Vec<(String, f64)>> = Vec::new();
    match mode {
        GridMode::OneAtATime => {
            for (key, values) in grids {
                for &v in values {
                    assignments.push(vec![(key.clone(), v)]);
                }
            }
        }
        GridMode::Full => {
            assignments.push(Vec::new());
            for (key, values) in grids {
                let mut next = Vec::new();
                for a in &assignments {
                    for &v in values {
                        let mut a = a.clone();
                        a.push((key.clone(), v));
                        next.push(a);
                    }
                }
                assignments = next;
            }
        }
    }

    let mut cells = Vec::with_capacity(assignments.len());
    for assignment in assignments {
        let mut config = base.clone();
        for (key, value) in &assignment {
            config.apply_kv(key, &format!("{value}"))?;
        }
        let mut ndcg = 0.0;
        let mut hr = 0.0;
        let mut best_epoch = 0;
        for &seed in &config.seeds {
            let outcome = train(&config, dataset, seed, None)?;
            let best = &outcome.log[outcome.best_epoch - 1];
            ndcg += best.valid_ndcg[2];
            hr += best.valid_hr[2];
            best_epoch = outcome.best_epoch;
        }
        let n = config.seeds.len() as f64;
        cells.push(GridCell {
            assignment,
            valid_ndcg20: ndcg / n,
            valid_hr20: hr / n,
            best_epoch,
        });
    }
    cells.sort_by(|a, b| b.valid_ndcg20.partial_cmp(&a.valid_ndcg20).unwrap());
    Ok(cells)
}

/// Train every variant (Full plus A-G) with the base config and report
/// seed-averaged test HR@20 / NDCG@20, one table row per variant.
pub fn ablation_sweep(
    base: &TrainConfig,
    dataset: &PreparedDataset,
    out_dir: Option<&Path>,
) -> Result<Vec<(AblationVariant, MetricsReport)>> {
    let mut rows = Vec::new();
    for variant in AblationVariant::ALL {
        let mut config = base.clone();
        config.variant = variant;
        let dir = out_dir.map(|d| d.join(format!("variant_{}", variant.code())));
        let outcome = run_multi_seed(&config, dataset, dir.as_deref())?;
        rows.push((variant, outcome.mean_test));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, PaddedSequence, TrainingInstance, UserSequence};
    use crate::data::Manifest;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.d, 64);
        assert_eq!(c.max_len, 50);
        assert_eq!(c.blocks, 2);
        assert_eq!(c.heads, 2);
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.tau, 1.0);
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.batch, 256);
        assert_eq!(c.max_epochs, 300);
        assert_eq!(c.patience, 40);
        assert_eq!(c.lambda_cl2, 0.1);
        assert_eq!(c.seeds.len(), 3);
    }

    #[test]
    fn config_kv_and_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let kv = dir.path().join("config.txt");
        fs::write(&kv, "d=8\nN=6\nlr=0.01\nseeds=4,5\nvariant=E\n# comment\n").unwrap();
        let c = TrainConfig::from_file(&kv).unwrap();
        assert_eq!(c.d, 8);
        assert_eq!(c.max_len, 6);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.variant, AblationVariant::NoDisentanglement);

        let json = dir.path().join("config.json");
        fs::write(&json, serde_json::to_string(&c).unwrap()).unwrap();
        let c2 = TrainConfig::from_file(&json).unwrap();
        assert_eq!(c2, c);

        let mut c3 = c.clone();
        c3.apply_kv("lambda_d", "0.4").unwrap();
        assert_eq!(c3.lambda_d, 0.4);
        assert!(c3.apply_kv("nonsense", "1").is_err());
    }

    fn toy_params(seed: u64) -> ModelParams {
        let mut rng = Rng::seed_from_u64(seed);
        ModelParams::init(
            ModelDims {
                num_items: 6,
                d: 4,
                max_len: 4,
                blocks: 1,
                heads: 1,
            },
            &mut rng,
        )
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut params = toy_params(1);
        let before = params.flatten();
        let grads: Vec<Matrix> = (0..params.num_tensors())
            .map(|i| {
                let t = params.tensor_at(i);
                Matrix::zeros(t.rows, t.cols)
            })
            .collect();
        let mut adam = AdamState::new(&params);
        adam.step(&mut params, &grads, 0.01);
        assert_eq!(params.flatten(), before);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        // One step from zero state: m_hat = g, v_hat = g^2, so the update is
        // -lr * g / (|g| + eps), magnitude ~ lr for nonzero g.
        let mut params = toy_params(2);
        let before = params.flatten();
        let grads: Vec<Matrix> = (0..params.num_tensors())
            .map(|i| params.tensor_at(i).map(|_| 0.37))
            .collect();
        let mut adam = AdamState::new(&params);
        let lr = 0.005;
        adam.step(&mut params, &grads, lr);
        let after = params.flatten();
        for (b, a) in before.iter().zip(&after) {
            let delta = a - b;
            let expect = -lr * 0.37 / (0.37 + 1e-8);
            assert!((delta - expect).abs() < 1e-12, "{delta} vs {expect}");
        }
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let mut params = toy_params(3);
        let grads: Vec<Matrix> = (0..params.num_tensors())
            .map(|i| params.tensor_at(i).map(|_| -2.5))
            .collect();
        let mut adam = AdamState::new(&params);
        let lr = 0.01;
        let mut last = params.flatten();
        for _ in 0..200 {
            adam.step(&mut params, &grads, lr);
            last = params.flatten();
        }
        let mut before = last.clone();
        adam.step(&mut params, &grads, lr);
        let after = params.flatten();
        before
            .iter_mut()
            .zip(&after)
            .for_each(|(b, a)| *b = (a - *b).abs());
        for step in before {
            assert!((step - lr).abs() < 0.05 * lr, "step magnitude {step}");
        }
    }

    #[test]
    fn early_stopper_peak_then_plateau() {
        // Peak at epoch 5, flat afterwards, patience 40: stop at epoch 45
        // and keep the epoch-5 best.
        let mut stopper = EarlyStopper::new(40);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let value = if epoch <= 5 {
                epoch as f64 / 10.0
            } else {
                0.3
            };
            match stopper.update(epoch, value) {
                StopDecision::Stop => {
                    stopped_at = Some(epoch);
                    break;
                }
                _ => {}
            }
        }
        assert_eq!(stopped_at, Some(45));
        assert_eq!(stopper.best(), (5, 0.5));
    }

    fn toy_dataset() -> PreparedDataset {
        // 8 users, 6 items, deterministic sequences long enough to split.
        let mut rng = Rng::seed_from_u64(42);
        let sequences = (0..8)
            .map(|u| UserSequence {
                user_index: u,
                items: (0..6).map(|_| rng.next_usize(6) as u32 + 1).collect(),
            })
            .collect();
        PreparedDataset {
            manifest: Manifest {
                num_users: 8,
                num_items: 6,
                max_len: 4,
                min_len: 1,
                seed: 42,
            },
            sequences,
        }
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.d = 8;
        c.max_len = 4;
        c.blocks = 1;
        c.heads = 2;
        c.dropout = 0.2;
        c.batch = 16;
        c.max_epochs = 3;
        c.patience = 40;
        c.seeds = vec![7];
        c
    }

    #[test]
    fn full_batch_steps_halve_the_loss() {
        // Fixed tiny batch, dropout off: 200 Adam steps must reduce the
        // total loss by at least half.
        let mut rng = Rng::seed_from_u64(5);
        let mut params = toy_params(4);
        let dims = params.dims;
        let batch = Batch {
            originals: (0..4)
                .map(|u| TrainingInstance {
                    input: PaddedSequence::from_items(&[u + 1, (u % 3) + 2], 4),
                    target: ((u + 1) % 6 + 1) as u32,
                    source_user: u as u32,
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|mut i| {
                    i.input.items[0] = rng.next_usize(6) as u32 + 1;
                    i
                })
                .collect(),
            augmented: (0..4)
                .map(|u| TrainingInstance {
                    input: PaddedSequence::from_items(&[(u % 4) + 2], 4),
                    target: ((u + 1) % 6 + 1) as u32,
                    source_user: (u + 4) as u32,
                })
                .collect(),
        };
        let settings = ModelSettings {
            delta: 0.0,
            variant: AblationVariant::Full,
        };
        let weights = LossWeights {
            lambda_d: 0.3,
            lambda_cl1: 0.5,
            lambda_cl2: 0.1,
            tau: 1.0,
        };
        let loss_value = |params: &ModelParams| {
            let tape = Tape::new();
            let bp = BoundParams::bind(&tape, params);
            let loss = model::build_batch_loss(
                &tape, &bp, &dims, &batch, &settings, &weights, 0.0, None,
            )
            .unwrap();
            tape.value_at(loss.total, 0, 0)
        };
        let initial = loss_value(&params);
        let mut adam = AdamState::new(&params);
        for _ in 0..200 {
            let tape = Tape::new();
            let bp = BoundParams::bind(&tape, &params);
            let loss = model::build_batch_loss(
                &tape, &bp, &dims, &batch, &settings, &weights, 0.0, None,
            )
            .unwrap();
            tape.backward(loss.total);
            let grads = bp.take_grads(&tape, &params);
            adam.step(&mut params, &grads, 0.01);
        }
        let final_loss = loss_value(&params);
        assert!(
            final_loss <= 0.5 * initial,
            "loss {initial} -> {final_loss}"
        );
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let dataset = toy_dataset();
        let config = tiny_config();
        let a = train(&config, &dataset, 7, None).unwrap();
        let b = train(&config, &dataset, 7, None).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            let mut x = x.clone();
            let mut y = y.clone();
            x.wall_time_s = 0.0;
            y.wall_time_s = 0.0;
            assert_eq!(x, y);
        }
        assert_eq!(a.best_params.flatten(), b.best_params.flatten());
    }

    #[test]
    fn multi_seed_mean_of_identical_seeds_is_single_run() {
        let dataset = toy_dataset();
        let mut config = tiny_config();
        config.seeds = vec![7, 7, 7];
        let outcome = run_multi_seed(&config, &dataset, None).unwrap();
        for k in metrics::KS {
            assert!((outcome.mean_test.hr[&k] - outcome.per_seed[0].1.hr[&k]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_modes_enumerate_expected_cells() {
        let dataset = toy_dataset();
        let mut config = tiny_config();
        config.max_epochs = 1;
        let grids = vec![
            ("lambda_d".to_string(), vec![0.1, 0.2]),
            ("delta".to_string(), vec![0.5, 0.7]),
        ];
        let sweep = grid_search(&config, &dataset, &grids, GridMode::OneAtATime).unwrap();
        assert_eq!(sweep.len(), 4);
        assert!(sweep.iter().all(|c| c.assignment.len() == 1));
        let full = grid_search(&config, &dataset, &grids, GridMode::Full).unwrap();
        assert_eq!(full.len(), 4);
        assert!(full.iter().all(|c| c.assignment.len() == 2));
        // Ranked by validation NDCG@20.
        for w in full.windows(2) {
            assert!(w[0].valid_ndcg20 >= w[1].valid_ndcg20);
        }
        // Single-point grid: one row.
        let single = grid_search(
            &config,
            &dataset,
            &[("lambda_d".to_string(), vec![0.3])],
            GridMode::Full,
        )
        .unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn checkpoints_written_at_validation_best() {
        let dataset = toy_dataset();
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("checkpoint");
        let outcome = train(&config, &dataset, 7, Some(&prefix)).unwrap();
        let loaded = ModelParams::load(&prefix).unwrap();
        assert_eq!(loaded.flatten(), outcome.best_params.flatten());
    }
}
