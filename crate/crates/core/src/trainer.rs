//! Training loop, optimizer, evaluation, run artifacts and the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::data::{batches, gen_synthetic, load_split_dir, DataError, Dataset, DatasetSplits, MultimodalBatch, SyntheticConfig};
use crate::losses::{
    div_loss, recon_loss, stat_loss, task_loss, total_loss, uni_loss, LossBreakdown, LossError, LossTerms,
    LossWeights, ReconReduction, TaskLossKind,
};
use crate::metrics::{compute_metrics_with, Acc2Convention, MetricReport, MetricsError};
use crate::model::{init_model, ForwardMode, ModelConfig, ModelError, ModelParams};
use crate::modulation::{ModulationConfig, ModulationError, ModulationState, ModulationSwitches, Modulator};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("autodiff: {0}")]
    Autodiff(#[from] AutodiffError),
    #[error("modulation: {0}")]
    Modulation(#[from] ModulationError),
    #[error("evaluation on the {split} split: {source}")]
    Metrics {
        split: &'static str,
        #[source]
        source: MetricsError,
    },
    #[error("non-finite {term} at step {step} (epoch {epoch})")]
    NonFinite {
        step: usize,
        epoch: usize,
        term: &'static str,
    },
    #[error("cannot evaluate an empty {0} split")]
    EmptySplit(&'static str),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serializing {what}: {source}")]
    Json {
        what: &'static str,
        #[source]
        source: serde_json::Error,
    },
}

/// Component switches, one per ablation axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Adaptive modality encoding (sampled latents).
    pub ame: bool,
    /// Gradient modulation.
    pub gm: bool,
    /// Gradient enhancement of the weaker modality.
    pub ge: bool,
    /// Conflict-aware penalty.
    pub cp: bool,
    /// Statistical (moment-matching) loss.
    pub sl: bool,
}

impl Toggles {
    pub const ALL_OFF: Self = Self {
        ame: false,
        gm: false,
        ge: false,
        cp: false,
        sl: false,
    };
    pub const ALL_ON: Self = Self {
        ame: true,
        gm: true,
        ge: true,
        cp: true,
        sl: true,
    };

    pub fn label(&self) -> String {
        let on: Vec<&str> = [
            (self.ame, "AME"),
            (self.gm, "GM"),
            (self.ge, "GE"),
            (self.cp, "CP"),
            (self.sl, "SL"),
        ]
        .iter()
        .filter(|(b, _)| *b)
        .map(|(_, n)| *n)
        .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

impl Default for Toggles {
    /// Every method component on; enhancement stays off because it is not
    /// part of the method proper.
    fn default() -> Self {
        Self {
            ge: false,
            ..Self::ALL_ON
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Where the three splits come from: a directory holding `train.jsonl`,
/// `val.jsonl` and `test.jsonl`, or (when `dir` is absent) the synthetic
/// generator split by the given fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synthetic: SyntheticConfig::default(),
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub toggles: Toggles,
    pub loss: LossWeights,
    pub task_loss: TaskLossKind,
    pub recon_reduction: ReconReduction,
    pub modulation: ModulationConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub adam: AdamConfig,
    pub acc2: Acc2Convention,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            seed: 0,
            toggles: Toggles::default(),
            loss: LossWeights::default(),
            task_loss: TaskLossKind::default(),
            recon_reduction: ReconReduction::default(),
            modulation: ModulationConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            adam: AdamConfig::default(),
            acc2: Acc2Convention::default(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// 30 epochs at learning rate 1e-5 with heavier dropout. Too slow to learn
    /// anything in a short desk run.
    pub fn slow_schedule() -> Self {
        let mut c = Self {
            epochs: 30,
            learning_rate: 1e-5,
            ..Self::default()
        };
        c.model.dropout_encoder = 0.3;
        c.model.dropout_classifier = 0.5;
        c
    }

    /// Checks every field. Returns warnings for settings that are legal but
    /// have no effect.
    pub fn validate(&self) -> Result<Vec<String>, TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate = {} must be > 0", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio = {} must lie in [0, 1]", self.warmup_ratio));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("adam settings {a:?} out of range"));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.modulation.validate()?;
        let d = &self.data;
        if d.dir.is_none() {
            d.synthetic.validate()?;
            let s = &d.synthetic;
            let m = &self.model;
            if (s.seq_len, s.d_t, s.d_a, s.d_v) != (m.seq_len, m.d_t, m.d_a, m.d_v) {
                return bad(format!(
                    "synthetic data dims (L={}, d_t={}, d_a={}, d_v={}) differ from the model's (L={}, d_t={}, d_a={}, d_v={})",
                    s.seq_len, s.d_t, s.d_a, s.d_v, m.seq_len, m.d_t, m.d_a, m.d_v
                ));
            }
        }
        if !(d.val_fraction >= 0.0 && d.test_fraction >= 0.0 && d.val_fraction + d.test_fraction < 1.0) {
            return bad(format!(
                "val_fraction {} and test_fraction {} must be >= 0 and sum below 1",
                d.val_fraction, d.test_fraction
            ));
        }

        let mut warnings = Vec::new();
        let t = &self.toggles;
        if !t.gm && (t.cp || t.ge) {
            warnings.push(format!(
                "toggles.cp={} / toggles.ge={} have no effect while toggles.gm is off",
                t.cp, t.ge
            ));
        }
        Ok(warnings)
    }

    /// Loss weights after applying the toggles.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_stat: if self.toggles.sl { self.loss.lambda_stat } else { 0.0 },
            ..self.loss
        }
    }

    fn switches(&self) -> ModulationSwitches {
        ModulationSwitches {
            gm: self.toggles.gm,
            cp: self.toggles.cp,
            ge: self.toggles.ge,
        }
    }
}

/// Builds the three splits described by `cfg.data`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<DatasetSplits, TrainError> {
    let splits = match &cfg.data.dir {
        Some(dir) => load_split_dir(dir, cfg.model.seq_len)?,
        None => gen_synthetic(&cfg.data.synthetic)?.split_three(cfg.data.val_fraction, cfg.data.test_fraction)?,
    };
    let m = &cfg.model;
    for ds in [&splits.train, &splits.val, &splits.test] {
        if (ds.seq_len, ds.d_t, ds.d_a, ds.d_v) != (m.seq_len, m.d_t, m.d_a, m.d_v) {
            return Err(TrainError::InvalidConfig(format!(
                "{} split has dims (L={}, d_t={}, d_a={}, d_v={}), model expects (L={}, d_t={}, d_a={}, d_v={})",
                ds.split.as_str(),
                ds.seq_len,
                ds.d_t,
                ds.d_a,
                ds.d_v,
                m.seq_len,
                m.d_t,
                m.d_a,
                m.d_v
            )));
        }
    }
    Ok(splits)
}

/// Linear warmup to `lr` over `ceil(warmup_ratio * total_steps)` steps, then
/// constant. Step 0 has rate 0 unless there is no warmup.
pub fn learning_rate_at(step: usize, total_steps: usize, lr: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if warmup == 0 {
        lr
    } else {
        lr * (step as f64 / warmup as f64).min(1.0)
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamConfig,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams, cfg: AdamConfig, weight_decay: f64) -> Self {
        let zeros = || params.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            cfg,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients stored on `params`. Parameters
    /// without a gradient are skipped entirely.
    pub fn step(&mut self, params: &mut ModelParams, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for ((p, m), v) in params.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + self.weight_decay * *w);
            }
        }
    }
}

/// One line of the trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(flatten)]
    pub modulation: ModulationState,
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed when the evaluation ran.
    pub step: usize,
    pub train_loss: f64,
    pub train: MetricReport,
    pub val: MetricReport,
    pub test: MetricReport,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub warnings: Vec<String>,
    pub trace: Vec<TraceRecord>,
    pub metrics: Vec<EpochMetrics>,
    pub params: ModelParams,
    /// Set once the artifacts are written to disk.
    pub checkpoint_path: Option<PathBuf>,
}

impl RunArtifacts {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }
}

/// When the trainer calls the modulation step. Anything but `Always` exists
/// to check that out-of-window or disabled modulation is a no-op.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModulationCall {
    #[default]
    Always,
    InWindowOnly,
    Never,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub modulation_call: ModulationCall,
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

pub fn train(cfg: &TrainConfig, data: &DatasetSplits) -> Result<RunArtifacts, TrainError> {
    train_with(cfg, data, TrainOptions::default())
}

pub fn train_with(cfg: &TrainConfig, data: &DatasetSplits, opts: TrainOptions) -> Result<RunArtifacts, TrainError> {
    train_observed(cfg, data, opts, &mut |_, _| {})
}

/// Like [`train_with`]; `observer` sees each trace record together with the
/// parameters right after that step's update.
pub fn train_observed(
    cfg: &TrainConfig,
    data: &DatasetSplits,
    opts: TrainOptions,
    observer: &mut dyn FnMut(&TraceRecord, &ModelParams),
) -> Result<RunArtifacts, TrainError> {
    let warnings = cfg.validate()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let mut params = init_model(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(&params, cfg.adam.clone(), cfg.weight_decay);
    let mut modulator = Modulator::new(cfg.modulation.clone(), cfg.switches())?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let weights = cfg.effective_weights();

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut trace = Vec::with_capacity(total_steps);
    let mut metrics = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let train_batches = batches(&data.train, cfg.batch_size, Some(epoch_shuffle_seed(cfg.seed, epoch)))?;
        for raw in &train_batches {
            let batch = raw.normalized();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let mut mode = ForwardMode::train(&mut noise_rng, cfg.toggles.ame);
            let out = params.forward(&mut tape, &vars, &batch, &mut mode)?;
            let y = tape.constant(Tensor::new(vec![batch.len()], batch.labels.clone())?);

            let terms = LossTerms {
                task: task_loss(&mut tape, out.y_hat, y, cfg.task_loss)?,
                recon: recon_loss(&mut tape, out.audio, out.a_hat, out.visual, out.v_hat, cfg.recon_reduction)?,
                uni: uni_loss(&mut tape, out.y_uni_t, out.y_uni_a, out.y_uni_v, y, cfg.task_loss)?,
                div: div_loss(&mut tape, out.var_a, out.var_v)?,
                stat: stat_loss(&mut tape, out.audio, out.visual, out.mu_a, out.var_a, out.mu_v, out.var_v)?,
            };
            let total = total_loss(&mut tape, &terms, &weights)?;
            let loss = LossBreakdown::read(&tape, &terms, total);
            if let Some(term) = loss.first_non_finite() {
                return Err(TrainError::NonFinite { step, epoch, term });
            }
            let mae_a = mean_abs_diff(tape.data(out.y_uni_a), &batch.labels);
            let mae_v = mean_abs_diff(tape.data(out.y_uni_v), &batch.labels);

            let grads = tape.backward(total)?;
            params.assign_grads(&grads, &vars);
            if params.params().iter().any(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
                return Err(TrainError::NonFinite {
                    step,
                    epoch,
                    term: "gradient",
                });
            }

            let call = match opts.modulation_call {
                ModulationCall::Always => true,
                ModulationCall::InWindowOnly => cfg.modulation.in_window(epoch),
                ModulationCall::Never => false,
            };
            let state = if call {
                modulator.step(mae_a, mae_v, &mut params, epoch)?
            } else {
                ModulationState::default()
            };

            let lr = learning_rate_at(step, total_steps, cfg.learning_rate, cfg.warmup_ratio);
            opt.step(&mut params, lr);
            params.zero_grads();

            epoch_loss += loss.total;
            let record = TraceRecord {
                step,
                epoch,
                lr,
                loss,
                modulation: state,
            };
            observer(&record, &params);
            trace.push(record);
            step += 1;
        }

        let last = epoch + 1 == cfg.epochs;
        if last || (epoch + 1) % cfg.eval_every == 0 {
            let eval = |ds: &Dataset, split: &'static str| evaluate_split(&params, ds, cfg, split);
            metrics.push(EpochMetrics {
                epoch,
                step,
                train_loss: epoch_loss / train_batches.len() as f64,
                train: eval(&data.train, "train")?,
                val: eval(&data.val, "val")?,
                test: eval(&data.test, "test")?,
            });
        }
    }

    Ok(RunArtifacts {
        config: cfg.clone(),
        warnings,
        trace,
        metrics,
        params,
        checkpoint_path: None,
    })
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Deterministic predictions (no dropout, `Z = mu`) in dataset order.
pub fn predict(params: &ModelParams, ds: &Dataset, batch_size: usize) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(ds.len());
    for raw in batches(ds, batch_size, None)? {
        out.extend(predict_batch(params, &raw.normalized())?);
    }
    Ok(out)
}

fn predict_batch(params: &ModelParams, batch: &MultimodalBatch) -> Result<Vec<f64>, TrainError> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let out = params.forward(&mut tape, &vars, batch, &mut ForwardMode::eval(true))?;
    Ok(tape.data(out.y_hat).to_vec())
}

pub fn evaluate(params: &ModelParams, ds: &Dataset, cfg: &TrainConfig) -> Result<MetricReport, TrainError> {
    evaluate_split(params, ds, cfg, ds.split.as_str())
}

fn evaluate_split(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    split: &'static str,
) -> Result<MetricReport, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let y_hat = predict(params, ds, cfg.batch_size)?;
    compute_metrics_with(&y_hat, &ds.labels(), cfg.acc2).map_err(|source| TrainError::Metrics { split, source })
}

/// File names inside a run directory.
pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Canonical serialized form of a config (pretty JSON, fixed field order).
pub fn config_to_json(cfg: &TrainConfig) -> Result<String, TrainError> {
    let mut s = serde_json::to_string_pretty(cfg).map_err(|source| TrainError::Json { what: "config", source })?;
    s.push('\n');
    Ok(s)
}

pub fn write_config(cfg: &TrainConfig, path: &Path) -> Result<(), TrainError> {
    fs::write(path, config_to_json(cfg)?).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), TrainError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|source| TrainError::Json { what: "record", source })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| TrainError::Json { what: "record", source }))
        .collect()
}

/// Writes config, trace, metrics and checkpoint into `dir`.
pub fn write_run(art: &mut RunArtifacts, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_config(&art.config, &dir.join(CONFIG_FILE))?;
    write_jsonl(&art.trace, &dir.join(TRACE_FILE))?;
    write_jsonl(&art.metrics, &dir.join(METRICS_FILE))?;
    let ck = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&art.params, &ck)?;
    art.checkpoint_path = Some(ck);
    Ok(())
}

/// A named toggle set from the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub toggles: Toggles,
}

const fn t(ame: bool, gm: bool, ge: bool, cp: bool, sl: bool) -> Toggles {
    Toggles { ame, gm, ge, cp, sl }
}

/// Group A adds components one by one, group B tests them alone, group C
/// probes combinations and leave-one-out variants of the full model.
pub const ABLATION_ROWS: [AblationRow; 17] = [
    AblationRow { name: "A0", toggles: t(false, false, false, false, false) },
    AblationRow { name: "A1", toggles: t(true, false, false, false, false) },
    AblationRow { name: "A2", toggles: t(true, true, false, false, false) },
    AblationRow { name: "A3", toggles: t(true, true, true, false, false) },
    AblationRow { name: "A4", toggles: t(true, true, true, true, false) },
    AblationRow { name: "A5", toggles: t(true, true, true, false, true) },
    AblationRow { name: "A6", toggles: t(true, true, true, true, true) },
    AblationRow { name: "B1", toggles: t(true, false, false, false, false) },
    AblationRow { name: "B2", toggles: t(false, true, false, false, false) },
    AblationRow { name: "B3", toggles: t(false, false, false, false, true) },
    AblationRow { name: "B4", toggles: t(false, true, true, false, false) },
    AblationRow { name: "B5", toggles: t(false, true, false, true, false) },
    AblationRow { name: "C1", toggles: t(false, true, true, true, false) },
    AblationRow { name: "C2", toggles: t(true, false, false, false, true) },
    AblationRow { name: "C3", toggles: t(true, true, false, false, false) },
    AblationRow { name: "C4", toggles: t(true, true, true, false, true) },
    AblationRow { name: "C5", toggles: t(true, true, false, true, true) },
];

pub fn ablation_row(name: &str) -> Option<AblationRow> {
    ABLATION_ROWS.iter().copied().find(|r| r.name.eq_ignore_ascii_case(name))
}

/// Outcome of one (row, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Test-split report of the last epoch; absent when the run failed.
    pub test: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub components: String,
    pub toggles: Toggles,
    pub runs: Vec<SeedOutcome>,
    pub completed: usize,
    pub failed: usize,
    pub acc2: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub mae: Option<MeanStd>,
    pub corr: Option<MeanStd>,
}

/// Runs every row for every seed, in parallel. Each run is independent and
/// uses `base` with the row's toggles and the seed substituted; failures
/// (divergence, undefined metrics) are recorded per seed, not raised.
pub fn run_ablation(
    base: &TrainConfig,
    data: &DatasetSplits,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<Vec<AblationResult>, TrainError> {
    base.validate()?;
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let outcomes: Vec<(usize, SeedOutcome)> = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let cfg = TrainConfig {
                seed,
                toggles: rows[r].toggles,
                ..base.clone()
            };
            let outcome = match train(&cfg, data) {
                Ok(art) => SeedOutcome {
                    seed,
                    test: art.final_metrics().map(|m| m.test),
                    error: None,
                },
                Err(e) => SeedOutcome {
                    seed,
                    test: None,
                    error: Some(e.to_string()),
                },
            };
            (r, outcome)
        })
        .collect();

    Ok(rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let runs: Vec<SeedOutcome> = outcomes.iter().filter(|(i, _)| *i == r).map(|(_, o)| o.clone()).collect();
            let ok: Vec<MetricReport> = runs.iter().filter_map(|o| o.test).collect();
            let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&ok.iter().map(f).collect::<Vec<_>>());
            AblationResult {
                row: row.name.to_string(),
                components: row.toggles.label(),
                toggles: row.toggles,
                completed: ok.len(),
                failed: runs.len() - ok.len(),
                acc2: col(|m| m.acc2),
                f1: col(|m| m.f1),
                mae: col(|m| m.mae),
                corr: col(|m| m.corr),
                runs,
            }
        })
        .collect())
}

pub const ABLATION_CSV_HEADER: &str =
    "row,components,seeds,completed,failed,acc2_mean,acc2_std,f1_mean,f1_std,mae_mean,mae_std,corr_mean,corr_std";

/// One header line plus one line per row; failed-only rows leave the metric
/// cells empty.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in results {
        let cell = |m: Option<MeanStd>| match m {
            Some(m) => format!("{},{}", m.mean, m.std),
            None => ",".to_string(),
        };
        let seeds: Vec<String> = r.runs.iter().map(|o| o.seed.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.row,
            r.components,
            seeds.join(" "),
            r.completed,
            r.failed,
            cell(r.acc2),
            cell(r.f1),
            cell(r.mae),
            cell(r.corr)
        );
    }
    s
}
