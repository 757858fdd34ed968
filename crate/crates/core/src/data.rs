//! Multimodal datasets: a controllable synthetic generator, a newline-delimited
//! JSON feature loader, per-batch min-max normalization and deterministic
//! batching.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("batch size must be >= 1")]
    InvalidBatchSize,
    #[error("dataset is empty")]
    Empty,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One aligned utterance. Feature blocks are row-major `seq_len x d` and
/// zero-padded beyond `length`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: f64,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub seq_len: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn subset(&self, split: Split, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            split,
            samples: self.samples[range].to_vec(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            split: self.split,
            seq_len: self.seq_len,
            d_t: self.d_t,
            d_a: self.d_a,
            d_v: self.d_v,
            samples: Vec::new(),
        }
    }

    /// Contiguous train/val/test partition. Sample order is already random
    /// for generated data.
    pub fn split_three(&self, val_fraction: f64, test_fraction: f64) -> Result<DatasetSplits, DataError> {
        if !(0.0..1.0).contains(&val_fraction)
            || !(0.0..1.0).contains(&test_fraction)
            || val_fraction + test_fraction >= 1.0
        {
            return Err(DataError::InvalidConfig(format!(
                "split fractions val={val_fraction} test={test_fraction} leave no training data"
            )));
        }
        let n = self.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        let n_test = (n as f64 * test_fraction).round() as usize;
        let n_train = n - n_val - n_test;
        Ok(DatasetSplits {
            train: self.subset(Split::Train, 0..n_train),
            val: self.subset(Split::Val, n_train..n_train + n_val),
            test: self.subset(Split::Test, n_train + n_val..n),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub seq_len: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    /// Signal strength of the latent sentiment in each modality.
    pub w_t: f64,
    pub w_a: f64,
    pub w_v: f64,
    /// Standard deviation of the label noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seq_len: 8,
            d_t: 16,
            d_a: 8,
            d_v: 8,
            w_t: 1.0,
            w_a: 0.4,
            w_v: 0.2,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1");
        }
        if [self.seq_len, self.d_t, self.d_a, self.d_v].contains(&0) {
            return bad("sequence length and feature dims must be >= 1");
        }
        let w = [self.w_t, self.w_a, self.w_v];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("informativeness weights must be finite and >= 0");
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return bad("at least one informativeness weight must be positive");
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad("noise_std must be finite and >= 0");
        }
        Ok(())
    }
}

/// Generates `n_samples` utterances. A latent sentiment `u ~ U[-3, 3]` is
/// written into every modality through a fixed random `seq_len x d` map
/// scaled by that modality's weight, plus unit Gaussian feature noise. The
/// label is `u` plus `N(0, noise_std)`, clipped to `[-3, 3]`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut map_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw_map = |d: usize| -> Vec<f64> {
        (0..cfg.seq_len * d)
            .map(|_| StandardNormal.sample(&mut map_rng))
            .collect()
    };
    let maps = [draw_map(cfg.d_t), draw_map(cfg.d_a), draw_map(cfg.d_v)];
    let weights = [cfg.w_t, cfg.w_a, cfg.w_v];
    let latent = Uniform::new_inclusive(LABEL_MIN, LABEL_MAX).expect("valid range");
    let label_noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");

    let samples = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let u: f64 = latent.sample(&mut rng);
            let mut feats = maps.iter().zip(weights).map(|(map, w)| {
                map.iter()
                    .map(|m| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        w * u * m + e
                    })
                    .collect::<Vec<f64>>()
            });
            let text = feats.next().unwrap();
            let audio = feats.next().unwrap();
            let visual = feats.next().unwrap();
            let label = (u + label_noise.sample(&mut rng)).clamp(LABEL_MIN, LABEL_MAX);
            Sample {
                id: format!("syn-{}-{i:06}", cfg.seed),
                label,
                text,
                audio,
                visual,
                length: cfg.seq_len,
            }
        })
        .collect();

    Ok(Dataset {
        split: Split::Train,
        seq_len: cfg.seq_len,
        d_t: cfg.d_t,
        d_a: cfg.d_a,
        d_v: cfg.d_v,
        samples,
    })
}

/// On-disk record of the feature file format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: f64,
    text: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
}

fn rows_of(flat: &[f64], d: usize, length: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).take(length).map(|r| r.to_vec()).collect()
}

/// Writes one JSON record per line. Padding rows are not written.
pub fn write_features(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for s in &ds.samples {
        let rec = Record {
            id: s.id.clone(),
            label: s.label,
            text: rows_of(&s.text, ds.d_t, s.length),
            audio: rows_of(&s.audio, ds.d_a, s.length),
            visual: rows_of(&s.visual, ds.d_v, s.length),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a feature file, truncating or zero-padding every record to
/// `seq_len` steps. Blank lines are skipped.
pub fn load_features(path: &Path, seq_len: usize, split: Split) -> Result<Dataset, DataError> {
    if seq_len == 0 {
        return Err(DataError::InvalidConfig("seq_len must be >= 1".into()));
    }
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut dims: Option<[usize; 3]> = None;
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| DataError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| {
            use serde_json::error::Category;
            match e.classify() {
                Category::Data => schema(e.to_string()),
                _ => DataError::Malformed {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                },
            }
        })?;
        if !rec.label.is_finite() || !(LABEL_MIN..=LABEL_MAX).contains(&rec.label) {
            return Err(schema(format!("label {} outside [-3, 3]", rec.label)));
        }
        let blocks = [("text", &rec.text), ("audio", &rec.audio), ("visual", &rec.visual)];
        let steps = rec.text.len();
        let mut widths = [0usize; 3];
        for (k, (name, rows)) in blocks.iter().enumerate() {
            if rows.is_empty() {
                return Err(schema(format!("field `{name}` has no time steps")));
            }
            if rows.len() != steps {
                return Err(schema(format!(
                    "field `{name}` has {} steps, `text` has {steps}",
                    rows.len()
                )));
            }
            let w = rows[0].len();
            if w == 0 {
                return Err(schema(format!("field `{name}` has zero-width rows")));
            }
            if let Some(r) = rows.iter().position(|r| r.len() != w) {
                return Err(schema(format!(
                    "field `{name}` row {r} has width {}, expected {w}",
                    rows[r].len()
                )));
            }
            widths[k] = w;
        }
        match dims {
            None => dims = Some(widths),
            Some(d) if d != widths => {
                return Err(schema(format!(
                    "feature widths {widths:?} differ from earlier records {d:?}"
                )))
            }
            _ => {}
        }
        let length = steps.min(seq_len);
        let pad = |rows: &[Vec<f64>], w: usize| -> Vec<f64> {
            let mut flat = vec![0.0; seq_len * w];
            for (t, row) in rows.iter().take(seq_len).enumerate() {
                flat[t * w..(t + 1) * w].copy_from_slice(row);
            }
            flat
        };
        samples.push(Sample {
            id: rec.id,
            label: rec.label,
            text: pad(&rec.text, widths[0]),
            audio: pad(&rec.audio, widths[1]),
            visual: pad(&rec.visual, widths[2]),
            length,
        });
    }
    let [d_t, d_a, d_v] = dims.ok_or(DataError::Empty)?;
    Ok(Dataset {
        split,
        seq_len,
        d_t,
        d_a,
        d_v,
        samples,
    })
}

/// Aligned mini-batch. Feature blocks are `B x L x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub ids: Vec<String>,
    pub text: Tensor,
    pub audio: Tensor,
    pub visual: Tensor,
    pub labels: Vec<f64>,
    /// Number of valid steps per sample.
    pub lengths: Vec<usize>,
}

impl MultimodalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_samples(ds: &Dataset, samples: &[&Sample]) -> Self {
        let b = samples.len();
        let block = |get: fn(&Sample) -> &Vec<f64>, d: usize| {
            let data: Vec<f64> = samples.iter().flat_map(|s| get(s).iter().copied()).collect();
            Tensor::new(vec![b, ds.seq_len, d], data).expect("sample blocks are seq_len x d")
        };
        Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            text: block(|s| &s.text, ds.d_t),
            audio: block(|s| &s.audio, ds.d_a),
            visual: block(|s| &s.visual, ds.d_v),
            labels: samples.iter().map(|s| s.label).collect(),
            lengths: samples.iter().map(|s| s.length).collect(),
        }
    }

    /// Min-max normalizes the acoustic and visual blocks; text is untouched.
    pub fn normalized(&self) -> Self {
        Self {
            audio: minmax_normalize(&self.audio, &self.lengths),
            visual: minmax_normalize(&self.visual, &self.lengths),
            ..self.clone()
        }
    }
}

/// Per feature channel, over every valid step of every sample in the batch:
/// `x' = (x - min) / (max - min)`. Constant channels and padded steps map
/// to 0.
pub fn minmax_normalize(x: &Tensor, lengths: &[usize]) -> Tensor {
    let shape = x.shape();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let valid = |s: usize, t: usize| t < lengths.get(s).copied().unwrap_or(l);
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in 0..b {
        for t in (0..l).filter(|&t| valid(s, t)) {
            let row = &x.data()[(s * l + t) * d..(s * l + t + 1) * d];
            for (c, &v) in row.iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
    }
    let mut out = Tensor::zeros(shape);
    for s in 0..b {
        for t in (0..l).filter(|&t| valid(s, t)) {
            let base = (s * l + t) * d;
            for c in 0..d {
                let range = hi[c] - lo[c];
                out.data_mut()[base + c] = if range > 0.0 {
                    (x.data()[base + c] - lo[c]) / range
                } else {
                    0.0
                };
            }
        }
    }
    out
}

/// Splits `ds` into batches of `batch_size` (last one may be smaller).
/// `shuffle_seed == None` keeps dataset order.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<MultimodalBatch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidBatchSize);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let picked: Vec<&Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
            MultimodalBatch::from_samples(ds, &picked)
        })
        .collect())
}

/// Locations of the three split files inside a data directory.
pub fn split_paths(dir: &Path) -> [(Split, PathBuf); 3] {
    [
        (Split::Train, dir.join("train.jsonl")),
        (Split::Val, dir.join("val.jsonl")),
        (Split::Test, dir.join("test.jsonl")),
    ]
}

pub fn load_split_dir(dir: &Path, seq_len: usize) -> Result<DatasetSplits, DataError> {
    let [(_, tr), (_, va), (_, te)] = split_paths(dir);
    Ok(DatasetSplits {
        train: load_features(&tr, seq_len, Split::Train)?,
        val: load_features(&va, seq_len, Split::Val)?,
        test: load_features(&te, seq_len, Split::Test)?,
    })
}

pub fn write_split_dir(splits: &DatasetSplits, dir: &Path) -> Result<(), DataError> {
    for (split, path) in split_paths(dir) {
        write_features(splits.get(split), &path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_samples: 50,
            seq_len: 4,
            d_t: 3,
            d_a: 2,
            d_v: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(&small_cfg()).unwrap();
        let b = gen_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SyntheticConfig {
            seed: 1,
            ..small_cfg()
        })
        .unwrap();
        assert_ne!(a.samples[0].text, c.samples[0].text);
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.w_t = 0.0;
        c.w_a = 0.0;
        c.w_v = 0.0;
        assert!(gen_synthetic(&c).is_err());
        let c = SyntheticConfig {
            noise_std: -1.0,
            ..small_cfg()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn label_marginal() {
        let ds = gen_synthetic(&SyntheticConfig {
            n_samples: 10_000,
            seq_len: 1,
            d_t: 1,
            d_a: 1,
            d_v: 1,
            noise_std: 0.3,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let y = ds.labels();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!(y.iter().all(|v| (-3.0..=3.0).contains(v)));
    }

    #[test]
    fn minmax_hand_example() {
        let x = Tensor::new(vec![3, 1, 1], vec![2.0, 4.0, 6.0]).unwrap();
        let y = minmax_normalize(&x, &[1, 1, 1]);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn minmax_constant_channel_is_zero() {
        let x = Tensor::new(vec![2, 2, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0]).unwrap();
        let y = minmax_normalize(&x, &[2, 2]);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 1.0 / 3.0, 0.0, 2.0 / 3.0, 0.0, 1.0]);
    }

    #[test]
    fn minmax_skips_padding() {
        // second sample has one valid step; its padded step must stay 0 and
        // must not drag the channel minimum down.
        let x = Tensor::new(vec![2, 2, 1], vec![10.0, 20.0, 30.0, 0.0]).unwrap();
        let y = minmax_normalize(&x, &[2, 1]);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn batch_sizes_and_order() {
        let ds = gen_synthetic(&SyntheticConfig {
            n_samples: 10,
            ..small_cfg()
        })
        .unwrap();
        let bs = batches(&ds, 4, Some(3)).unwrap();
        assert_eq!(bs.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let again = batches(&ds, 4, Some(3)).unwrap();
        assert_eq!(bs, again);
        let ids = |bs: &[MultimodalBatch]| bs.iter().flat_map(|b| b.ids.clone()).collect::<Vec<_>>();
        let other = batches(&ds, 4, Some(4)).unwrap();
        assert_ne!(ids(&bs), ids(&other));
        let plain = batches(&ds, 4, None).unwrap();
        assert_eq!(plain[0].ids[0], ds.samples[0].id);
        assert!(matches!(batches(&ds, 0, None), Err(DataError::InvalidBatchSize)));
    }

    #[test]
    fn split_three_partitions() {
        let ds = gen_synthetic(&small_cfg()).unwrap();
        let s = ds.split_three(0.2, 0.2).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (30, 10, 10));
        assert_eq!(s.test.split, Split::Test);
        assert!(ds.split_three(0.5, 0.5).is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let ds = gen_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_features(&ds, &p).unwrap();
        let back = load_features(&p, ds.seq_len, Split::Train).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn loader_errors_name_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"label\":0.5,\"text\":[[1.0]],\"audio\":[[1.0]],\"visual\":[[1.0]]}\n\
             {\"id\":\"b\",\"label\":0.5,\"text\":[[1.0]],\"visual\":[[1.0]]}\n",
        )
        .unwrap();
        let err = load_features(&p, 4, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, DataError::Schema { line: 2, .. }), "{msg}");
        assert!(msg.contains("audio"), "{msg}");

        std::fs::write(&p, "{\"id\": \"a\", \"label\": \n").unwrap();
        let err = load_features(&p, 4, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 1, .. }), "{err}");

        std::fs::write(
            &p,
            "{\"id\":\"a\",\"label\":0.5,\"text\":[[1.0,2.0]],\"audio\":[[1.0]],\"visual\":[[1.0]]}\n\
             {\"id\":\"b\",\"label\":0.5,\"text\":[[1.0]],\"audio\":[[1.0]],\"visual\":[[1.0]]}\n",
        )
        .unwrap();
        let err = load_features(&p, 4, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::Schema { line: 2, .. }), "{err}");

        std::fs::write(
            &p,
            "{\"id\":\"a\",\"label\":4.0,\"text\":[[1.0]],\"audio\":[[1.0]],\"visual\":[[1.0]]}\n",
        )
        .unwrap();
        assert!(load_features(&p, 4, Split::Train).is_err());
    }

    #[test]
    fn padding_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"label\":1.0,\"text\":[[1.0],[2.0]],\"audio\":[[3.0],[4.0]],\"visual\":[[5.0],[6.0]]}\n",
        )
        .unwrap();
        let ds = load_features(&p, 4, Split::Train).unwrap();
        assert_eq!(ds.samples[0].length, 2);
        assert_eq!(ds.samples[0].text, vec![1.0, 2.0, 0.0, 0.0]);
    }
}
