//! Domain-affiliate feature bank and the InfoNCE objective.
//!
//! The bank stores one unit-norm key per sample of `source ∪ memory ∪ target`.
//! It is built once per task from frozen parameters and afterwards each key
//! is blended with the freshly computed query of its sample,
//! `k <- normalize(m k_old + (1 - m) k_fresh)`.
//!
//! During training, queries and positives are recomputed with the current
//! parameters (so the loss has a gradient); bank keys only serve as constant
//! negatives, and a sample's own row is never one of its negatives.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::domains::{augment_rows, AugmentStrength};
use crate::error::{GrclError, Result};
use crate::model::{normalize_rows, ContrastiveTerms, FlatGradient, LossSpec, ParamVector};
use crate::rng;

/// Below this norm a blended key is considered degenerate.
pub const BLEND_EPSILON: f64 = 1e-12;

/// Default temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Default key momentum.
pub const DEFAULT_MOMENTUM: f64 = 0.5;

/// Identifies a sample across all datasets feeding a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub dataset_id: u32,
    pub sample_id: u32,
}

impl SampleKey {
    pub fn new(dataset_id: u32, sample_id: u32) -> Self {
        SampleKey {
            dataset_id,
            sample_id,
        }
    }
}

/// One dataset contributing rows to a bank.
#[derive(Debug, Clone)]
pub struct BankSource<'a> {
    pub dataset_id: u32,
    pub inputs: ArrayView2<'a, f64>,
    /// Per-row sample ids; `None` means `0..n`.
    pub sample_ids: Option<&'a [u32]>,
}

impl<'a> BankSource<'a> {
    pub fn new(dataset_id: u32, inputs: ArrayView2<'a, f64>) -> Self {
        BankSource {
            dataset_id,
            inputs,
            sample_ids: None,
        }
    }

    pub fn with_ids(dataset_id: u32, inputs: ArrayView2<'a, f64>, sample_ids: &'a [u32]) -> Self {
        BankSource {
            dataset_id,
            inputs,
            sample_ids: Some(sample_ids),
        }
    }

    fn key(&self, row: usize) -> SampleKey {
        let sample_id = match self.sample_ids {
            Some(ids) => ids[row],
            None => row as u32,
        };
        SampleKey::new(self.dataset_id, sample_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    keys: Array2<f64>,
    row_keys: Vec<SampleKey>,
    index: HashMap<SampleKey, usize>,
    momentum: f64,
    temperature: f64,
    degenerate_updates: usize,
}

/// Computes one key per sample with `params` and registers every sample.
pub fn build_feature_bank(
    params: &ParamVector,
    sources: &[BankSource<'_>],
    momentum: f64,
    temperature: f64,
) -> Result<FeatureBank> {
    if sources.is_empty() {
        return Err(GrclError::InvalidInput("no datasets for feature bank".into()));
    }
    validate_hyper(momentum, temperature)?;
    let key_dim = params.spec().key_dim;
    let total: usize = sources.iter().map(|s| s.inputs.nrows()).sum();
    let mut keys = Array2::zeros((total, key_dim));
    let mut row_keys = Vec::with_capacity(total);
    let mut index = HashMap::with_capacity(total);
    let mut row = 0;
    for src in sources {
        if let Some(ids) = src.sample_ids {
            if ids.len() != src.inputs.nrows() {
                return Err(GrclError::DimensionMismatch {
                    what: "bank sample ids",
                    expected: src.inputs.nrows(),
                    found: ids.len(),
                });
            }
        }
        if src.inputs.nrows() == 0 {
            continue;
        }
        let emb = params.embed(src.inputs)?;
        keys.slice_mut(ndarray::s![row..row + src.inputs.nrows(), ..])
            .assign(&emb.keys);
        for r in 0..src.inputs.nrows() {
            let key = src.key(r);
            if index.insert(key, row + r).is_some() {
                return Err(GrclError::InvalidInput(format!(
                    "duplicate bank sample (dataset {}, sample {})",
                    key.dataset_id, key.sample_id
                )));
            }
            row_keys.push(key);
        }
        row += src.inputs.nrows();
    }
    Ok(FeatureBank {
        keys,
        row_keys,
        index,
        momentum,
        temperature,
        degenerate_updates: 0,
    })
}

fn validate_hyper(momentum: f64, temperature: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(GrclError::InvalidConfig(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(GrclError::InvalidConfig(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    Ok(())
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }

    pub fn keys(&self) -> &Array2<f64> {
        &self.keys
    }

    pub fn key(&self, row: usize) -> ArrayView1<'_, f64> {
        self.keys.row(row)
    }

    pub fn row_of(&self, key: SampleKey) -> Option<usize> {
        self.index.get(&key).copied()
    }

    pub fn sample_at(&self, row: usize) -> SampleKey {
        self.row_keys[row]
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Number of `update_key` calls that kept the old key because the blend
    /// vanished.
    pub fn degenerate_updates(&self) -> usize {
        self.degenerate_updates
    }

    /// Momentum update of one row. Returns `false` (and keeps the old key)
    /// when the blended vector is degenerate.
    pub fn update_key(&mut self, row: usize, fresh: ArrayView1<'_, f64>) -> Result<bool> {
        if row >= self.len() {
            return Err(GrclError::InvalidInput(format!(
                "bank row {row} out of range ({} rows)",
                self.len()
            )));
        }
        if fresh.len() != self.keys.ncols() {
            return Err(GrclError::DimensionMismatch {
                what: "fresh key",
                expected: self.keys.ncols(),
                found: fresh.len(),
            });
        }
        let m = self.momentum;
        let blended: Array1<f64> = &self.keys.row(row) * m + &fresh * (1.0 - m);
        let n = blended.dot(&blended).sqrt();
        if !(n >= BLEND_EPSILON) {
            self.degenerate_updates += 1;
            return Ok(false);
        }
        self.keys.row_mut(row).assign(&(blended / n));
        Ok(true)
    }

    /// `count` distinct rows drawn uniformly from all rows not in `exclude`.
    /// Clamps to what is available; the flag reports whether it had to.
    pub fn sample_negative_rows(
        &self,
        count: usize,
        exclude: &[usize],
        seed: u64,
    ) -> (Vec<usize>, bool) {
        let mut excl: Vec<usize> = exclude.iter().copied().filter(|&r| r < self.len()).collect();
        excl.sort_unstable();
        excl.dedup();
        let available = self.len() - excl.len();
        let clamped = count > available;
        let take = count.min(available);
        let mut rng = rng::seeded(seed, 0x6e65_67);
        let rows = index::sample(&mut rng, available, take)
            .into_iter()
            .map(|r| skip_excluded(r, &excl))
            .collect();
        (rows, clamped)
    }

    /// Keys of [`Self::sample_negative_rows`], one row per negative.
    pub fn sample_negatives(&self, count: usize, exclude: &[usize], seed: u64) -> Array2<f64> {
        let (rows, _) = self.sample_negative_rows(count, exclude, seed);
        self.keys.select(Axis(0), &rows)
    }

    /// Every row except `exclude`, in row order.
    pub fn all_negatives(&self, exclude: &[usize]) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.len()).filter(|r| !exclude.contains(r)).collect();
        self.keys.select(Axis(0), &rows)
    }

    /// Writes `dataset_id,sample_id,k0,...` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| GrclError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = String::from("dataset_id,sample_id");
        for j in 0..self.keys.ncols() {
            header.push_str(&format!(",k{j}"));
        }
        let io = |e| GrclError::io(path, e);
        writeln!(w, "{header}").map_err(io)?;
        for (key, row) in self.row_keys.iter().zip(self.keys.rows()) {
            write!(w, "{},{}", key.dataset_id, key.sample_id).map_err(io)?;
            for v in row {
                write!(w, ",{v:.16e}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load_csv(path: &Path, momentum: f64, temperature: f64) -> Result<FeatureBank> {
        validate_hyper(momentum, temperature)?;
        let file = File::open(path).map_err(|e| GrclError::io(path, e))?;
        let parse_err = |line: usize, message: String| GrclError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?
            .map_err(|e| GrclError::io(path, e))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "dataset_id" || cols[1] != "sample_id" {
            return Err(parse_err(1, "expected header dataset_id,sample_id,k0,...".into()));
        }
        let key_dim = cols.len() - 2;
        let mut flat = Vec::new();
        let mut row_keys = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| GrclError::io(path, e))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != key_dim + 2 {
                return Err(parse_err(lineno, format!("expected {} fields", key_dim + 2)));
            }
            let id = |s: &str| {
                s.parse::<u32>()
                    .map_err(|e| parse_err(lineno, format!("bad id {s:?}: {e}")))
            };
            let key = SampleKey::new(id(fields[0])?, id(fields[1])?);
            for f in &fields[2..] {
                flat.push(
                    f.parse::<f64>()
                        .map_err(|e| parse_err(lineno, format!("bad value {f:?}: {e}")))?,
                );
            }
            if index.insert(key, row_keys.len()).is_some() {
                return Err(parse_err(lineno, "duplicate sample".into()));
            }
            row_keys.push(key);
        }
        let keys = Array2::from_shape_vec((row_keys.len(), key_dim), flat)
            .expect("row width checked per line");
        Ok(FeatureBank {
            keys,
            row_keys,
            index,
            momentum,
            temperature,
            degenerate_updates: 0,
        })
    }
}

fn skip_excluded(mut row: usize, sorted_excl: &[usize]) -> usize {
    for &e in sorted_excl {
        if e <= row {
            row += 1;
        } else {
            break;
        }
    }
    row
}

/// A query, its positive and a set of negatives, all unit vectors.
#[derive(Debug, Clone)]
pub struct ContrastItem {
    query: Array1<f64>,
    positive: Array1<f64>,
    negatives: Array2<f64>,
}

impl ContrastItem {
    pub fn new(query: Array1<f64>, positive: Array1<f64>, negatives: Array2<f64>) -> Result<Self> {
        let dim = query.len();
        if positive.len() != dim || (negatives.nrows() > 0 && negatives.ncols() != dim) {
            return Err(GrclError::DimensionMismatch {
                what: "contrast item key",
                expected: dim,
                found: if positive.len() != dim {
                    positive.len()
                } else {
                    negatives.ncols()
                },
            });
        }
        let unit = |v: ArrayView1<'_, f64>| (v.dot(&v).sqrt() - 1.0).abs() <= 1e-6;
        if !unit(query.view())
            || !unit(positive.view())
            || !negatives.rows().into_iter().all(unit)
        {
            return Err(GrclError::InvalidInput(
                "contrast item vectors must be unit norm".into(),
            ));
        }
        Ok(ContrastItem {
            query,
            positive,
            negatives,
        })
    }
}

/// `-log( e^{q.k+/t} / (e^{q.k+/t} + sum e^{q.k-/t}) )`
pub fn info_nce(item: &ContrastItem, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(GrclError::InvalidConfig(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    Ok(info_nce_with_grad(
        item.query.view(),
        item.positive.view(),
        item.negatives.view(),
        temperature,
    )
    .0)
}

/// Loss and its gradients with respect to `q` and `k+`.
pub(crate) fn info_nce_with_grad(
    q: ArrayView1<'_, f64>,
    pos: ArrayView1<'_, f64>,
    negs: ArrayView2<'_, f64>,
    temperature: f64,
) -> (f64, Array1<f64>, Array1<f64>) {
    let s_pos = q.dot(&pos) / temperature;
    if negs.nrows() == 0 {
        return (0.0, Array1::zeros(q.len()), Array1::zeros(q.len()));
    }
    let s_neg = negs.dot(&q) / temperature;
    let m = s_neg.fold(s_pos, |a, &b| a.max(b));
    let denom = (s_pos - m).exp() + s_neg.iter().map(|s| (s - m).exp()).sum::<f64>();
    let lse = m + denom.ln();
    let loss = lse - s_pos;
    let w_pos = (s_pos - lse).exp() - 1.0;
    let w_neg = s_neg.mapv(|s| (s - lse).exp());
    let mut dq = &pos * w_pos + negs.t().dot(&w_neg);
    dq /= temperature;
    let dp = &q * (w_pos / temperature);
    (loss.max(0.0), dq, dp)
}

/// How negatives are drawn for each query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeSampling {
    /// Every bank row except the query's own.
    Full,
    /// A fixed number of rows drawn without replacement.
    Sampled(usize),
}

/// A contrastive batch with augmentations and negatives already drawn, so
/// the loss is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct PreparedContrast {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub negatives: Vec<Array2<f64>>,
    pub rows: Vec<usize>,
    pub temperature: f64,
    /// Set when fewer negatives were available than requested.
    pub clamped: bool,
}

impl PreparedContrast {
    pub fn loss_spec(&self) -> LossSpec<'_> {
        LossSpec::InfoNce(ContrastiveTerms {
            anchors: self.anchors.view(),
            positives: self.positives.view(),
            negatives: &self.negatives,
            temperature: self.temperature,
        })
    }
}

pub fn prepare_contrast(
    bank: &FeatureBank,
    inputs: ArrayView2<'_, f64>,
    samples: &[SampleKey],
    augment: &AugmentStrength,
    negatives: NegativeSampling,
    seed: u64,
) -> Result<PreparedContrast> {
    if samples.len() != inputs.nrows() {
        return Err(GrclError::DimensionMismatch {
            what: "contrastive sample keys",
            expected: inputs.nrows(),
            found: samples.len(),
        });
    }
    let rows = samples
        .iter()
        .map(|k| {
            bank.row_of(*k).ok_or_else(|| {
                GrclError::InvalidInput(format!(
                    "sample (dataset {}, sample {}) is not in the bank",
                    k.dataset_id, k.sample_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let positives = augment_rows(inputs, augment, rng::mix(seed, 0xa06));
    let mut clamped = false;
    let negs = rows
        .iter()
        .enumerate()
        .map(|(i, &row)| match negatives {
            NegativeSampling::Full => bank.all_negatives(&[row]),
            NegativeSampling::Sampled(count) => {
                let (idx, c) = bank.sample_negative_rows(count, &[row], rng::mix(seed, i as u64));
                clamped |= c;
                bank.keys.select(Axis(0), &idx)
            }
        })
        .collect();
    Ok(PreparedContrast {
        anchors: inputs.to_owned(),
        positives,
        negatives: negs,
        rows,
        temperature: bank.temperature,
        clamped,
    })
}

#[derive(Debug, Clone)]
pub struct ContrastiveStep {
    pub loss: f64,
    pub gradient: FlatGradient,
    /// Queries computed with the current parameters, one per batch row.
    pub fresh_keys: Array2<f64>,
    /// Bank rows of the batch samples.
    pub rows: Vec<usize>,
    pub clamped: bool,
}

/// Mean InfoNCE over a batch of bank samples, with its gradient.
pub fn contrastive_batch_loss(
    params: &ParamVector,
    bank: &FeatureBank,
    inputs: ArrayView2<'_, f64>,
    samples: &[SampleKey],
    augment: &AugmentStrength,
    negatives: NegativeSampling,
    seed: u64,
) -> Result<ContrastiveStep> {
    let prepared = prepare_contrast(bank, inputs, samples, augment, negatives, seed)?;
    let (loss, gradient) = params.loss_gradient(&prepared.loss_spec())?;
    let fresh_keys = params.embed(inputs)?.keys;
    Ok(ContrastiveStep {
        loss,
        gradient,
        fresh_keys,
        rows: prepared.rows,
        clamped: prepared.clamped,
    })
}

/// Unit-normalizes the rows of `m` (testing and fixture helper).
pub fn unit_rows(m: Array2<f64>) -> Array2<f64> {
    normalize_rows(m).0
}
