//! Source training, per-domain adaptation and the baselines.
//!
//! One adaptation step, in order:
//!
//! 1. `g_t`: gradient of the contrastive loss on a batch drawn from the
//!    bank (source ∪ memory ∪ current target),
//! 2. `g_s`: cross-entropy gradient on a fresh source batch,
//! 3. momentum update of the batch's bank keys,
//! 4. `g_dm`: cross-entropy gradient on a memory batch with pseudo-labels
//!    (skipped while the memory is empty),
//! 5. projection of `g_t` onto `{z : <z, g_s> >= 0, <z, g_dm> >= 0}`,
//! 6. SGD step with the projected update.
//!
//! After the last epoch of a task the target's episodic memory is selected
//! with the new parameters and appended to the domain memory.
//!
//! All randomness is derived from `(seed, task, step, purpose)`, so methods
//! that skip a computation still see the same batches as methods that do
//! not.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::contrast::{
    build_feature_bank, contrastive_batch_loss, BankSource, FeatureBank, NegativeSampling,
    SampleKey, DEFAULT_MOMENTUM, DEFAULT_TEMPERATURE,
};
use crate::domains::{AugmentStrength, DomainDataset};
use crate::error::{GrclError, Result};
use crate::gradproj::{project, ConstraintSet, ConstraintTag};
use crate::memory::{select_episodic, DomainMemory, SelectionPolicy};
use crate::metrics::{evaluate_accuracy, AccuracyMatrix};
use crate::model::{ce_gradient, Batch, FlatGradient, LossSpec, ModelSpec, ParamVector};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// No adaptation.
    SourceOnly,
    /// Unconstrained contrastive updates.
    SeqFinetune,
    /// Unconstrained `L_ce + lambda * L_contrast`.
    MultiTask,
    /// Contrastive updates projected against the source constraint only.
    GrclNoForget,
    /// Source constraint plus one domain-memory constraint.
    Grcl,
    /// Source constraint plus one constraint per episodic memory.
    GrclExact,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SourceOnly,
        Method::SeqFinetune,
        Method::MultiTask,
        Method::GrclNoForget,
        Method::Grcl,
        Method::GrclExact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source-only",
            Method::SeqFinetune => "seq-finetune",
            Method::MultiTask => "multi-task",
            Method::GrclNoForget => "grcl-noforget",
            Method::Grcl => "grcl",
            Method::GrclExact => "grcl-exact",
        }
    }

    fn is_projected(self) -> bool {
        matches!(self, Method::GrclNoForget | Method::Grcl | Method::GrclExact)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GrclError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GrclError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate over each task (and over source
    /// training).
    pub cosine_decay: bool,
    /// Learning rate of supervised source training.
    pub source_learning_rate: f64,
    pub source_epochs: usize,
    /// Adaptation epochs per target task.
    pub epochs: usize,
    pub source_batch: usize,
    pub contrast_batch: usize,
    pub memory_batch: usize,
    /// Weight of the contrastive term for [`Method::MultiTask`].
    pub lambda: f64,
    pub temperature: f64,
    pub momentum: f64,
    pub negatives: NegativeSampling,
    pub memory_capacity: usize,
    pub selection: SelectionPolicy,
    pub augment: AugmentStrength,
    /// One constraint row per episodic memory instead of one for the union.
    pub exact_per_domain: bool,
    pub ridge: f64,
    /// Feasibility slack is `feasibility_scale * (1 + |g_t|)`.
    pub feasibility_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Grcl,
            learning_rate: 0.05,
            cosine_decay: true,
            source_learning_rate: 0.1,
            source_epochs: 200,
            epochs: 30,
            source_batch: 64,
            contrast_batch: 64,
            memory_batch: 64,
            lambda: 1.0,
            temperature: DEFAULT_TEMPERATURE,
            momentum: DEFAULT_MOMENTUM,
            negatives: NegativeSampling::Sampled(256),
            memory_capacity: 256,
            selection: SelectionPolicy::Balanced,
            augment: AugmentStrength {
                noise_sigma: 0.1,
                scale_min: 0.9,
                scale_max: 1.1,
            },
            exact_per_domain: false,
            ridge: 0.0,
            feasibility_scale: 1e-9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GrclError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.source_learning_rate > 0.0)
            || !(self.learning_rate + self.source_learning_rate).is_finite()
        {
            return bad("learning rates must be > 0");
        }
        if self.source_batch == 0 || self.contrast_batch == 0 || self.memory_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.memory_capacity == 0 {
            return bad("memory_capacity must be >= 1");
        }
        if !(self.ridge >= 0.0) || !(self.feasibility_scale >= 0.0) {
            return bad("ridge and feasibility_scale must be >= 0");
        }
        self.augment.validate()
    }

    fn uses_per_domain_rows(&self) -> bool {
        self.method == Method::GrclExact || (self.method == Method::Grcl && self.exact_per_domain)
    }
}

fn lr_at(cfg: &TrainConfig, base: f64, step: usize, total: usize) -> f64 {
    if !cfg.cosine_decay || total == 0 {
        return base;
    }
    let t = step as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn batches_per_epoch(n: usize, b: usize) -> usize {
    n.div_ceil(b)
}

mod purpose {
    pub const INIT: u64 = 1;
    pub const SOURCE_SHUFFLE: u64 = 2;
    pub const UNION_SHUFFLE: u64 = 3;
    pub const CONTRAST: u64 = 4;
    pub const SOURCE_BATCH: u64 = 5;
    pub const MEMORY_BATCH: u64 = 6;
    pub const MEMORY_SELECT: u64 = 7;
}

fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| rng::mix(acc, p))
}

/// The seeded initialization [`train_source`] starts from.
pub fn initial_params(spec: &ModelSpec, cfg: &TrainConfig) -> Result<ParamVector> {
    ParamVector::init(spec, derive(cfg.seed, &[purpose::INIT]))
}

/// Mini-batch SGD on the source cross-entropy from [`initial_params`].
pub fn train_source(spec: &ModelSpec, source: &DomainDataset, cfg: &TrainConfig) -> Result<ParamVector> {
    cfg.validate()?;
    let batch = source.source_batch()?;
    let mut params = initial_params(spec, cfg)?;
    let n = batch.len();
    let per_epoch = batches_per_epoch(n, cfg.source_batch);
    let total = per_epoch * cfg.source_epochs;
    let mut step = 0;
    for epoch in 0..cfg.source_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(
            derive(cfg.seed, &[purpose::SOURCE_SHUFFLE, epoch as u64]),
            0,
        ));
        for chunk in order.chunks(cfg.source_batch) {
            let (loss, grad) = ce_gradient(&params, &batch.select(chunk))?;
            if !loss.is_finite() {
                return Err(GrclError::Divergence(format!(
                    "source loss {loss} at epoch {epoch}, step {step}"
                )));
            }
            params = params.sgd_step(&grad, lr_at(cfg, cfg.source_learning_rate, step, total))?;
            step += 1;
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct AdaptationState {
    pub params: ParamVector,
    pub memory: DomainMemory,
    /// Bank of the most recent task.
    pub bank: Option<FeatureBank>,
    pub completed_domains: usize,
    pub frozen_prev_params: ParamVector,
}

impl AdaptationState {
    pub fn new(params: ParamVector) -> Self {
        AdaptationState {
            frozen_prev_params: params.clone(),
            params,
            memory: DomainMemory::new(),
            bank: None,
            completed_domains: 0,
        }
    }
}

/// One line of the optional step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub method: String,
    pub domain: u32,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub contrast_loss: f64,
    pub source_ce: Option<f64>,
    pub memory_ce: Vec<f64>,
    pub tags: Vec<String>,
    /// `<g_t, g_k>` per constraint, before projection.
    pub alignments: Vec<f64>,
    pub violated: Vec<bool>,
    pub multipliers: Vec<f64>,
    pub distortion: f64,
    pub proposed_norm: f64,
    pub update_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub domain: u32,
    pub steps: usize,
    /// Steps where the raw contrastive gradient violated a constraint.
    pub violated_steps: usize,
    pub max_distortion: f64,
    pub mean_contrast_loss: f64,
    pub memory_added: usize,
}

/// Receives step records; `()` discards them.
pub trait TraceSink {
    fn record(&mut self, rec: &StepRecord);
}

impl TraceSink for () {
    fn record(&mut self, _: &StepRecord) {}
}

impl<F: FnMut(&StepRecord)> TraceSink for F {
    fn record(&mut self, rec: &StepRecord) {
        self(rec)
    }
}

/// Everything that takes part in one task: bank rows in order and the
/// matching inputs.
struct TaskUnion {
    inputs: Array2<f64>,
    keys: Vec<SampleKey>,
}

fn task_union(source: &DomainDataset, memory: &DomainMemory, target: &DomainDataset) -> TaskUnion {
    let mut parts = vec![source.train_inputs().view()];
    let mut keys: Vec<SampleKey> = (0..source.train_len() as u32)
        .map(|i| SampleKey::new(source.domain_id(), i))
        .collect();
    for m in memory.episodic() {
        parts.push(m.samples.view());
        keys.extend(m.sample_ids.iter().map(|&s| SampleKey::new(m.domain_id, s)));
    }
    parts.push(target.train_inputs().view());
    keys.extend((0..target.train_len() as u32).map(|i| SampleKey::new(target.domain_id(), i)));
    let inputs = ndarray::concatenate(Axis(0), &parts).expect("all domains share input_dim");
    TaskUnion { inputs, keys }
}

fn bank_sources<'a>(
    source: &'a DomainDataset,
    memory: &'a DomainMemory,
    target: &'a DomainDataset,
) -> Vec<BankSource<'a>> {
    let mut v = vec![BankSource::new(source.domain_id(), source.train_inputs().view())];
    v.extend(memory.bank_sources());
    v.push(BankSource::new(target.domain_id(), target.train_inputs().view()));
    v
}

pub fn adapt_domain(
    state: AdaptationState,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<(AdaptationState, TaskReport)> {
    adapt_domain_traced(state, source, target, cfg, &mut ())
}

/// Adapts to one target domain with the configured method.
pub fn adapt_domain_traced(
    mut state: AdaptationState,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
    trace: &mut dyn TraceSink,
) -> Result<(AdaptationState, TaskReport)> {
    cfg.validate()?;
    if target.labeled_for_training() {
        return Err(GrclError::InvalidInput(
            "adaptation target must be unlabeled for training".into(),
        ));
    }
    let source_batch = source.source_batch()?;
    let task = target.domain_id() as u64;
    let mut report = TaskReport {
        domain: target.domain_id(),
        ..TaskReport::default()
    };

    // Bank built from the parameters that finished the previous task.
    let mut bank = build_feature_bank(
        &state.frozen_prev_params,
        &bank_sources(source, &state.memory, target),
        cfg.momentum,
        cfg.temperature,
    )?;

    if cfg.method != Method::SourceOnly {
        let union = task_union(source, &state.memory, target);
        let n = union.keys.len();
        let per_epoch = batches_per_epoch(n, cfg.contrast_batch);
        let total = per_epoch * cfg.epochs;
        let mut params = state.params.clone();
        let mut step = 0;
        let mut loss_sum = 0.0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::seeded(
                derive(cfg.seed, &[purpose::UNION_SHUFFLE, task, epoch as u64]),
                0,
            ));
            for chunk in order.chunks(cfg.contrast_batch) {
                let lr = lr_at(cfg, cfg.learning_rate, step, total);
                let (next, rec) = adapt_step(
                    &params,
                    &mut bank,
                    &union,
                    chunk,
                    &source_batch,
                    &state.memory,
                    cfg,
                    task,
                    step,
                    lr,
                )?;
                params = next;
                report.steps += 1;
                if rec.violated.iter().any(|&v| v) {
                    report.violated_steps += 1;
                }
                report.max_distortion = report.max_distortion.max(rec.distortion);
                loss_sum += rec.contrast_loss;
                trace.record(&StepRecord {
                    method: cfg.method.name().to_string(),
                    domain: target.domain_id(),
                    epoch,
                    ..rec
                });
                step += 1;
            }
        }
        if report.steps > 0 {
            report.mean_contrast_loss = loss_sum / report.steps as f64;
        }
        state.params = params;
    }

    let episodic = select_episodic(
        &state.params,
        target,
        cfg.memory_capacity,
        cfg.selection,
        derive(cfg.seed, &[purpose::MEMORY_SELECT, task]),
    )?;
    report.memory_added = episodic.len();
    state.memory.push(episodic)?;
    state.frozen_prev_params = state.params.clone();
    state.bank = Some(bank);
    state.completed_domains += 1;
    Ok((state, report))
}

#[allow(clippy::too_many_arguments)]
fn adapt_step(
    params: &ParamVector,
    bank: &mut FeatureBank,
    union: &TaskUnion,
    rows: &[usize],
    source: &Batch,
    memory: &DomainMemory,
    cfg: &TrainConfig,
    task: u64,
    step: usize,
    lr: f64,
) -> Result<(ParamVector, StepRecord)> {
    let step_seed = |p: u64| derive(cfg.seed, &[p, task, step as u64]);
    let fail = |e: GrclError| match e {
        GrclError::Divergence(_) | GrclError::InfeasibleUpdate { .. } => e,
        other => GrclError::InvalidInput(format!("task {task}, step {step}: {other}")),
    };

    // g_t
    let inputs = union.inputs.select(Axis(0), rows);
    let keys: Vec<SampleKey> = rows.iter().map(|&r| union.keys[r]).collect();
    let contrast = contrastive_batch_loss(
        params,
        bank,
        inputs.view(),
        &keys,
        &cfg.augment,
        cfg.negatives,
        step_seed(purpose::CONTRAST),
    )
    .map_err(fail)?;

    // g_s
    let needs_source = cfg.method == Method::MultiTask || cfg.method.is_projected();
    let source_grad = if needs_source {
        let b = cfg.source_batch.min(source.len());
        let mut r = rng::seeded(step_seed(purpose::SOURCE_BATCH), 0);
        let idx = index::sample(&mut r, source.len(), b).into_vec();
        Some(ce_gradient(params, &source.select(&idx)).map_err(fail)?)
    } else {
        None
    };

    for (i, &row) in contrast.rows.iter().enumerate() {
        bank.update_key(row, contrast.fresh_keys.row(i)).map_err(fail)?;
    }

    // g_dm (or one gradient per episodic memory)
    let mut memory_grads: Vec<(ConstraintTag, f64, FlatGradient)> = Vec::new();
    if matches!(cfg.method, Method::Grcl | Method::GrclExact) && !memory.is_empty() {
        let seed = step_seed(purpose::MEMORY_BATCH);
        if cfg.uses_per_domain_rows() {
            for m in memory.episodic().iter().filter(|m| !m.is_empty()) {
                let batch = m.sample_batch(cfg.memory_batch, rng::mix(seed, m.domain_id as u64))?;
                let (l, g) = ce_gradient(params, &batch).map_err(fail)?;
                memory_grads.push((ConstraintTag::Memory(m.domain_id), l, g));
            }
        } else {
            let mb = memory.sample_batch(cfg.memory_batch, seed)?;
            let (l, g) = ce_gradient(params, &mb.batch).map_err(fail)?;
            memory_grads.push((ConstraintTag::DomainMemory, l, g));
        }
    }

    let mut rec = StepRecord {
        method: String::new(),
        domain: task as u32,
        epoch: 0,
        step,
        lr,
        contrast_loss: contrast.loss,
        source_ce: source_grad.as_ref().map(|(l, _)| *l),
        memory_ce: memory_grads.iter().map(|(_, l, _)| *l).collect(),
        tags: Vec::new(),
        alignments: Vec::new(),
        violated: Vec::new(),
        multipliers: Vec::new(),
        distortion: 0.0,
        proposed_norm: contrast.gradient.norm(),
        update_norm: 0.0,
    };

    let update = match cfg.method {
        Method::SourceOnly => unreachable!("source-only never steps"),
        Method::SeqFinetune => contrast.gradient,
        Method::MultiTask => {
            let (_, gs) = source_grad.expect("computed for multi-task");
            let mut g = gs;
            g.add_scaled(&contrast.gradient, cfg.lambda);
            g
        }
        Method::GrclNoForget | Method::Grcl | Method::GrclExact => {
            let (_, gs) = source_grad.expect("computed for projected methods");
            let mut cs = ConstraintSet::new(contrast.gradient).with(ConstraintTag::Source, gs);
            for (tag, _, g) in memory_grads {
                cs.push(tag, g);
            }
            let eps = cfg.feasibility_scale * (1.0 + cs.proposed.norm());
            let result = project(&cs, cfg.ridge, eps).map_err(fail)?;
            for (row, tag) in cs.rows.iter().zip(&cs.tags) {
                let a = result.projected.dot(row);
                if a < -eps && cfg.ridge == 0.0 {
                    return Err(GrclError::InfeasibleUpdate {
                        step,
                        detail: format!("<g_hat, g_{tag}> = {a:e} < -{eps:e}"),
                    });
                }
            }
            rec.tags = cs.tags.iter().map(|t| t.to_string()).collect();
            rec.alignments = cs.alignments();
            rec.violated = result.violated.clone();
            rec.multipliers = result.multipliers.clone();
            rec.distortion = result.distortion;
            result.projected
        }
    };
    rec.update_norm = update.norm();
    let next = params.sgd_step(&update, lr)?;
    Ok((next, rec))
}

/// Result of a full source + targets run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub reports: Vec<TaskReport>,
    pub params: ParamVector,
}

pub fn run_sequence(spec: &ModelSpec, datasets: &[DomainDataset], cfg: &TrainConfig) -> Result<RunOutcome> {
    run_sequence_traced(spec, datasets, cfg, &mut ())
}

/// Trains on `datasets[0]`, adapts through the rest in order, and fills row
/// `i` of the accuracy matrix after task `i`.
pub fn run_sequence_traced(
    spec: &ModelSpec,
    datasets: &[DomainDataset],
    cfg: &TrainConfig,
    trace: &mut dyn TraceSink,
) -> Result<RunOutcome> {
    let (source, targets) = datasets
        .split_first()
        .ok_or_else(|| GrclError::InvalidInput("no datasets".into()))?;
    if !source.is_source() {
        return Err(GrclError::InvalidInput(
            "first dataset must be the labeled source".into(),
        ));
    }
    let params = train_source(spec, source, cfg)?;
    let mut matrix = AccuracyMatrix::new(targets.len());
    matrix.push_row(vec![evaluate_accuracy(&params, source.test())?])?;
    let mut state = AdaptationState::new(params);
    let mut reports = Vec::with_capacity(targets.len());
    for (i, target) in targets.iter().enumerate() {
        let (next, report) = adapt_domain_traced(state, source, target, cfg, trace)?;
        state = next;
        reports.push(report);
        let row = datasets[..=i + 1]
            .iter()
            .map(|d| evaluate_accuracy(&state.params, d.test()))
            .collect::<Result<Vec<_>>>()?;
        matrix.push_row(row)?;
    }
    Ok(RunOutcome {
        matrix,
        reports,
        params: state.params,
    })
}

/// Grid candidates for the multi-task weight.
pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.3, 1.0, 3.0];

/// Runs [`Method::MultiTask`] for every `lambda` in `grid` and returns the
/// one with the best final mean target accuracy (first wins ties), together
/// with every `(lambda, score)` pair.
pub fn select_lambda(
    spec: &ModelSpec,
    datasets: &[DomainDataset],
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(GrclError::InvalidConfig("empty lambda grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let c = TrainConfig {
            method: Method::MultiTask,
            lambda,
            ..cfg.clone()
        };
        let out = run_sequence(spec, datasets, &c)?;
        scores.push((lambda, out.matrix.final_target_mean()?));
    }
    let best = scores
        .iter()
        .fold(scores[0], |b, &s| if s.1 > b.1 { s } else { b });
    Ok((best.0, scores))
}

/// Loss helper used by tests and diagnostics: mean CE of `params` on a
/// labeled batch.
pub fn batch_ce(params: &ParamVector, batch: &Batch) -> Result<f64> {
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| GrclError::InvalidInput("unlabeled batch".into()))?;
    params.loss(&LossSpec::CrossEntropy {
        inputs: batch.inputs.view(),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("grcl2".parse::<Method>().is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0.05, 0, 100), 0.05);
        assert!((lr_at(&cfg, 0.05, 50, 100) - 0.025).abs() < 1e-15);
        let flat = TrainConfig {
            cosine_decay: false,
            ..cfg.clone()
        };
        assert_eq!(lr_at(&flat, 0.05, 70, 100), 0.05);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { memory_batch: 0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { lambda: -1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
