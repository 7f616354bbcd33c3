//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment. Every key has a default
//! (see [`ExperimentConfig::default`]); unknown or repeated keys are errors.
//! Training keys may be prefixed with a method name to override them for
//! that method only, e.g. `multi-task.lambda = 0.3`.
//!
//! Lists are comma-separated. `negatives` is either `all` or a count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use grcl_core::contrast::NegativeSampling;
use grcl_core::domains::{DomainSequenceSpec, DomainTransform};
use grcl_core::memory::SelectionPolicy;
use grcl_core::model::ModelSpec;
use grcl_core::trainer::{Method, TrainConfig};

use crate::error::{CliError, Result};

/// Synthetic sequence: target `k` (1-based) is the source rotated by
/// `k * rotation_step_deg`, scaled by `1 + k * scale_step` and shifted by
/// `k * translation_step` along every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub num_targets: usize,
    pub rotation_step_deg: f64,
    pub scale_step: f64,
    pub translation_step: f64,
    pub noise: f64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub radius: f64,
}

impl BenchmarkSpec {
    pub fn sequence(&self, seed: u64) -> DomainSequenceSpec {
        let targets = (1..=self.num_targets)
            .map(|k| {
                let k = k as f64;
                let mut t = DomainTransform::rotated(k * self.rotation_step_deg, self.noise);
                t.scale = 1.0 + k * self.scale_step;
                if self.translation_step != 0.0 {
                    t.translation = vec![k * self.translation_step; self.input_dim];
                }
                t
            })
            .collect();
        DomainSequenceSpec {
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            source: DomainTransform::identity(self.noise),
            targets,
            train_per_domain: self.train_per_domain,
            test_per_domain: self.test_per_domain,
            radius: self.radius,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    /// Domain files (source first). When set, nothing is generated and the
    /// same data is used for every seed.
    pub data_files: Vec<PathBuf>,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden_dim: usize,
    pub key_dim: usize,
    pub train: TrainConfig,
    /// `(method, key, value)` training overrides, applied in file order.
    pub overrides: Vec<(Method, String, String)>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Report the literal `1/N` ACC instead of the mean over `N + 1` domains.
    pub acc_paper_literal: bool,
}

impl Default for ExperimentConfig {
    /// The shipped benchmark.
    fn default() -> Self {
        let train = TrainConfig {
            learning_rate: 0.2,
            lambda: 0.1,
            source_learning_rate: 0.1,
            source_epochs: 200,
            epochs: 30,
            momentum: 0.0,
            augment: grcl_core::domains::AugmentStrength {
                noise_sigma: 0.2,
                scale_min: 0.7,
                scale_max: 1.3,
            },
            ..TrainConfig::default()
        };
        ExperimentConfig {
            benchmark: BenchmarkSpec {
                num_classes: 5,
                input_dim: 2,
                num_targets: 4,
                rotation_step_deg: 20.0,
                scale_step: 0.5,
                translation_step: 0.0,
                noise: 0.1,
                train_per_domain: 500,
                test_per_domain: 200,
                radius: 1.0,
            },
            data_files: Vec::new(),
            hidden_dims: vec![64, 64],
            feature_dim: 16,
            head_hidden_dim: 32,
            key_dim: 16,
            train,
            overrides: Vec::new(),
            methods: vec![
                Method::SourceOnly,
                Method::SeqFinetune,
                Method::MultiTask,
                Method::GrclNoForget,
                Method::Grcl,
            ],
            seeds: vec![0, 1, 2],
            acc_paper_literal: false,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Keys that may carry a `method.` prefix.
const TRAIN_KEYS: [&str; 20] = [
    "learning_rate",
    "cosine_decay",
    "source_learning_rate",
    "source_epochs",
    "epochs",
    "source_batch",
    "contrast_batch",
    "memory_batch",
    "lambda",
    "temperature",
    "momentum",
    "negatives",
    "memory_capacity",
    "selection",
    "augment_noise",
    "augment_scale_min",
    "augment_scale_max",
    "exact_per_domain",
    "ridge",
    "feasibility_scale",
];

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "learning_rate" => t.learning_rate = parse(v)?,
        "cosine_decay" => t.cosine_decay = parse(v)?,
        "source_learning_rate" => t.source_learning_rate = parse(v)?,
        "source_epochs" => t.source_epochs = parse(v)?,
        "epochs" => t.epochs = parse(v)?,
        "source_batch" => t.source_batch = parse(v)?,
        "contrast_batch" => t.contrast_batch = parse(v)?,
        "memory_batch" => t.memory_batch = parse(v)?,
        "lambda" => t.lambda = parse(v)?,
        "temperature" => t.temperature = parse(v)?,
        "momentum" => t.momentum = parse(v)?,
        "negatives" => {
            t.negatives = match v {
                "all" => NegativeSampling::Full,
                n => NegativeSampling::Sampled(parse(n)?),
            }
        }
        "memory_capacity" => t.memory_capacity = parse(v)?,
        "selection" => {
            t.selection = match v {
                "balanced" => SelectionPolicy::Balanced,
                "global-top" => SelectionPolicy::GlobalTop,
                _ => return Err(format!("{v:?}: expected balanced or global-top")),
            }
        }
        "augment_noise" => t.augment.noise_sigma = parse(v)?,
        "augment_scale_min" => t.augment.scale_min = parse(v)?,
        "augment_scale_max" => t.augment.scale_max = parse(v)?,
        "exact_per_domain" => t.exact_per_domain = parse(v)?,
        "ridge" => t.ridge = parse(v)?,
        "feasibility_scale" => t.feasibility_scale = parse(v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

fn render_train(t: &TrainConfig, prefix: &str, out: &mut String) {
    let negatives = match t.negatives {
        NegativeSampling::Full => "all".to_string(),
        NegativeSampling::Sampled(n) => n.to_string(),
    };
    let selection = match t.selection {
        SelectionPolicy::Balanced => "balanced",
        SelectionPolicy::GlobalTop => "global-top",
    };
    let pairs: [(&str, String); 20] = [
        ("learning_rate", t.learning_rate.to_string()),
        ("cosine_decay", t.cosine_decay.to_string()),
        ("source_learning_rate", t.source_learning_rate.to_string()),
        ("source_epochs", t.source_epochs.to_string()),
        ("epochs", t.epochs.to_string()),
        ("source_batch", t.source_batch.to_string()),
        ("contrast_batch", t.contrast_batch.to_string()),
        ("memory_batch", t.memory_batch.to_string()),
        ("lambda", t.lambda.to_string()),
        ("temperature", t.temperature.to_string()),
        ("momentum", t.momentum.to_string()),
        ("negatives", negatives),
        ("memory_capacity", t.memory_capacity.to_string()),
        ("selection", selection.to_string()),
        ("augment_noise", t.augment.noise_sigma.to_string()),
        ("augment_scale_min", t.augment.scale_min.to_string()),
        ("augment_scale_max", t.augment.scale_max.to_string()),
        ("exact_per_domain", t.exact_per_domain.to_string()),
        ("ridge", t.ridge.to_string()),
        ("feasibility_scale", t.feasibility_scale.to_string()),
    ];
    for (k, v) in pairs {
        let _ = writeln!(out, "{prefix}{k} = {v}");
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    /// Parses `text`; `origin` names the source in errors and relative
    /// `data_files` are resolved against `base`.
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| CliError::Config {
                path: origin.to_path_buf(),
                line,
                message,
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(format!("{key}: missing value")));
            }
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("{key}: set twice")));
            }
            seen.push(key.to_string());
            cfg.set(key, value, base).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
        if let Some((prefix, rest)) = key.split_once('.') {
            let method: Method = prefix.parse().map_err(|_| format!("unknown key {key:?}"))?;
            if !TRAIN_KEYS.contains(&rest) {
                return Err(format!("{rest:?} cannot be overridden per method"));
            }
            // Checked here so a bad override fails at its own line.
            set_train(&mut self.train.clone(), rest, v)?;
            self.overrides.push((method, rest.to_string(), v.to_string()));
            return Ok(());
        }
        let b = &mut self.benchmark;
        match key {
            "num_classes" => b.num_classes = parse(v)?,
            "input_dim" => b.input_dim = parse(v)?,
            "num_targets" => b.num_targets = parse(v)?,
            "rotation_step_deg" => b.rotation_step_deg = parse(v)?,
            "scale_step" => b.scale_step = parse(v)?,
            "translation_step" => b.translation_step = parse(v)?,
            "noise" => b.noise = parse(v)?,
            "train_per_domain" => b.train_per_domain = parse(v)?,
            "test_per_domain" => b.test_per_domain = parse(v)?,
            "radius" => b.radius = parse(v)?,
            "data_files" => {
                self.data_files = v.split(',').map(|s| base.join(s.trim())).collect();
            }
            "hidden_dims" => self.hidden_dims = parse_list(v)?,
            "feature_dim" => self.feature_dim = parse(v)?,
            "head_hidden_dim" => self.head_hidden_dim = parse(v)?,
            "key_dim" => self.key_dim = parse(v)?,
            "methods" => {
                self.methods = v
                    .split(',')
                    .map(|s| s.trim().parse::<Method>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "seeds" => self.seeds = parse_list(v)?,
            "acc_paper_literal" => self.acc_paper_literal = parse(v)?,
            _ => set_train(&mut self.train, key, v)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::InvalidConfig(m));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method {m} listed twice"));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return bad(format!("seed {s} listed twice"));
            }
        }
        if self.data_files.is_empty() {
            self.benchmark.sequence(0).validate()?;
        }
        self.model_spec().validate()?;
        for &m in &self.methods {
            self.train_for(m).validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.benchmark.input_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            num_classes: self.benchmark.num_classes,
            head_hidden_dim: self.head_hidden_dim,
            key_dim: self.key_dim,
        }
    }

    /// Training configuration of `method`, with its overrides applied.
    pub fn train_for(&self, method: Method) -> TrainConfig {
        let mut t = TrainConfig {
            method,
            ..self.train.clone()
        };
        for (m, k, v) in &self.overrides {
            if *m == method {
                set_train(&mut t, k, v).expect("override checked at parse time");
            }
        }
        t
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn render(&self) -> String {
        let b = &self.benchmark;
        let mut out = String::new();
        let _ = writeln!(out, "# benchmark");
        let _ = writeln!(out, "num_classes = {}", b.num_classes);
        let _ = writeln!(out, "input_dim = {}", b.input_dim);
        let _ = writeln!(out, "num_targets = {}", b.num_targets);
        let _ = writeln!(out, "rotation_step_deg = {}", b.rotation_step_deg);
        let _ = writeln!(out, "scale_step = {}", b.scale_step);
        let _ = writeln!(out, "translation_step = {}", b.translation_step);
        let _ = writeln!(out, "noise = {}", b.noise);
        let _ = writeln!(out, "train_per_domain = {}", b.train_per_domain);
        let _ = writeln!(out, "test_per_domain = {}", b.test_per_domain);
        let _ = writeln!(out, "radius = {}", b.radius);
        if !self.data_files.is_empty() {
            let files: Vec<String> = self.data_files.iter().map(|p| p.display().to_string()).collect();
            let _ = writeln!(out, "data_files = {}", files.join(","));
        }
        let _ = writeln!(out, "\n# model");
        let _ = writeln!(out, "hidden_dims = {}", join(&self.hidden_dims));
        let _ = writeln!(out, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(out, "head_hidden_dim = {}", self.head_hidden_dim);
        let _ = writeln!(out, "key_dim = {}", self.key_dim);
        let _ = writeln!(out, "\n# training");
        render_train(&self.train, "", &mut out);
        for (m, k, v) in &self.overrides {
            let _ = writeln!(out, "{m}.{k} = {v}");
        }
        let _ = writeln!(out, "\n# run");
        let names: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        let _ = writeln!(out, "methods = {}", names.join(","));
        let _ = writeln!(out, "seeds = {}", join(&self.seeds));
        let _ = writeln!(out, "acc_paper_literal = {}", self.acc_paper_literal);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("test.conf"), Path::new("/data"))
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_str("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn render_round_trips() {
        let cfg = parse_str(
            "methods = grcl, multi-task\nseeds = 4,7\nmulti-task.lambda = 0.3\nnegatives = all\n\
             data_files = a.csv,b.csv\nselection = global-top",
        )
        .unwrap();
        assert_eq!(cfg.data_files[1], PathBuf::from("/data/b.csv"));
        assert_eq!(parse_str(&cfg.render()).unwrap(), cfg);
        assert_eq!(parse_str(&ExperimentConfig::default().render()).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_apply_to_one_method() {
        let cfg = parse_str("lambda = 2\nmulti-task.lambda = 0.3").unwrap();
        assert_eq!(cfg.train_for(Method::MultiTask).lambda, 0.3);
        assert_eq!(cfg.train_for(Method::Grcl).lambda, 2.0);
        assert_eq!(cfg.train_for(Method::Grcl).method, Method::Grcl);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("epochs = 3\nlearnin_rate = 0.1", 2),
            ("epochs = x", 1),
            ("\n\nepochs", 3),
            ("epochs = 3\nepochs = 4", 2),
            ("grcl.hidden_dims = 3", 1),
            ("bogus.lambda = 1", 1),
            ("grcl.lambda = -", 1),
            ("selection = best", 1),
            ("methods = grcl,nope", 1),
        ];
        for (text, want) in cases {
            match parse_str(text) {
                Err(CliError::Config { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for text in ["seeds = 1,1", "momentum = 1.5", "hidden_dims = 0", "num_classes = 1"] {
            let e = parse_str(text).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{text}: {e}");
        }
    }
}
