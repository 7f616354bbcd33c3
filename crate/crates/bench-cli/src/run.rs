//! `gen-data` and `run`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use grcl_core::domains::{generate_sequence, load_dataset, save_dataset, DomainDataset};
use grcl_core::metrics::MethodMetrics;
use grcl_core::trainer::{run_sequence_traced, Method, StepRecord, TaskReport, TraceSink};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Everything `metrics.json` holds for one (method, seed) cell, keyed by
/// the method name in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub seed: u64,
    /// The headline ACC, as selected by `acc_paper_literal`.
    pub reported_acc: f64,
    #[serde(flatten)]
    pub metrics: MethodMetrics,
    pub violated_steps: usize,
    pub total_steps: usize,
}

/// Outcome of one cell; `Err` holds the failure message.
#[derive(Debug, Clone)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: std::result::Result<CellMetrics, String>,
}

/// Per-method mean and sample standard deviation over successful seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub seeds: usize,
    pub failed: usize,
    pub acc: (f64, Option<f64>),
    pub bwt: Option<(f64, Option<f64>)>,
    pub target: Option<(f64, Option<f64>)>,
}

pub fn cell_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.name()).join(format!("seed_{seed}"))
}

/// The domain sequence used for `seed`.
pub fn datasets_for(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<DomainDataset>> {
    if cfg.data_files.is_empty() {
        return Ok(generate_sequence(&cfg.benchmark.sequence(seed))?);
    }
    let ds = cfg
        .data_files
        .iter()
        .map(|p| load_dataset(p, cfg.benchmark.num_classes))
        .collect::<grcl_core::Result<Vec<_>>>()?;
    Ok(ds)
}

/// Writes `domain_<k>.csv` for every domain of `seed`'s sequence.
pub fn cmd_gen_data(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ds = generate_sequence(&cfg.benchmark.sequence(seed))?;
    let mut paths = Vec::with_capacity(ds.len());
    for d in &ds {
        let p = out.join(format!("domain_{}.csv", d.domain_id()));
        save_dataset(d, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Step tracing is on when `GRCL_TRACE=1`.
pub fn tracing_from_env() -> bool {
    std::env::var("GRCL_TRACE").is_ok_and(|v| v == "1")
}

struct JsonLines {
    w: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl JsonLines {
    fn write<T: Serialize>(&mut self, tag: &str, value: &T) {
        if self.failed.is_some() {
            return;
        }
        #[derive(Serialize)]
        struct Line<'a, T> {
            kind: &'a str,
            #[serde(flatten)]
            value: &'a T,
        }
        let r = serde_json::to_writer(&mut self.w, &Line { kind: tag, value })
            .map_err(std::io::Error::from)
            .and_then(|_| self.w.write_all(b"\n"));
        if let Err(e) = r {
            self.failed = Some(e);
        }
    }
}

impl TraceSink for JsonLines {
    fn record(&mut self, step: &StepRecord) {
        self.write("step", step);
    }
}

/// Runs one (method, seed) cell and writes its three files into `dir`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    datasets: &[DomainDataset],
    method: Method,
    seed: u64,
    dir: &Path,
    trace: bool,
) -> Result<CellMetrics> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let spec = cfg.model_spec();
    let train = grcl_core::trainer::TrainConfig {
        seed,
        ..cfg.train_for(method)
    };
    let trace_path = dir.join("trace.jsonl");
    let file = File::create(&trace_path).map_err(|e| CliError::io(&trace_path, e))?;
    let mut log = JsonLines {
        w: BufWriter::new(file),
        failed: None,
    };
    let outcome = if trace {
        run_sequence_traced(&spec, datasets, &train, &mut log)
    } else {
        run_sequence_traced(&spec, datasets, &train, &mut ())
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            log.write("error", &serde_json::json!({ "message": e.to_string() }));
            let _ = log.w.flush();
            return Err(e.into());
        }
    };
    for r in &outcome.reports {
        log.write::<TaskReport>("task", r);
    }
    log.w.flush().map_err(|e| CliError::io(&trace_path, e))?;
    if let Some(e) = log.failed {
        return Err(CliError::io(&trace_path, e));
    }

    outcome.matrix.save_csv(&dir.join("accuracy_matrix.csv"))?;
    let metrics = MethodMetrics::from_matrix(&outcome.matrix)?;
    let reported_acc = if cfg.acc_paper_literal {
        metrics.acc_paper_literal.ok_or_else(|| {
            CliError::InvalidConfig("acc_paper_literal needs at least one target domain".into())
        })?
    } else {
        metrics.acc
    };
    let cell = CellMetrics {
        seed,
        reported_acc,
        metrics,
        violated_steps: outcome.reports.iter().map(|r| r.violated_steps).sum(),
        total_steps: outcome.reports.iter().map(|r| r.steps).sum(),
    };
    write_metrics(&dir.join("metrics.json"), method, &cell)?;
    Ok(cell)
}

fn write_metrics(path: &Path, method: Method, cell: &CellMetrics) -> Result<()> {
    let mut map = serde_json::Map::new();
    map.insert(
        method.name().to_string(),
        serde_json::to_value(cell).map_err(|e| CliError::io(path, e.into()))?,
    );
    let mut text = serde_json::to_string_pretty(&map).map_err(|e| CliError::io(path, e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a `metrics.json` written by [`run_cell`].
pub fn read_metrics(path: &Path) -> std::result::Result<(Method, CellMetrics), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut it = map.into_iter();
    let (Some((name, value)), None) = (it.next(), it.next()) else {
        return Err(format!("{}: expected exactly one method entry", path.display()));
    };
    let method: Method = name.parse().map_err(|e| format!("{}: {e}", path.display()))?;
    let cell = serde_json::from_value(value).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok((method, cell))
}

/// Runs every (method, seed) cell on up to `jobs` threads, then writes
/// `summary.csv` and `config.conf` into `out`. A failing cell leaves an
/// `error.txt` and does not stop the others.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, jobs: usize, trace: bool) -> Result<Vec<Cell>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let data = cfg
        .seeds
        .iter()
        .map(|&s| datasets_for(cfg, s))
        .collect::<Result<Vec<_>>>()?;

    let plan: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.seeds.len()).map(move |i| (m, i)))
        .collect();
    let results: Mutex<Vec<Option<Cell>>> = Mutex::new(vec![None; plan.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, plan.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(method, s)) = plan.get(i) else { break };
                let seed = cfg.seeds[s];
                let dir = cell_dir(out, method, seed);
                let result = run_cell(cfg, &data[s], method, seed, &dir, trace).map_err(|e| {
                    let msg = e.to_string();
                    let _ = fs::create_dir_all(&dir);
                    let _ = fs::write(dir.join("error.txt"), format!("{msg}\n"));
                    msg
                });
                let cell = Cell {
                    method,
                    seed,
                    dir,
                    result,
                };
                results.lock().expect("no panics while holding the lock")[i] = Some(cell);
            });
        }
    });
    let cells: Vec<Cell> = results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();

    let rows = summarize(&cfg.methods, &cells);
    let summary_path = out.join("summary.csv");
    fs::write(&summary_path, summary_csv(&rows)).map_err(|e| CliError::io(&summary_path, e))?;
    let cfg_path = out.join("config.conf");
    fs::write(&cfg_path, cfg.render()).map_err(|e| CliError::io(&cfg_path, e))?;
    Ok(cells)
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(v: &[f64]) -> Option<(f64, Option<f64>)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1)
        .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

pub fn summarize(methods: &[Method], cells: &[Cell]) -> Vec<SummaryRow> {
    methods
        .iter()
        .filter_map(|&method| {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.method == method).collect();
            let ok: Vec<&CellMetrics> = mine.iter().filter_map(|c| c.result.as_ref().ok()).collect();
            let acc: Vec<f64> = ok.iter().map(|m| m.reported_acc).collect();
            let bwt: Vec<f64> = ok.iter().filter_map(|m| m.metrics.bwt).collect();
            let target: Vec<f64> = ok.iter().filter_map(|m| m.metrics.target_mean).collect();
            Some(SummaryRow {
                method,
                seeds: ok.len(),
                failed: mine.len() - ok.len(),
                acc: mean_std(&acc)?,
                bwt: mean_std(&bwt),
                target: mean_std(&target),
            })
        })
        .collect()
}

fn cell_text(v: Option<(f64, Option<f64>)>) -> (String, String) {
    match v {
        None => (String::new(), String::new()),
        Some((m, s)) => (m.to_string(), s.map(|s| s.to_string()).unwrap_or_default()),
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out =
        String::from("method,seeds,failed,acc_mean,acc_std,bwt_mean,bwt_std,target_mean,target_std\n");
    for r in rows {
        let (am, asd) = cell_text(Some(r.acc));
        let (bm, bsd) = cell_text(r.bwt);
        let (tm, tsd) = cell_text(r.target);
        out.push_str(&format!(
            "{},{},{},{am},{asd},{bm},{bsd},{tm},{tsd}\n",
            r.method, r.seeds, r.failed
        ));
    }
    out
}

/// `0.812 ± 0.004` style cell; `-` when undefined.
pub fn pm(v: Option<(f64, Option<f64>)>) -> String {
    match v {
        None => "-".into(),
        Some((m, Some(s))) => format!("{m:.4} ± {s:.4}"),
        Some((m, None)) => format!("{m:.4}"),
    }
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<14} {:>5} {:>17} {:>17} {:>17}\n", "method", "seeds", "ACC", "BWT", "target");
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>5} {:>17} {:>17} {:>17}\n",
            r.method.name(),
            r.seeds,
            pm(Some(r.acc)),
            pm(r.bwt),
            pm(r.target)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[0.7, 0.8, 0.9]).unwrap();
        assert!((m - 0.8).abs() < 1e-15);
        assert!((s.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5]), Some((0.5, None)));
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn pm_formats() {
        assert_eq!(pm(Some((0.5, Some(0.25)))), "0.5000 ± 0.2500");
        assert_eq!(pm(Some((0.5, None))), "0.5000");
        assert_eq!(pm(None), "-");
    }
}
