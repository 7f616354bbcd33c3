//! `report`: summarizes a results directory from its `metrics.json` files.

use std::fs;
use std::path::{Path, PathBuf};

use grcl_core::trainer::Method;

use crate::error::{CliError, Result};
use crate::run::{mean_std, pm, read_metrics, CellMetrics};

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    pub cells: Vec<CellMetrics>,
    pub acc: (f64, Option<f64>),
    pub bwt: Option<(f64, Option<f64>)>,
    /// Mean `R[i][1]` for `i = 1..=N`.
    pub evolution: Vec<f64>,
    pub source: (f64, Option<f64>),
    pub target: Option<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub methods: Vec<MethodReport>,
    /// Cells that recorded a failure instead of metrics.
    pub failed_cells: Vec<PathBuf>,
    pub table: String,
}

fn sorted_dirs(dir: &Path) -> std::result::Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let entry = entry.map_err(|e| format!("{}: {e}", dir.display()))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn seed_of(dir: &Path) -> Option<u64> {
    dir.file_name()?.to_str()?.strip_prefix("seed_")?.parse().ok()
}

fn collect(input: &Path) -> Result<(Vec<(Method, Vec<CellMetrics>)>, Vec<PathBuf>)> {
    let mut problems = Vec::new();
    let mut failed = Vec::new();
    let mut found: Vec<(Method, Vec<CellMetrics>)> = Vec::new();
    let method_dirs = sorted_dirs(input).map_err(CliError::Report)?;
    for mdir in method_dirs {
        let name = mdir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Ok(method) = name.parse::<Method>() else {
            continue;
        };
        let mut seeds: Vec<(u64, PathBuf)> = match sorted_dirs(&mdir) {
            Ok(d) => d.into_iter().filter_map(|p| seed_of(&p).map(|s| (s, p))).collect(),
            Err(e) => {
                problems.push(e);
                continue;
            }
        };
        seeds.sort();
        let mut cells = Vec::new();
        for (seed, sdir) in seeds {
            let path = sdir.join("metrics.json");
            if !path.exists() && sdir.join("error.txt").exists() {
                failed.push(sdir);
                continue;
            }
            match read_metrics(&path) {
                Ok((m, _)) if m != method => {
                    problems.push(format!("{}: holds {m}, expected {method}", path.display()))
                }
                Ok((_, c)) if c.seed != seed => problems.push(format!(
                    "{}: holds seed {}, expected {seed}",
                    path.display(),
                    c.seed
                )),
                Ok((_, c)) => cells.push(c),
                Err(e) => problems.push(e),
            }
        }
        if !cells.is_empty() {
            found.push((method, cells));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Report(problems.join("\n")));
    }
    if found.is_empty() {
        return Err(CliError::Report(format!(
            "{}: no metrics.json files found",
            input.display()
        )));
    }
    found.sort_by_key(|(m, _)| Method::ALL.iter().position(|x| x == m));
    Ok((found, failed))
}

fn method_report(method: Method, cells: Vec<CellMetrics>) -> Result<MethodReport> {
    let n = cells[0].metrics.rows.len() - 1;
    for c in &cells {
        if c.metrics.rows.len() != n + 1 {
            return Err(CliError::Report(format!(
                "{method}: seeds disagree on the number of domains"
            )));
        }
    }
    let col = |f: &dyn Fn(&CellMetrics) -> Option<f64>| -> Vec<f64> { cells.iter().filter_map(f).collect() };
    let evolution = (1..=n)
        .map(|i| {
            let v = col(&|c| c.metrics.rows[i].get(1).copied());
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    Ok(MethodReport {
        method,
        acc: mean_std(&col(&|c| Some(c.reported_acc))).expect("at least one cell"),
        bwt: mean_std(&col(&|c| c.metrics.bwt)),
        evolution,
        source: mean_std(&col(&|c| Some(c.metrics.rows[n][0]))).expect("at least one cell"),
        target: mean_std(&col(&|c| c.metrics.target_mean)),
        cells,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads `input`, writes `evolution_domain1.csv` and `source_target.csv`
/// into `out` and returns the table that the CLI prints.
pub fn cmd_report(input: &Path, out: &Path) -> Result<Report> {
    let (found, failed_cells) = collect(input)?;
    let methods = found
        .into_iter()
        .map(|(m, c)| method_report(m, c))
        .collect::<Result<Vec<_>>>()?;

    let mut table = format!("{:<14} {:>5} {:>17} {:>17}\n", "method", "seeds", "ACC", "BWT");
    for r in &methods {
        table.push_str(&format!(
            "{:<14} {:>5} {:>17} {:>17}\n",
            r.method.name(),
            r.cells.len(),
            pm(Some(r.acc)),
            pm(r.bwt)
        ));
    }

    let n = methods.iter().map(|r| r.evolution.len()).max().unwrap_or(0);
    let mut evo = String::from("task");
    for r in &methods {
        evo.push_str(&format!(",{}", r.method));
    }
    evo.push('\n');
    for i in 0..n {
        evo.push_str(&(i + 1).to_string());
        for r in &methods {
            evo.push_str(&format!(",{}", opt(r.evolution.get(i).copied())));
        }
        evo.push('\n');
    }

    let mut st = String::from("method,source_mean,source_std,target_mean,target_std\n");
    for r in &methods {
        st.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            r.source.0,
            opt(r.source.1),
            opt(r.target.map(|t| t.0)),
            opt(r.target.and_then(|t| t.1)),
        ));
    }

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for (name, text) in [("evolution_domain1.csv", evo), ("source_target.csv", st)] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(Report {
        methods,
        failed_cells,
        table,
    })
}
