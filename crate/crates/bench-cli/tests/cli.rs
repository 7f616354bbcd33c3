//! End-to-end checks of the `grcl` binary and the library commands behind it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use grcl_bench::run::{read_metrics, CellMetrics};
use grcl_bench::{cmd_report, cmd_run, ExperimentConfig};

const TINY: &str = "\
train_per_domain = 40
test_per_domain = 20
num_targets = 2
hidden_dims = 8
feature_dim = 4
head_hidden_dim = 4
key_dim = 4
source_epochs = 5
epochs = 1
contrast_batch = 16
memory_batch = 16
source_batch = 16
negatives = 32
memory_capacity = 10
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grcl"))
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("exp.conf");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn files_named(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() == name {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_one_file_per_domain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let status = bin().args(["gen-data", "--out"]).arg(&out).output().unwrap().status;
    assert!(status.success());
    let cfg = ExperimentConfig::default();
    for k in 0..=cfg.benchmark.num_targets {
        let text = fs::read_to_string(out.join(format!("domain_{k}.csv"))).unwrap();
        let rows = cfg.benchmark.train_per_domain + cfg.benchmark.test_per_domain;
        assert_eq!(text.lines().count(), rows + 1);
    }
    assert_eq!(fs::read_dir(&out).unwrap().count(), cfg.benchmark.num_targets + 1);

    let again = dir.path().join("again");
    assert!(bin().args(["gen-data", "--out"]).arg(&again).output().unwrap().status.success());
    for k in 0..=cfg.benchmark.num_targets {
        let name = format!("domain_{k}.csv");
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
    }
}

#[test]
fn gen_data_header_follows_input_dim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "input_dim = 3\n");
    let out = dir.path().join("data");
    let status = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let text = fs::read_to_string(out.join("domain_0.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "domain_id,split,label,x0,x1,x2");
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learnig_rate = 0.1\n");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("exp.conf:15"), "{err}");
    assert!(err.contains("learnig_rate"), "{err}");
}

#[test]
fn run_writes_cells_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "methods = seq-finetune,grcl\nseeds = 3,5,8\n");
    let out = dir.path().join("results");
    let status = bin()
        .args(["run", "--jobs", "2", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert_eq!(files_named(&out, "accuracy_matrix.csv").len(), 6);
    assert_eq!(files_named(&out, "metrics.json").len(), 6);
    assert_eq!(files_named(&out, "summary.csv").len(), 1);

    // summary std is the sample std of the three emitted acc values
    let accs: Vec<f64> = files_named(&out.join("grcl"), "metrics.json")
        .iter()
        .map(|p| read_metrics(p).unwrap().1.reported_acc)
        .collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let line = summary.lines().find(|l| l.starts_with("grcl,")).unwrap();
    let f: Vec<&str> = line.split(',').collect();
    assert_eq!(f[1], "3");
    assert!((f[3].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert!((f[4].parse::<f64>().unwrap() - std).abs() < 1e-12);

    // the written config parses back to the one that ran
    let used = ExperimentConfig::load(&out.join("config.conf")).unwrap();
    assert_eq!(used, ExperimentConfig::load(&cfg_path).unwrap());
}

#[test]
fn rerun_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write_config(dir.path(), "methods = grcl\nseeds = 1\n")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_run(&cfg, &a, 1, false).unwrap();
    cmd_run(&cfg, &b, 1, false).unwrap();
    let rel = Path::new("grcl/seed_1/metrics.json");
    assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap());
    let rel = Path::new("grcl/seed_1/accuracy_matrix.csv");
    assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap());
}

#[test]
fn failing_cell_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        dir.path(),
        "methods = source-only,seq-finetune\nseeds = 0\nseq-finetune.source_learning_rate = 1e300\n",
    );
    let out = dir.path().join("r");
    let res = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(out.join("seq-finetune/seed_0/error.txt").exists());
    assert!(out.join("source-only/seed_0/metrics.json").exists());
    assert!(out.join("summary.csv").exists());

    // report skips the failed cell rather than treating it as corrupt
    let report = cmd_report(&out, &out).unwrap();
    assert_eq!(report.methods.len(), 1);
    assert_eq!(report.failed_cells.len(), 1);
}

#[test]
fn trace_env_adds_step_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "methods = grcl\nseeds = 0\n");
    let out = dir.path().join("r");
    let status = bin()
        .env("GRCL_TRACE", "1")
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let trace = fs::read_to_string(out.join("grcl/seed_0/trace.jsonl")).unwrap();
    let steps = trace.lines().filter(|l| l.contains(r#""kind":"step""#)).count();
    let tasks = trace.lines().filter(|l| l.contains(r#""kind":"task""#)).count();
    assert!(steps > 0);
    assert_eq!(tasks, 2);
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first["method"], "grcl");
}

fn single_cell(dir: &Path) -> (PathBuf, CellMetrics) {
    let cfg = ExperimentConfig::load(&write_config(dir, "methods = grcl\nseeds = 2\n")).unwrap();
    let out = dir.join("r");
    cmd_run(&cfg, &out, 1, false).unwrap();
    let cell = read_metrics(&out.join("grcl/seed_2/metrics.json")).unwrap().1;
    (out, cell)
}

#[test]
fn report_of_one_cell_matches_its_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (out, cell) = single_cell(dir.path());
    let plots = dir.path().join("plots");
    let report = cmd_report(&out, &plots).unwrap();
    assert_eq!(report.methods.len(), 1);
    assert_eq!(report.table.lines().count(), 2);
    let m = &report.methods[0];
    assert_eq!(m.acc, (cell.reported_acc, None));
    assert_eq!(m.bwt, Some((cell.metrics.bwt.unwrap(), None)));
    assert_eq!(m.cells, vec![cell.clone()]);

    let evo = fs::read_to_string(plots.join("evolution_domain1.csv")).unwrap();
    let rows: Vec<&str> = evo.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for (i, row) in rows.iter().enumerate() {
        let v: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, cell.metrics.rows[i + 1][1]);
    }
    let st = fs::read_to_string(plots.join("source_target.csv")).unwrap();
    let f: Vec<&str> = st.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(f[0], "grcl");
    assert_eq!(f[1].parse::<f64>().unwrap(), cell.metrics.rows[2][0]);
    assert_eq!(f[3].parse::<f64>().unwrap(), cell.metrics.target_mean.unwrap());
}

#[test]
fn report_input_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let res = bin().args(["report", "--in"]).arg(&empty).output().unwrap();
    assert_eq!(res.status.code(), Some(3));

    let (out, _) = single_cell(dir.path());
    let metrics = out.join("grcl/seed_2/metrics.json");
    fs::write(&metrics, "{ not json").unwrap();
    let res = bin().args(["report", "--in"]).arg(&out).output().unwrap();
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("metrics.json"));

    fs::remove_file(&metrics).unwrap();
    let res = bin().args(["report", "--in"]).arg(&out).output().unwrap();
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn project_subcommand_prints_the_projection() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("g.csv");
    fs::write(&input, "1,-2\n0,1\n").unwrap();
    let out = bin().arg("project").arg(&input).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["projected"][0], 1.0);
    assert!(v["projected"][1].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(v["active"][0], true);
}

#[test]
fn shipped_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.conf");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
}

#[test]
fn bad_arguments_exit_with_1() {
    let out = bin().args(["run", "--jobs", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(bin().arg("--help").output().unwrap().status.success());
}
