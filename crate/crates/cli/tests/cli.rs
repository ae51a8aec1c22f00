use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use u5mr_core::io::{write_array, ArrayHeader};

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.cfg")
}

fn u5mr(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_u5mr"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("U5MR_SEED")
        .env_remove("U5MR_CONFIG")
        .env_remove("U5MR_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn pipeline_is_reproducible_and_smoothing_wins() {
    let cfg = demo_config();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let o = u5mr(&["pipeline", "--config", cfg, "--seed", "7"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (x, y) in fa.iter().zip(&fb) {
        assert!(x.1 == y.1, "{} differs between runs", x.0);
    }
    for sub in ["simulate", "direct", "fit", "predict", "aggregate", "evaluate"] {
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(a.path().join(format!("{sub}.manifest.json"))).unwrap()).unwrap();
        assert_eq!(m["seed"], 7);
        assert_eq!(m["config_digest"].as_str().unwrap().len(), 64);
        assert!(!m["outputs"].as_array().unwrap().is_empty());
    }

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("report.json")).unwrap()).unwrap();
    let periods = report["periods"].as_array().unwrap();
    let mse = |model: &str, period: &str| {
        periods
            .iter()
            .find(|p| p["model"] == model && p["period"] == period)
            .map(|p| p["mse"].as_f64().unwrap())
    };
    let mut compared = 0;
    for p in periods.iter().filter(|p| p["model"] == "smoothed") {
        let period = p["period"].as_str().unwrap();
        let w = mse("weighted", period).unwrap();
        assert!(mse("smoothed", period).unwrap() < w, "period {period}");
        compared += 1;
    }
    assert!(compared >= 3);
    let text = std::fs::read_to_string(a.path().join("report.txt")).unwrap();
    assert!(text.contains("smoothed") && text.contains("weighted"));
}

#[test]
fn fit_without_inputs_lists_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = u5mr(&["fit"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for f in ["clusters.csv", "births.csv", "density.asc", "bias.csv"] {
        assert!(err.contains(f), "{err}");
    }
}

#[test]
fn invalid_config_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\n# comment\nfit.samples = many\n").unwrap();
    let o = u5mr(&["simulate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.cfg:3:"), "{}", stderr(&o));

    std::fs::write(&cfg, "seed = 1\nsim.ncol = 4\n").unwrap();
    let o = u5mr(&["simulate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.cfg:2:"), "{}", stderr(&o));

    let o = u5mr(&["simulate", "--config", "/nonexistent/x.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, "seed = 3\nsim.ncols = 6\nsim.nrows = 6\nsim.county_block = 3\nsim.year_first = 1995\n").unwrap();
    let seed_of = |out: &Path| -> u64 {
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("simulate.manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    let cfg = cfg.to_str().unwrap();
    let o = u5mr(&["simulate", "--config", cfg], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(seed_of(dir.path()), 3);
    let run_env = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_u5mr"))
            .args(["simulate", "--config", cfg])
            .args(extra)
            .arg("--out-dir")
            .arg(dir.path())
            .env("U5MR_SEED", "4")
            .output()
            .unwrap()
    };
    assert!(run_env(&[]).status.success());
    assert_eq!(seed_of(dir.path()), 4);
    assert!(run_env(&["--seed", "5"]).status.success());
    assert_eq!(seed_of(dir.path()), 5);
}

#[test]
fn runtime_failures_exit_one_with_module_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, "sim.ncols = 6\nsim.nrows = 6\nsim.county_block = 3\nsim.year_first = 1995\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    assert!(u5mr(&["simulate", "--config", cfg], dir.path()).status.success());
    let header = ArrayHeader::new(&[("sample", 1), ("latent", 3)], serde_json::json!({}));
    write_array(&dir.path().join("samples.bin"), &header, &[0.0; 3]).unwrap();
    let o = u5mr(&["predict", "--config", cfg], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("error: model:"), "{}", stderr(&o));
}
