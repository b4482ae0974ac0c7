use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use cure_simex::cli::{Cli, EXIT_ESTIMATION, EXIT_INVALID};
use cure_simex::em::{fit_mle, EmOptions};
use cure_simex::io::{ingest_csv, read_csv, read_mc_csv, write_csv, FitReport};
use cure_simex::mc::{generate, ScenarioSpec};
use cure_simex::model::ModelLayout;
use cure_simex::rng::StreamKey;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cure-simex"))
        .args(args)
        .env_remove("CURE_SIMEX_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_tiny(dir: &TempDir) -> PathBuf {
    let p = path(dir, "tiny.csv");
    std::fs::write(
        &p,
        "time,status,x\n1,1,0.5\n2,0,-0.3\n3,1,1.2\n4,0,0.1\n5,1,-1\n6,0,2\n",
    )
    .unwrap();
    p
}

#[test]
fn simulated_data_round_trip_through_csv() {
    let spec = ScenarioSpec::preset(2, 1).unwrap();
    let g = generate(&spec, StreamKey::new(6)).unwrap();
    let mut buf = Vec::new();
    write_csv(&g.observed, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, g.observed);

    let layout = spec.layout().unwrap();
    let opts = EmOptions::default();
    let a = fit_mle(&g.observed, &layout, &opts).unwrap();
    let b = fit_mle(&back, &layout, &opts).unwrap();
    for (x, y) in a.parameters().iter().zip(b.parameters()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn cli_fit_matches_the_library_on_simulated_data() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "d.csv");
    let out = path(&dir, "fit.json");
    ok(&[
        "simulate",
        "--model",
        "1",
        "--seed",
        "3",
        "--output",
        s(&data),
    ]);
    ok(&["fit", "--data", s(&data), "--output", s(&out)]);
    let report: FitReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();

    let spec = ScenarioSpec::model1(1, 1, 1).unwrap();
    let g = generate(&spec, StreamKey::new(3)).unwrap();
    let layout = ModelLayout::error_free(vec![0], vec![0], 1).unwrap();
    let lib = fit_mle(&g.observed, &layout, &EmOptions::default()).unwrap();
    assert_eq!(ingest_csv(&data).unwrap(), g.observed);
    for (x, y) in report
        .gamma
        .iter()
        .chain(&report.beta)
        .zip(lib.parameters())
    {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    assert_eq!(report.config["max_iter"], 500);
    assert_eq!(report.config["em"]["tol"], 1e-7);
}

fn validator(name: &str) -> jsonschema::Validator {
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("schemas")
            .join(name),
    )
    .unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, file: &Path) {
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
    let errors: Vec<String> = v.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn json_outputs_validate_against_the_schemas() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "d.csv");
    ok(&[
        "simulate",
        "--model",
        "2",
        "--seed",
        "1",
        "--output",
        s(&data),
    ]);
    let fit_schema = validator("fit.schema.json");
    for method in ["mle", "presmooth"] {
        let out = path(&dir, &format!("{method}.json"));
        ok(&[
            "fit",
            "--data",
            s(&data),
            "--method",
            method,
            "--output",
            s(&out),
        ]);
        assert_valid(&fit_schema, &out);
    }
    let out = path(&dir, "simex.json");
    ok(&[
        "simex",
        "--data",
        s(&data),
        "--error-sd",
        "x1=0.4",
        "--B",
        "3",
        "--output",
        s(&out),
    ]);
    assert_valid(&validator("simex.schema.json"), &out);

    let broken = serde_json::json!({ "gamma": [1.0], "beta": [] });
    assert!(!fit_schema.is_valid(&broken));
}

#[test]
fn mc_run_tables_satisfy_the_mse_identity() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "study.toml");
    std::fs::write(
        &cfg,
        "seed = 5\nreplicates = 4\n\n[arm.m1]\nmodel = 1\nmethods = [\"naive-mle\", \"simex-mle\"]\nB = 3\n",
    )
    .unwrap();
    let out_dir = path(&dir, "out");
    ok(&["mc-run", "--config", s(&cfg), "--out-dir", s(&out_dir)]);
    let rows = read_mc_csv(std::fs::File::open(out_dir.join("m1.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let (bias, var, mse) = (r.bias_x100 / 100.0, r.var_x100 / 100.0, r.mse_x100 / 100.0);
        assert!((mse - bias * bias - var).abs() < 1e-9, "{r:?}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("m1.json")).unwrap()).unwrap();
    assert_eq!(json["replicates"], 4);
    assert_eq!(json["options"]["simex"]["B"], 3);
}

#[test]
fn km_curve_starts_at_one_and_never_rises() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "d.csv");
    ok(&["simulate", "--model", "3", "--output", s(&data)]);
    let out = ok(&["km", "--data", s(&data)]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,S"));
    let pts: Vec<(f64, f64)> = lines
        .map(|l| {
            let (t, v) = l.split_once(',').unwrap();
            (t.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(pts[0], (0.0, 1.0));
    assert!(pts.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 <= w[0].1));
}

#[test]
fn invalid_input_exits_with_status_2() {
    let dir = TempDir::new().unwrap();
    let bad = path(&dir, "bad.csv");
    std::fs::write(&bad, "time,status,x\n1,1,0.5\n2,2,0.1\n").unwrap();
    let out = bin(&["fit", "--data", s(&bad)]);
    assert_eq!(out.status.code(), Some(i32::from(EXIT_INVALID)));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let missing = path(&dir, "missing.csv");
    assert_eq!(bin(&["km", "--data", s(&missing)]).status.code(), Some(2));
    assert_eq!(bin(&["fit", "--data"]).status.code(), Some(2));
    let tiny = write_tiny(&dir);
    assert_eq!(
        bin(&["--jobs", "0", "km", "--data", s(&tiny)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bin(&["fit", "--data", s(&tiny), "--tol", "-1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn estimation_failure_exits_with_status_3() {
    let dir = TempDir::new().unwrap();
    let tiny = write_tiny(&dir);
    let out = bin(&["bootstrap", "--data", s(&tiny), "--n-boot", "20"]);
    assert_eq!(out.status.code(), Some(i32::from(EXIT_ESTIMATION)));
    assert!(String::from_utf8_lossy(&out.stderr).contains("estimation failed"));
}

#[test]
fn help_shows_a_default_for_every_optional_argument() {
    let mut cmd = Cli::command();
    cmd.build();
    for sub in cmd.get_subcommands() {
        for arg in sub.get_arguments() {
            let takes_value = arg.get_num_args().is_some_and(|n| n.takes_values());
            if arg.is_required_set()
                || !takes_value
                || arg.get_id() == "help"
                || arg.get_id() == "version"
            {
                continue;
            }
            let documented = arg
                .get_help()
                .is_some_and(|h| h.to_string().contains("[default:"));
            assert!(
                !arg.get_default_values().is_empty() || documented,
                "{} --{} has no visible default",
                sub.get_name(),
                arg.get_id()
            );
        }
    }
    let help = String::from_utf8(ok(&["bootstrap", "--help"]).stdout).unwrap();
    assert!(help.contains("[default: 1000]"));
    assert!(help.contains("[default: 0,0.5,1,1.5,2]"));
}

#[test]
fn preset_study_files_parse() {
    use cure_simex::cli::parse_study;
    use cure_simex::mc::ErrorKind;
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut arms = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = parse_study(&std::fs::read_to_string(&path).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!((cfg.seed, cfg.replicates), (2024, 500));
        arms += cfg.arm.len();
    }
    assert_eq!(arms, 12 + 1 + 24 + 6 + 6 + 4);

    let text = std::fs::read_to_string(dir.join("variance_misspecification.toml")).unwrap();
    let over = &parse_study(&text).unwrap().arm["v0.4-over"];
    let spec = over.scenario_spec().unwrap();
    assert_eq!(spec.error_sd, vec![0.4, 0.0]);
    assert_eq!(spec.layout().unwrap().error_cov[(0, 0)], 0.5 * 0.5);

    let text = std::fs::read_to_string(dir.join("error_distribution.toml")).unwrap();
    let chi2 = parse_study(&text).unwrap().arm["chi2-v0.4"]
        .scenario_spec()
        .unwrap();
    assert_eq!(chi2.error_kind, ErrorKind::ChiSquared { df: 3.0 });
}

#[test]
fn study_file_in_the_guide_parses() {
    let chapter = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../book/src/simulation.md"),
    )
    .unwrap();
    let start = chapter.find("```toml\n").unwrap() + "```toml\n".len();
    let len = chapter[start..].find("```").unwrap();
    let cfg = cure_simex::cli::parse_study(&chapter[start..start + len]).unwrap();
    assert_eq!(cfg.arm.len(), 2);
    assert_eq!(cfg.arm["chi2"].b, Some(50));
}
