use std::path::Path;
use std::process::{Command, Output};

use pbsmix::inference::TABLE_HEADER;
use pbsmix::io::RunManifest;

const CONFIG: &str = r#"
[model]
components = 3

[sampler]
n_chains = 2
n_iter = 200
burnin = 100
thin = 5

[simulate]
n_countries = 6
n_regions = 2
n_years = 4
studies_per_country = 2

[clt]
reps = 100

[predict]
density_grid = true

[[predict.targets]]
country = "C02"
year = 2001
"#;

fn pbsmix(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbsmix"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn commands_chain_and_write_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), CONFIG).unwrap();

    let sim = pbsmix(
        &["simulate", "--config", "run.toml", "--seed", "1", "--out", "sim"],
        dir,
    );
    assert_eq!(code(&sim), 0, "{}", String::from_utf8_lossy(&sim.stderr));
    assert!(dir.join("sim/data/studies.csv").exists() && dir.join("sim/truth.json").exists());

    let common = ["--config", "run.toml", "--data", "sim/data", "--out", "fit"];
    let fit = pbsmix(&[&["fit", "--seed", "2"][..], &common].concat(), dir);
    // A 200-iteration run is not expected to converge.
    assert!(matches!(code(&fit), 0 | 4), "{}", String::from_utf8_lossy(&fit.stderr));
    let table_header = TABLE_HEADER.join(",");
    assert_eq!(header(&dir.join("fit/summary.csv")), table_header);

    let manifest = RunManifest::read(&RunManifest::path_in(&dir.join("fit"), "fit")).unwrap();
    assert_eq!((manifest.command.as_str(), manifest.seed), ("fit", 2));
    assert_eq!(manifest.chains.len(), 2);
    assert!(manifest.dataset_sha256.is_some());
    for name in ["draws.smx", "summary.csv", "diagnostics.txt"] {
        assert!(manifest.outputs.contains_key(name), "{name} missing from manifest");
    }

    for (cmd, file) in [
        ("summarize", "summary.csv"),
        ("predict", "predict.csv"),
        ("aggregate", "aggregate-region.csv"),
    ] {
        let out = pbsmix(&[&[cmd][..], &common].concat(), dir);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(header(&dir.join("fit").join(file)), table_header);
    }
    let predict = std::fs::read_to_string(dir.join("fit/predict.csv")).unwrap();
    assert_eq!(predict.lines().count(), 4);
    assert_eq!(
        std::fs::read_to_string(dir.join("fit/density_grid.csv"))
            .unwrap()
            .lines()
            .count(),
        402
    );

    let diag = pbsmix(&[&["diagnose"][..], &common].concat(), dir);
    assert!(matches!(code(&diag), 0 | 4));
    assert_eq!(code(&diag), code(&fit));
    assert!(String::from_utf8_lossy(&diag.stdout).contains("rhat_threshold: 1.1"));

    // Manifests are never replaced.
    let again = pbsmix(&[&["summarize"][..], &common].concat(), dir);
    assert_eq!(code(&again), 2);

    let clt = pbsmix(
        &["clt-check", "--config", "run.toml", "--seed", "3", "--out", "clt"],
        dir,
    );
    assert_eq!(code(&clt), 0, "{}", String::from_utf8_lossy(&clt.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("clt/clt.json")).unwrap()).unwrap();
    assert_eq!(report["reps"], 100);
}

#[test]
fn validation_failures_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "[model]\ncomponentz = 3\n").unwrap();
    assert_eq!(code(&pbsmix(&["fit", "--config", "bad.toml", "--out", "a"], dir)), 2);
    std::fs::write(dir.join("ok.toml"), "").unwrap();
    assert_eq!(
        code(&pbsmix(
            &["fit", "--config", "ok.toml", "--data", "missing", "--out", "b"],
            dir
        )),
        2
    );
    assert_eq!(
        code(&pbsmix(&["summarize", "--config", "ok.toml", "--out", "c"], dir)),
        2
    );
    assert_eq!(
        code(&pbsmix(
            &["cv", "--config", "ok.toml", "--test", "1", "--baseline", "--out", "d"],
            dir
        )),
        2
    );
}
