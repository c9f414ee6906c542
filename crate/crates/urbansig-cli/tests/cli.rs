//! CLI behavior: exit codes, stage chaining, provenance headers, and
//! composability of `run` against manually chained stages.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_urbansig"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const TWO_CITY_CONFIG: &str = r#"
out_dir = "out"

[synth.AA]
seed = 11
grid = 12
n_users = 120
events_per_user = 25.0

[synth.BB]
seed = 12
grid = 12
n_users = 120
events_per_user = 25.0

[city.AA]
events = "out/AA_events.csv"
parcels = "out/AA_parcels.geojson"
legend = "out/AA_legend.csv"
signature_classes = [1, 4, 6, 8, 9]

[city.BB]
events = "out/BB_events.csv"
parcels = "out/BB_parcels.geojson"
legend = "out/BB_legend.csv"
signature_classes = [1, 4, 6, 8, 9]
"#;

/// File contents with the provenance header stripped.
fn stripped(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    match bytes.iter().position(|&b| b == b'\n') {
        Some(nl) if bytes.starts_with(b"#") => bytes[nl + 1..].to_vec(),
        _ => bytes,
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .args(["--config", "nope.toml", "run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn unknown_city_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TWO_CITY_CONFIG);
    let out = bin()
        .args(["--config", config.to_str().unwrap(), "filter", "--city", "ZZ"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("filter"));
}

#[test]
fn stage_out_of_order_is_a_data_error_naming_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TWO_CITY_CONFIG);
    // join before filter
    let out = bin()
        .args(["--config", config.to_str().unwrap(), "join"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("filter"));

    // cluster before join
    let out = bin()
        .args(["--config", config.to_str().unwrap(), "cluster"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("join"));
}

#[test]
fn filter_on_missing_events_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TWO_CITY_CONFIG);
    let out = bin()
        .args(["--config", config.to_str().unwrap(), "filter"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn outputs_carry_a_provenance_header() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TWO_CITY_CONFIG);
    let status = bin()
        .args(["--config", config.to_str().unwrap(), "synth"])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(dir.path().join("out/AA_events.csv")).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# urbansig "), "header was `{first}`");
    assert!(first.contains("config="));
}

#[test]
fn synth_seed_override_changes_output_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TWO_CITY_CONFIG);
    let run = |seed: &str, out: &str| {
        let body = TWO_CITY_CONFIG.replace("out_dir = \"out\"", &format!("out_dir = \"{out}\""));
        let path = dir.path().join(format!("{out}.toml"));
        std::fs::write(&path, body).unwrap();
        let status = bin()
            .current_dir(dir.path())
            .args(["--config", path.to_str().unwrap(), "--seed", seed, "synth"])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let _ = config;
    run("500", "s1");
    run("500", "s2");
    run("501", "s3");
    let a = stripped(&dir.path().join("s1/AA_events.csv"));
    let b = stripped(&dir.path().join("s2/AA_events.csv"));
    let c = stripped(&dir.path().join("s3/AA_events.csv"));
    assert_eq!(a, b, "same seed must reproduce the corpus");
    assert_ne!(a, c, "different seed must change the corpus");
    // base + index: the two cities of one run differ
    let aa = stripped(&dir.path().join("s1/AA_events.csv"));
    let bb = stripped(&dir.path().join("s1/BB_events.csv"));
    assert_ne!(aa, bb);
}

#[test]
fn run_matches_manually_chained_stages_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();

    let manual_body = TWO_CITY_CONFIG
        .replace("out_dir = \"out\"", "out_dir = \"manual\"")
        .replace("out/", "manual/");
    let manual_cfg = write_config(dir.path(), &manual_body);
    let manual_cfg = manual_cfg.to_str().unwrap().to_string();
    // synth writes into manual/, cities read from manual/
    for stage in ["synth", "filter", "join", "cluster", "bias", "signatures", "rankplot", "similarity"] {
        let status = bin().args(["--config", &manual_cfg, stage]).status().unwrap();
        assert!(status.success(), "stage `{stage}` failed");
    }

    // the chained run reads the same synthetic corpus
    let run_body = TWO_CITY_CONFIG
        .replace("out_dir = \"out\"", "out_dir = \"chained\"")
        .replace("out/AA_", "manual/AA_")
        .replace("out/BB_", "manual/BB_");
    let run_cfg = dir.path().join("run.toml");
    std::fs::write(&run_cfg, run_body).unwrap();
    let status = bin()
        .current_dir(dir.path())
        .args(["--config", run_cfg.to_str().unwrap(), "run"])
        .status()
        .unwrap();
    assert!(status.success());

    for name in [
        "AA_filtered.csv",
        "AA_rejections.json",
        "AA_joined.csv",
        "AA_keylocations.csv",
        "AA_bias.json",
        "AA_weights.csv",
        "AA_signatures.csv",
        "AA_rankplot.csv",
        "BB_keylocations.csv",
        "BB_bias.json",
        "distance_matrix.csv",
        "dendrogram.nwk",
        "dendrogram.json",
    ] {
        let manual = stripped(&dir.path().join("manual").join(name));
        let chained = stripped(&dir.path().join("chained").join(name));
        assert_eq!(manual, chained, "`{name}` differs between run and manual chaining");
    }
}

#[test]
fn rerun_with_unchanged_inputs_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TWO_CITY_CONFIG);
    let config = config.to_str().unwrap();
    assert!(bin().args(["--config", config, "synth"]).status().unwrap().success());
    assert!(bin().args(["--config", config, "run"]).status().unwrap().success());
    let first = std::fs::read(dir.path().join("out/AA_bias.json")).unwrap();
    assert!(bin().args(["--config", config, "run"]).status().unwrap().success());
    let second = std::fs::read(dir.path().join("out/AA_bias.json")).unwrap();
    assert_eq!(first, second);
}
