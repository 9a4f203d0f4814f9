use std::path::Path;
use std::process::{Command, Output};

use agentinfer_cli::keys::config_keys;

fn agentinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentinfer"))
        .args(args)
        .env_remove("AGENTINFER_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(ext))
        .collect();
    names.sort();
    names
}

#[test]
fn sched_compare_writes_three_reports_and_an_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let out = agentinfer(&["run", "sched_compare", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(
        files_with_ext(dir.path(), ".json"),
        ["report_agentsched.json", "report_fcfs.json", "report_sjf.json"]
    );
    assert_eq!(files_with_ext(dir.path(), ".csv").len(), 3);
    let stdout = text(&out.stdout);
    assert!(stdout.contains("agentsched > fcfs > sjf on hit rate: true"), "{stdout}");
    assert!(stdout.contains("agentsched e2e below fcfs: true"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("report_fcfs.csv")).unwrap();
    assert!(csv.starts_with("request_id,class,arrival,ttft,tpot,e2e,hit_blocks,need_blocks,ote,shr\n"));
}

#[test]
fn invalid_values_exit_with_code_two_and_name_the_field() {
    let out = agentinfer(&["run", "default", "--set", "pool.N=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("pool.N"), "{}", text(&out.stderr));

    let out = agentinfer(&["run", "default", "--set", "sched.k=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("sched.k"));
}

#[test]
fn unknown_keys_and_sources_exit_with_code_two() {
    let out = agentinfer(&["run", "default", "--set", "pool.blocks=10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("blocks"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[workload]\nsesions = 3\n").unwrap();
    let out = agentinfer(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("sesions"));

    assert_eq!(agentinfer(&["run", "no_such_preset"]).status.code(), Some(2));
}

#[test]
fn contract_violations_exit_with_code_three() {
    let out = agentinfer(&["run", "ote_sweep", "--set", "oracle.n_docs=2"]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("contract violation"));
}

#[test]
fn fixed_seed_runs_write_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = agentinfer(&["run", "collab", "--seed", "7", "--out-dir", dir.path().to_str().unwrap()]);
        assert!(out.status.success(), "{}", text(&out.stderr));
    }
    let names = files_with_ext(a.path(), ".csv");
    assert_eq!(names.len(), 3);
    for n in names {
        let x = std::fs::read(a.path().join(&n)).unwrap();
        let y = std::fs::read(b.path().join(&n)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{n}");
    }
}

#[test]
fn out_dir_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_agentinfer"))
        .args(["run", "default", "--set", "workload.sessions=1", "--set", "output.name=env"])
        .env("AGENTINFER_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(files_with_ext(dir.path(), ".csv"), ["env.csv"]);
}

#[test]
fn help_lists_every_config_key_with_its_default() {
    let out = agentinfer(&["--help"]);
    assert!(out.status.success());
    let help = text(&out.stdout);
    for (key, default) in config_keys() {
        let line = help
            .lines()
            .find(|l| l.split_whitespace().next() == Some(key.as_str()))
            .unwrap_or_else(|| panic!("{key} missing from help"));
        assert!(line.trim_end().ends_with(&default), "{line}");
    }
    assert!(help.contains("--set") && help.contains("--seed") && help.contains("--out-dir"));
}

#[test]
fn sam_subcommands_inspect_token_files() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("tokens.txt");
    std::fs::write(&tokens, "1 2 3 1 2 4\n").unwrap();
    let path = tokens.to_str().unwrap();

    let out = agentinfer(&["sam", "stats", path]);
    assert!(out.status.success());
    let stats = text(&out.stdout);
    assert!(stats.contains("corpus_tokens   6"), "{stats}");

    let out = agentinfer(&["sam", "draft", path, "--context", "1 2", "-k", "3", "--policy", "latest-only"]);
    assert!(out.status.success());
    assert!(text(&out.stdout).trim_end().ends_with("draft: 4"), "{}", text(&out.stdout));

    let dump = dir.path().join("sam.json");
    let out = agentinfer(&["sam", "build", path, "--out", dump.to_str().unwrap()]);
    assert!(out.status.success());
    let states: serde_json::Value = serde_json::from_slice(&std::fs::read(&dump).unwrap()).unwrap();
    assert!(states.as_array().is_some_and(|a| a.len() >= 7));
}

#[test]
fn verify_runs_selected_criteria() {
    let out = agentinfer(&["verify", "--only", "5", "--only", "7"]);
    assert!(out.status.success(), "{}", text(&out.stdout));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("[PASS]  5") && stdout.contains("[PASS]  7"), "{stdout}");
}
