use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const REPORT_FILES: [&str; 8] = [
    "seats.csv",
    "table1.csv",
    "completion.csv",
    "frontier.csv",
    "belief_evidence.csv",
    "pair_round_vps.csv",
    "game_summary.csv",
    "game_target_summary.csv",
];

fn calsched(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calsched"))
        .args(args)
        .env("CALSCHED_OUT", out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = calsched(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map(|r| r.map(|e| e.unwrap().path()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn config_prints_loadable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["config"]);
    assert!(text.contains("blocked_errand_counts"));
    let path = dir.path().join("suite.toml");
    fs::write(&path, &text).unwrap();
    let out = dir.path().join("o");
    ok(
        &out,
        &["generate", "-c", path.to_str().unwrap(), "--max-tasks", "1"],
    );
}

#[test]
fn single_task_writes_one_file_and_repeats_identically() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["generate", "--max-tasks", "1"]);
    assert!(stdout.contains("wrote 1 scenarios"));
    let written = files(&dir.path().join("scenarios"));
    assert_eq!(written.len(), 1);
    let first = fs::read(&written[0]).unwrap();
    ok(dir.path(), &["generate", "--max-tasks", "1"]);
    assert_eq!(fs::read(&written[0]).unwrap(), first);
}

#[test]
fn empty_suite_runs_zero_games_and_reports_headers() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--max-tasks", "0"]);
    let stdout = ok(dir.path(), &["run", "--protocol", "imap"]);
    assert!(stdout.contains("imap: 0 traces"));
    assert!(files(&dir.path().join("traces/imap")).is_empty());
    ok(dir.path(), &["report"]);
    for name in REPORT_FILES {
        let text = fs::read_to_string(dir.path().join("reports").join(name)).unwrap();
        assert_eq!(
            text.lines().count(),
            1,
            "{name} should hold only its header"
        );
    }
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[grid]\ndensities = []\n").unwrap();
    let o = calsched(dir.path(), &["generate", "-c", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(
        &path,
        "lineup = [\"imap\", \"sd_map\", \"imap\", \"imap\", \"imap\"]\n",
    )
    .unwrap();
    let o = calsched(dir.path(), &["run", "-c", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let o = calsched(dir.path(), &["run", "--protocol", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        ok(dir.path(), &["generate", "--max-tasks", "3"]);
        ok(
            dir.path(),
            &["run", "--fixed-clock", "1970-01-01T00:00:00Z"],
        );
        ok(dir.path(), &["report"]);
        let mut blobs = Vec::new();
        for sub in [
            "scenarios",
            "traces/imap",
            "traces/sd_map",
            "traces/dsm_welfare",
            "traces/dsm_private",
            "reports",
        ] {
            let listed = files(&dir.path().join(sub));
            assert!(!listed.is_empty(), "{sub}");
            for f in listed {
                blobs.push((
                    f.strip_prefix(dir.path()).unwrap().to_path_buf(),
                    fs::read(&f).unwrap(),
                ));
            }
        }
        outputs.push(blobs);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn sweep_writes_one_point_per_theta() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--max-tasks", "2"]);
    ok(dir.path(), &["sweep", "--theta", "0,1,10", "--l-max", "12"]);
    let text = fs::read_to_string(dir.path().join("sweep/frontier.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}
