use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const RUNNING: &str = "participant_id,y_true,y_pred\n0,0,0\n0,0,0\n0,0,0\n0,0,1\n1,1,1\n1,1,1\n";
const RUNNING_REGRESSION: &str = "participant_id,y_true,y_pred\n0,1,1\n0,2,2\n1,3,4\n1,4,3\n";

fn flam() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flam"));
    for var in ["FLAM_COORDINATOR_ADDR", "FLAM_PHASE_TIMEOUT_MS", "FLAM_REGISTRATION_TIMEOUT_MS", "RUST_LOG"] {
        cmd.env_remove(var);
    }
    cmd
}

fn run(args: &[&str]) -> Output {
    flam().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A port that was free a moment ago.
fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

/// Column `name` of every data row.
fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let at = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(at).unwrap().to_string()).collect()
}

#[test]
fn partition_writes_a_plan_covering_the_pool() {
    let dir = tempfile::tempdir().unwrap();
    let mut labels = String::from("label\n");
    for i in 0..200 {
        labels.push_str(&format!("{}\n", i % 5));
    }
    let labels = fixture(dir.path(), "labels.csv", &labels);
    let out = dir.path().join("plan.csv");
    let o = run(&[
        "partition", "--labels", s(&labels), "--kind", "ls", "--alpha-label", "0.6", "--participants", "4",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = fs::read_to_string(&out).unwrap();
    let mut indices: Vec<usize> = column(&plan, "pool_index").iter().map(|v| v.parse().unwrap()).collect();
    indices.sort_unstable();
    assert_eq!(indices, (0..200).collect::<Vec<_>>());
    assert!(column(&plan, "participant_id").iter().all(|p| p.parse::<u32>().unwrap() < 4));
}

#[test]
fn missing_alpha_is_a_usage_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let labels = fixture(dir.path(), "labels.csv", "label\n0\n1\n");
    let o = run(&["partition", "--labels", s(&labels), "--kind", "ls"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--alpha-label"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn evaluate_reports_the_running_example() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), "run.csv", RUNNING);
    let o = run(&["evaluate", "--input", s(&input), "--metrics", "f1-macro"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let dev: f64 = column(&out, "abs_dev_weighted")[0].parse().unwrap();
    assert!((dev - 0.376).abs() < 5e-4, "{out}");
    assert_eq!(column(&out, "abs_dev_flam")[0], "0.0");
}

#[test]
fn evaluate_reports_the_regression_example() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), "reg.csv", RUNNING_REGRESSION);
    let o = run(&["evaluate", "--input", s(&input), "--task", "regression"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let get = |c: &str| column(&out, c)[0].parse::<f64>().unwrap();
    assert!((get("centralized") - 0.6).abs() < 1e-12);
    assert!((get("weighted_average") + 1.0).abs() < 1e-12);
    assert!((get("flam") - 0.6).abs() < 1e-12);
}

#[test]
fn missing_input_exits_one_and_names_the_path() {
    let o = run(&["evaluate", "--input", "/definitely/not/here.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/definitely/not/here.csv"));
}

#[test]
fn malformed_input_exits_one_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), "bad.csv", "participant_id,y_true,y_pred\n0,1,1\n0,x,1\n");
    let o = run(&["evaluate", "--input", s(&input)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.csv"), "{}", stderr(&o));
}

#[test]
fn zero_division_outside_unit_interval_is_rejected() {
    let o = run(&["evaluate", "--synthetic", "--zero-division", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn json_mirror_matches_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), "run.csv", RUNNING);
    let (csv, json) = (dir.path().join("r.csv"), dir.path().join("r.json"));
    let o = run(&["evaluate", "--input", s(&input), "--out", s(&csv), "--json", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.len(), text.lines().count() - 1);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.csv.meta.json")).unwrap()).unwrap();
    assert!(meta["finished_unix_ms"].as_u64().is_some());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let outputs: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("sweep{i}.csv"));
            let o = run(&[
                "sweep", "--alphas", "0.6,7", "--seeds", "0..3", "--kind", "ls", "--metrics", "f1-macro",
                "--samples", "400", "--out", s(&out),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            fs::read(&out).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn sweep_covers_the_grid_and_matches_sequential() {
    let args = [
        "sweep", "--alphas", "0.6,7", "--seeds", "0..5", "--kind", "ls", "--metrics", "f1-macro,accuracy",
        "--samples", "400",
    ];
    let parallel = run(&args);
    assert!(parallel.status.success(), "{}", stderr(&parallel));
    let out = stdout(&parallel);
    assert_eq!(out.lines().count(), 1 + 2 * 5 * 2);
    let mut sequential = args.to_vec();
    sequential.push("--sequential");
    assert_eq!(stdout(&run(&sequential)), out);
}

#[test]
fn sweep_without_seeds_is_a_usage_error() {
    let o = run(&["sweep", "--alphas", "0.6", "--seeds", "4..4", "--kind", "ls"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_cell_sweep_equals_evaluate() {
    let common = ["--kind", "ls", "--alpha-label", "0.6", "--seed", "7", "--metrics", "f1-macro", "--samples", "500"];
    let mut sweep = vec!["sweep", "--alphas", "0.6", "--seeds", "7"];
    sweep.extend(&common[..2]);
    sweep.extend(&common[6..]);
    let sweep = stdout(&run(&sweep));
    let mut evaluate = vec!["evaluate", "--synthetic"];
    evaluate.extend(common);
    let evaluate = stdout(&run(&evaluate));
    assert_eq!(column(&sweep, "centralized"), column(&evaluate, "centralized"));
    assert_eq!(column(&sweep, "weighted"), column(&evaluate, "weighted_average"));
    assert_eq!(column(&sweep, "flam"), column(&evaluate, "flam"));
}

#[test]
fn generated_file_evaluates_like_the_synthetic_flag() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("preds.csv");
    let model = ["--kind", "qs", "--alpha-quantity", "0.8", "--seed", "3", "--samples", "300"];
    let mut generate = vec!["generate", "--out", s(&file)];
    generate.extend(model);
    assert!(run(&generate).status.success());
    let from_file = stdout(&run(&["evaluate", "--input", s(&file), "--class-count", "10"]));
    let mut synthetic = vec!["evaluate", "--synthetic"];
    synthetic.extend(model);
    assert_eq!(from_file, stdout(&run(&synthetic)));
}

#[test]
fn config_file_supplies_flags_and_loses_to_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(
        dir.path(),
        "flam.toml",
        "[evaluate]\nsynthetic = true\nkind = \"ls\"\nalpha_label = 0.6\nmetrics = [\"accuracy\"]\nsamples = 300\n",
    );
    let o = run(&["--config", s(&config), "evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(column(&stdout(&o), "samples"), ["300"]);
    let o = run(&["--config", s(&config), "evaluate", "--samples", "200"]);
    assert_eq!(column(&stdout(&o), "samples"), ["200"]);
}

#[test]
fn served_round_matches_flam_mode() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), "run.csv", RUNNING);
    let metrics = "f1-macro,accuracy,mcc,precision-weighted";
    let addr = free_addr();
    let coordinator = flam()
        .args(["serve", "coordinator", "--addr", &addr, "--participants", "2", "--class-count", "2"])
        .args(["--metrics", metrics, "--registration-timeout-ms", "20000"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let participants: Vec<_> = ["0", "1"]
        .iter()
        .map(|id| {
            flam()
                .args(["serve", "participant", "--addr", &addr, "--id", id, "--input", s(&input)])
                .args(["--class-count", "2"])
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let served = coordinator.wait_with_output().unwrap();
    assert!(served.status.success(), "{}", stderr(&served));
    for p in participants {
        let p = p.wait_with_output().unwrap();
        assert!(p.status.success(), "{}", stderr(&p));
        assert_eq!(stdout(&p), stdout(&served));
    }
    let direct = run(&["evaluate", "--input", s(&input), "--mode", "flam", "--metrics", metrics]);
    assert_eq!(stdout(&direct), stdout(&served));
}

#[test]
fn version_mismatch_aborts_the_round() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), "run.csv", RUNNING);
    let addr = free_addr();
    let coordinator = flam()
        .args(["serve", "coordinator", "--addr", &addr, "--participants", "1", "--class-count", "2"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let p = flam()
        .args(["serve", "participant", "--addr", &addr, "--id", "0", "--input", s(&input)])
        .args(["--schema-version", "99"])
        .output()
        .unwrap();
    let c = coordinator.wait_with_output().unwrap();
    assert_eq!(c.status.code(), Some(1));
    assert!(stderr(&c).contains("version"), "{}", stderr(&c));
    assert_ne!(p.status.code(), Some(0));
}

#[test]
fn coordinator_without_participants_times_out() {
    let addr = free_addr();
    let o = run(&["serve", "coordinator", "--addr", &addr, "--participants", "1", "--registration-timeout-ms", "200"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("timed out"), "{}", stderr(&o));
}

#[test]
fn environment_sets_the_timeout_below_the_flag() {
    let addr = free_addr();
    let o = flam()
        .args(["serve", "coordinator", "--addr", &addr, "--participants", "1"])
        .env("FLAM_REGISTRATION_TIMEOUT_MS", "200")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
