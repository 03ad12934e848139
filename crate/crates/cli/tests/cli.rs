use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qdpp::config::TrainConfig;
use qdpp::kernel::{write_checkpoint, GroundSet, QDppKernel};
use qdpp::learner::{read_greedy_csv, read_metrics_csv, METRICS_HEADER};
use qdpp::rng::{stream, Stream};

fn qdpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdpp"))
        .args(args)
        .env_remove("QDPP_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Run directories printed by `train`, one per line.
fn run_dirs(o: &Output) -> Vec<PathBuf> {
    stdout(o).lines().map(PathBuf::from).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn save(kernel: &QDppKernel, path: &Path) {
    write_checkpoint(kernel, fs::File::create(path).unwrap()).unwrap();
}

#[test]
fn version_prints_build_id() {
    let o = qdpp(&["version"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn zero_steps_writes_manifest_and_empty_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qdpp(&["train", "--env", "matrix", "--steps", "0", "--seed", "4", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dirs = run_dirs(&o);
    assert_eq!(dirs.len(), 1);
    let dir = &dirs[0];
    let name = dir.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("matrix_qdpp_4_"), "{name}");
    assert_eq!(fs::read_to_string(dir.join("metrics.csv")).unwrap(), format!("{METRICS_HEADER}\n"));
    assert!(dir.join("checkpoint.bin").exists());

    let m = manifest(dir);
    assert_eq!(m["algorithm"], "qdpp");
    assert_eq!(m["env"], "matrix");
    assert_eq!(m["seed"], 4);
    assert!(m["finished_at"].is_string());
    let config: TrainConfig = serde_json::from_value(m["config"].clone()).unwrap();
    let mut want = TrainConfig::for_env(qdpp::envs::EnvKind::Matrix);
    want.max_steps = 0;
    want.seed = 4;
    assert_eq!(config, want);
}

#[test]
fn config_precedence_is_flag_then_file_then_default() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# overrides\ndelta = 0.3\nepsilon_end = 0.2\nseed = 9\n").unwrap();
    let o = qdpp(&[
        "train",
        "--env",
        "spread",
        "--algo",
        "vdn",
        "--steps",
        "0",
        "--config",
        cfg.to_str().unwrap(),
        "--delta",
        "0.7",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&run_dirs(&o)[0]);
    let c: TrainConfig = serde_json::from_value(m["config"].clone()).unwrap();
    assert_eq!(c.delta, 0.7);
    assert_eq!(c.epsilon_end, 0.2);
    assert_eq!(c.seed, 9);
    assert_eq!(c.epsilon_decay_steps, 10_000);
    assert_eq!(c.learning_rate, 5e-4);
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "learning_rat = 0.1\n").unwrap();
    let o = qdpp(&["train", "--env", "matrix", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(qdpp(&["train", "--env", "chess"]).status.code(), Some(2));
    assert_eq!(qdpp(&["train", "--env", "matrix", "--algo", "qmix"]).status.code(), Some(2));
    assert_eq!(qdpp(&["train", "--env", "matrix", "--delta", "0"]).status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("occupied");
    fs::write(&file, "x").unwrap();
    let o = qdpp(&["train", "--env", "matrix", "--steps", "0", "--out", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_qdpp"))
        .args(["train", "--env", "blocker", "--algo", "iql", "--steps", "0"])
        .env("QDPP_OUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let dir = run_dirs(&o).remove(0);
    assert_eq!(dir.parent().unwrap(), tmp.path());
}

#[test]
fn seeds_flag_runs_each_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qdpp(&["train", "--env", "matrix", "--algo", "iql", "--seeds", "1,2,3", "--steps", "50", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    let seeds: Vec<u64> = run_dirs(&o).iter().map(|d| manifest(d)["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![1, 2, 3]);
}

#[test]
fn identical_seeded_runs_give_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = || {
        let o = qdpp(&["train", "--env", "matrix", "--seed", "5", "--steps", "2500", "--out", tmp.path().to_str().unwrap()]);
        assert!(o.status.success());
        run_dirs(&o).remove(0)
    };
    let (a, b) = (run(), run());
    assert_ne!(a, b);
    for f in ["metrics.csv", "greedy.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = read_metrics_csv(&fs::read_to_string(a.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.last().unwrap().step, 2500);
    assert_eq!(read_greedy_csv(&fs::read_to_string(a.join("greedy.csv")).unwrap()).unwrap().len(), 3);
}

/// Plays `(0, 0)` for nine steps and `(1, 1)` on the last decision.
fn optimal_matrix_kernel() -> QDppKernel {
    let gs = GroundSet::new(2, 44, 2).unwrap();
    let mut d = vec![0.0; gs.size()];
    let mut b = vec![0.0; gs.size() * 2];
    for agent in 0..2 {
        for obs in 0..44 {
            for a in 0..2 {
                let j = gs.index(agent, obs, a);
                d[j] = if (obs / 4 == 9) == (a == 1) { 1.0 } else { 0.0 };
                b[j * 2 + agent] = 1.0;
            }
        }
    }
    QDppKernel::from_parts(gs, 2, d, b).unwrap()
}

#[test]
fn eval_of_optimal_matrix_kernel_scores_13() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("opt.bin");
    save(&optimal_matrix_kernel(), &ckpt);
    let csv = tmp.path().join("eval.csv");
    let o = qdpp(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--env", "matrix", "--episodes", "5", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("13 ± 0"), "{}", stdout(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",13")));
}

#[test]
fn eval_reads_env_from_manifest_and_respects_reward_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qdpp(&["train", "--env", "blocker", "--steps", "0", "--out", tmp.path().to_str().unwrap()]);
    let dir = run_dirs(&o).remove(0);
    let o = qdpp(&["eval", "--checkpoint", dir.join("checkpoint.bin").to_str().unwrap(), "--episodes", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mean: f64 = stdout(&o).split_whitespace().next().unwrap().parse().unwrap();
    assert!((-40.0..=0.0).contains(&mean), "{mean}");
    assert!(dir.join("eval.csv").exists());
}

#[test]
fn eval_argument_and_checkpoint_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("opt.bin");
    save(&optimal_matrix_kernel(), &ckpt);
    let p = ckpt.to_str().unwrap();
    assert_eq!(qdpp(&["eval", "--checkpoint", p, "--env", "matrix", "--episodes", "0"]).status.code(), Some(2));
    assert_eq!(qdpp(&["eval", "--checkpoint", p, "--env", "blocker"]).status.code(), Some(2));

    let bytes = fs::read(&ckpt).unwrap();
    let truncated = tmp.path().join("truncated.bin");
    fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let o = qdpp(&["eval", "--checkpoint", truncated.to_str().unwrap(), "--env", "matrix"]);
    assert_eq!(o.status.code(), Some(4));
    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    assert_eq!(qdpp(&["eval", "--checkpoint", junk.to_str().unwrap(), "--env", "matrix"]).status.code(), Some(4));
    assert_eq!(qdpp(&["eval", "--checkpoint", "/nonexistent/x.bin", "--env", "matrix"]).status.code(), Some(3));
}

#[test]
fn eval_accepts_tabular_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qdpp(&["train", "--env", "matrix", "--algo", "vdn", "--steps", "200", "--out", tmp.path().to_str().unwrap()]);
    let dir = run_dirs(&o).remove(0);
    let o = qdpp(&["eval", "--checkpoint", dir.join("checkpoint.bin").to_str().unwrap(), "--episodes", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn debug_csv(dir: &Path, name: &str) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join(name))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn sample_debug_on_random_two_agent_kernel() {
    let tmp = tempfile::tempdir().unwrap();
    let gs = GroundSet::new(2, 1, 3).unwrap();
    let k = QDppKernel::random(gs, 2, &mut stream(6, Stream::Init)).unwrap();
    let ckpt = tmp.path().join("k.bin");
    save(&k, &ckpt);
    let out = tmp.path().join("dbg");
    let o = qdpp(&["sample-debug", "--checkpoint", ckpt.to_str().unwrap(), "--obs", "0,0", "--draws", "20000", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dist = debug_csv(&out, "distribution.csv");
    assert_eq!(dist.len(), 9);
    let total: f64 = dist.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    let bound = debug_csv(&out, "bound.csv");
    assert_eq!(bound.len(), 9);
    assert!(bound.iter().all(|r| r[5] == "pass"), "{bound:?}");
}

#[test]
fn sample_debug_marks_unbalanced_instance_skipped() {
    // Orthogonal directions with spare feature dimensions: each agent's block
    // has rank below the full kernel's, so the measured balance is zero.
    let tmp = tempfile::tempdir().unwrap();
    let gs = GroundSet::new(2, 1, 2).unwrap();
    let mut b = vec![0.0; 16];
    for j in 0..4 {
        b[j * 4 + j] = 1.0;
    }
    let k = QDppKernel::from_parts(gs, 4, vec![0.0, 0.5, -0.5, 0.2], b).unwrap();
    let ckpt = tmp.path().join("k.bin");
    save(&k, &ckpt);
    let o = qdpp(&["sample-debug", "--checkpoint", ckpt.to_str().unwrap(), "--obs", "0,0", "--draws", "1000", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("skipped"));
    let bound = debug_csv(tmp.path(), "bound.csv");
    assert_eq!(bound.len(), 4);
    assert!(bound.iter().all(|r| r[4].is_empty() && r[5] == "skipped"));
}

#[test]
fn sample_debug_guard_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let gs = GroundSet::new(16, 1, 3).unwrap();
    let k = QDppKernel::random(gs, 16, &mut stream(1, Stream::Init)).unwrap();
    let ckpt = tmp.path().join("big.bin");
    save(&k, &ckpt);
    let obs = vec!["0"; 16].join(",");
    let o = qdpp(&["sample-debug", "--checkpoint", ckpt.to_str().unwrap(), "--obs", &obs, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn sample_debug_rejects_bad_observation() {
    let tmp = tempfile::tempdir().unwrap();
    let gs = GroundSet::new(2, 1, 3).unwrap();
    let k = QDppKernel::random(gs, 2, &mut stream(6, Stream::Init)).unwrap();
    let ckpt = tmp.path().join("k.bin");
    save(&k, &ckpt);
    let o = qdpp(&["sample-debug", "--checkpoint", ckpt.to_str().unwrap(), "--obs", "0,5", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
