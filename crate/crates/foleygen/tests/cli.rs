//! Exercises the installed binary end to end: exit codes, stderr wording,
//! stage gating, and idempotent re-runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_foleygen");

fn foleygen(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("FOLEYGEN_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal exit")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Micro run configuration: 1-second episodes, 6+2 of them, a 1-layer model
/// and an 8-step training run, so the whole pipeline finishes in seconds.
fn micro_config(dir: &Path) -> PathBuf {
    let out_dir = dir.join("run");
    let text = format!(
        "out_dir = {}\n\
         data.duration_s = 1\n\
         data.sample_rate = 8000\n\
         data.n_train = 6\n\
         data.n_test = 2\n\
         featurizer.hop = 400\n\
         codec.n_q = 2\n\
         codec.codebook_size = 16\n\
         visual.d_v = 6\n\
         lm.n_layers = 1\n\
         lm.n_heads = 2\n\
         lm.d_model = 32\n\
         lm.d_ff = 64\n\
         train.total_steps = 8\n\
         train.warmup_steps = 4\n\
         train.batch_size = 4\n\
         train.log_every = 4\n\
         gen.n_episodes = 2\n\
         gen.top_k = 8\n\
         data.seed = 11\n\
         codec.seed = 12\n\
         visual.seed = 13\n\
         train.seed = 14\n\
         gen.seed = 15\n",
        out_dir.display()
    );
    let path = dir.join("micro.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&foleygen(&[])), 1);
    assert_eq!(code(&foleygen(&["no-such-command"])), 1);
    assert_eq!(code(&foleygen(&["synth-data", "--bogus"])), 1);
    let out = foleygen(&["--threads", "0", "synth-data"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--threads"));
}

#[test]
fn help_and_version_exit_zero() {
    let help = foleygen(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("Usage"));
    let version = foleygen(&["--version"]);
    assert_eq!(code(&version), 0);
    assert!(stdout(&version).contains("foleygen"));
}

#[test]
fn config_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();

    let out = foleygen(&["synth-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--config"));

    let out = foleygen(&["synth-data", "--config", "/no/such/file.cfg"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not found"));

    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_owned()
    };
    let seeds = "data.seed = 1\ncodec.seed = 2\nvisual.seed = 3\ntrain.seed = 4\ngen.seed = 5\n";

    let unknown = write("unknown.cfg", &format!("{seeds}no.such.key = 1\n"));
    let out = foleygen(&["synth-data", "--config", &unknown]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no.such.key"));

    let malformed = write("malformed.cfg", &format!("{seeds}this line has no equals\n"));
    assert_eq!(code(&foleygen(&["synth-data", "--config", &malformed])), 2);

    let bad_value = write("badvalue.cfg", &format!("{seeds}train.lr = fast\n"));
    assert_eq!(code(&foleygen(&["synth-data", "--config", &bad_value])), 2);

    let seedless = write("seedless.cfg", "data.seed = 1\n");
    let out = foleygen(&["synth-data", "--config", &seedless]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("seed"));

    let fine = write("fine.cfg", seeds);
    let out = foleygen(&["synth-data", "--config", &fine, "--set", "nope=1"]);
    assert_eq!(code(&out), 2);
    let out = foleygen(&["synth-data", "--config", &fine, "--set", "no-equals-here"]);
    assert_eq!(code(&out), 2);

    let out = Command::new(BIN)
        .args(["synth-data", "--config", &fine])
        .env("FOLEYGEN_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("FOLEYGEN_SEED"));
}

#[test]
fn stages_demand_their_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let out = foleygen(&["train-codec", "--config", cfg]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("synth-data"), "stderr: {}", stderr(&out));

    let out = foleygen(&["generate", "--config", cfg]);
    assert_eq!(code(&out), 2);

    let out = foleygen(&["eval", "--config", cfg]);
    assert_eq!(code(&out), 2);

    assert_eq!(code(&foleygen(&["synth-data", "--config", cfg])), 0);
    assert_eq!(code(&foleygen(&["train-codec", "--config", cfg])), 0);
    let out = foleygen(&["generate", "--config", cfg]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("checkpoint"), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("train-lm"), "stderr: {}", stderr(&out));
}

#[test]
fn micro_pipeline_runs_and_reruns_skip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = micro_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let run = dir.path().join("run");

    let out = foleygen(&["synth-data", "--config", cfg]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("wrote"));
    assert_eq!(code(&foleygen(&["train-codec", "--config", cfg])), 0);
    assert_eq!(code(&foleygen(&["train-lm", "--config", cfg])), 0);
    assert_eq!(code(&foleygen(&["generate", "--config", cfg])), 0);
    let out = foleygen(&["eval", "--config", cfg]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("class_accuracy"));

    assert!(run.join("data").join("manifest.tsv").exists());
    assert!(run.join("codec.rvqm").exists());
    assert!(run.join("lm_all_frame.fglm").exists());
    assert!(run.join("eval_all_frame.kv").exists());
    let gen_names: Vec<String> = std::fs::read_dir(run.join("gen_all_frame"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for ext in ["wav", "rvqt", "gen.events"] {
        let n = gen_names.iter().filter(|n| n.ends_with(ext)).count();
        assert_eq!(n, 2, "expected 2 .{ext} files, got {n}: {gen_names:?}");
    }

    // identical args -> every stage reports up to date
    for stage in ["synth-data", "train-codec", "train-lm", "generate", "eval"] {
        let out = foleygen(&[stage, "--config", cfg]);
        assert_eq!(code(&out), 0);
        assert!(
            stdout(&out).contains("up to date"),
            "{stage} did not skip: {}",
            stdout(&out)
        );
    }

    // changing a generation knob invalidates generate and eval but not training
    let out = foleygen(&["generate", "--config", cfg, "--set", "gen.seed=99"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("episodes"), "stdout: {}", stdout(&out));
    let out = foleygen(&["train-lm", "--config", cfg, "--set", "gen.seed=99"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("up to date"));

    // a different mechanism trains its own checkpoint
    let out = foleygen(&["train-lm", "--config", cfg, "--mechanism", "frame_specific"]);
    assert_eq!(code(&out), 0);
    assert!(run.join("lm_frame_specific.fglm").exists());
    assert_eq!(code(&foleygen(&["train-lm", "--config", cfg, "--mechanism", "bogus"])), 1);
}

#[test]
fn dump_mask_writes_grid_without_generating() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = micro_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let grid_path = dir.path().join("mask.txt");

    // no dataset, codec, or checkpoint exists; the mask dump needs none of them
    let out = foleygen(&[
        "generate",
        "--config",
        cfg,
        "--dump-mask",
        grid_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let grid = std::fs::read_to_string(&grid_path).unwrap();
    // 1 s at 8000/400 -> 20 frames -> 21 steps; plus 5 visual frames = 26 rows
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines.len(), 26);
    assert!(lines.iter().all(|l| l.len() == 26));
    assert!(lines.iter().all(|l| l.bytes().all(|b| b == b'0' || b == b'1')));
    assert!(!dir.path().join("run").join("gen_all_frame").exists());
}
