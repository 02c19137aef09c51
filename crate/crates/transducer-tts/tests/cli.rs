//! Black-box tests of the `ttst` binary: pipeline wiring, determinism of the
//! generated corpus, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use transducer_tts::checkpoint::save_checkpoint;
use transducer_tts::config::RunConfig;
use transducer_tts::model::{GstConfig, ModelConfig, StackConfig, TtsModel};
use transducer_tts::runtime::train::TrainConfig;

fn ttst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttst"))
        .args(args)
        .output()
        .expect("spawn ttst")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "ttst failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

/// Small model wired to the desk codec (K=4, V_c=64, d_f=8) so generated
/// corpora validate against it, but cheap enough for per-test training.
fn small_run_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            encoder: StackConfig { layers: 1, dim: 16, heads: 2, ff_dim: 32 },
            predictor: StackConfig { layers: 1, dim: 16, heads: 2, ff_dim: 32 },
            joint_dim: 16,
            rch: StackConfig { layers: 1, dim: 16, heads: 2, ff_dim: 32 },
            gst: GstConfig { num_tokens: 4, token_dim: 16, conv_channels: vec![8], heads: 2 },
            text_vocab: 32,
            code_vocab: 64,
            num_codebooks: 4,
            feature_dim: 8,
            max_symbols_per_step: 8,
            seed: 11,
        },
        train: TrainConfig {
            batch_size: 2,
            total_steps: 4,
            checkpoint_every: 2,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn datagen_small(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = ttst(&[
        "datagen",
        "--out-dir",
        data.to_str().unwrap(),
        "--sentences",
        "6",
        "--speakers",
        "2",
        "--vocab-size",
        "16",
        "--seed",
        "13",
    ]);
    assert_ok(&out);
    data
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn datagen_is_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = ttst(&[
            "datagen", "--out-dir", out_dir.to_str().unwrap(), "--sentences", "8",
            "--speakers", "2", "--vocab-size", "16", "--seed", "29",
        ]);
        assert_ok(&out);
    }
    let snap_a = dir_snapshot(&a);
    let snap_b = dir_snapshot(&b);
    assert_eq!(snap_a.len(), snap_b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in snap_a.iter().zip(&snap_b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between reruns");
    }

    let c = dir.path().join("c");
    let out = ttst(&[
        "datagen", "--out-dir", c.to_str().unwrap(), "--sentences", "8", "--speakers", "2",
        "--vocab-size", "16", "--seed", "30",
    ]);
    assert_ok(&out);
    let snap_c = dir_snapshot(&c);
    assert!(
        snap_a.iter().zip(&snap_c).any(|((_, x), (_, y))| x != y),
        "different seeds produced identical corpora"
    );
}

#[test]
fn pipeline_train_synth_align_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen_small(dir.path());
    let cfg_path = write_config(dir.path(), &small_run_config());
    let run = dir.path().join("run");

    let out = ttst(&[
        "train", "--config", cfg_path.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4, "one log line per step");
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], (i + 1) as u64);
        for field in ["lr", "rnnt", "ce", "total", "k"] {
            assert!(v.get(field).is_some(), "log line missing {field}: {line}");
        }
    }
    let ckpt = run.join("ckpt_000004.ttsx");
    assert!(ckpt.exists());
    assert!(run.join("ckpt_000002.ttsx").exists());

    // synth: same seed → identical bytes, and both output files appear
    let s1 = dir.path().join("synth1");
    let s2 = dir.path().join("synth2");
    for out_prefix in [&s1, &s2] {
        let out = ttst(&[
            "synth", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
            "--text", "ba", "--ref", data.join("ref_spk0.ttsf").to_str().unwrap(),
            "--out", out_prefix.to_str().unwrap(), "--seed", "5",
        ]);
        assert_ok(&out);
    }
    let f1 = std::fs::read(format!("{}.ttsf", s1.display())).unwrap();
    let f2 = std::fs::read(format!("{}.ttsf", s2.display())).unwrap();
    assert_eq!(f1, f2, "same-seed synth must be reproducible");
    let c1 = std::fs::read(format!("{}.ttsc", s1.display())).unwrap();
    let c2 = std::fs::read(format!("{}.ttsc", s2.display())).unwrap();
    assert_eq!(c1, c2);

    // align on a manifest entry: dwell partitions the frames
    let out = ttst(&[
        "align", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--entry", "utt0000",
    ]);
    assert_ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let path = v["path"].as_str().unwrap();
    let frames = v["frame_to_pos"].as_array().unwrap().len();
    let dwell_sum: u64 = v["dwell"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).sum();
    assert_eq!(dwell_sum as usize, frames);
    assert_eq!(path.matches('e').count(), frames);

    // oracle eval: metric plumbing scores ground truth perfectly
    let out = ttst(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--oracle",
    ]);
    assert_ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["first_codebook_token_error_rate"], 0.0);
    assert_eq!(v["exact_sequence_match"], 100.0);
    assert_eq!(v["feature_mse_vs_codec_floor"], 1.0);
}

#[test]
fn resume_extends_the_log_and_rejects_config_changes() {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen_small(dir.path());
    let cfg = small_run_config();
    let cfg_path = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    let out = ttst(&[
        "train", "--config", cfg_path.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    assert_ok(&out);

    // extending the run keeps the trajectory hash, so resuming works
    let mut cfg6 = small_run_config();
    cfg6.train.total_steps = 6;
    let cfg6_path = dir.path().join("run6.json");
    std::fs::write(&cfg6_path, serde_json::to_string(&cfg6).unwrap()).unwrap();
    let out = ttst(&[
        "train", "--config", cfg6_path.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(), "--resume",
        run.join("ckpt_000004.ttsx").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    // 4 lines from the fresh run + steps 5..=6 appended on resume
    assert_eq!(log.lines().count(), 6);
    assert!(run.join("ckpt_000006.ttsx").exists());

    // changing the trajectory (here α) under a resume is refused
    let mut cfg_alpha = small_run_config();
    cfg_alpha.train.alpha = 0.3;
    let cfg_alpha_path = dir.path().join("alpha.json");
    std::fs::write(&cfg_alpha_path, serde_json::to_string(&cfg_alpha).unwrap()).unwrap();
    let out = ttst(&[
        "train", "--config", cfg_alpha_path.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(), "--resume",
        run.join("ckpt_000004.ttsx").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different run config"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();

    // clap usage error
    let out = ttst(&["synth", "--no-such-flag"]);
    assert_eq!(exit_code(&out), 2);

    // config with unknown key
    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"train":{"alhpa":0.4}}"#).unwrap();
    let out = ttst(&[
        "train", "--config", bad_cfg.to_str().unwrap(), "--data", "nowhere", "--out", "nowhere",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // missing corpus directory surfaces as I/O
    let data = datagen_small(dir.path());
    let cfg_path = write_config(dir.path(), &small_run_config());
    let out = ttst(&[
        "train", "--config", cfg_path.to_str().unwrap(), "--data",
        dir.path().join("missing").to_str().unwrap(), "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);

    // align wants exactly one source
    let out = ttst(&["align", "--ckpt", "x.ttsx", "--data", data.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);

    // corrupt checkpoint is a format error
    let bad_ckpt = dir.path().join("bad.ttsx");
    std::fs::write(&bad_ckpt, b"not a checkpoint").unwrap();
    let out = ttst(&[
        "eval", "--ckpt", bad_ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn blank_rigged_model_exits_5_on_synth() {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen_small(dir.path());
    let cfg = small_run_config();

    // bias the joint towards ⟨blank⟩ so decoding emits nothing anywhere
    let mut model = TtsModel::new(cfg.model.clone()).unwrap();
    let id = model.params.lookup("joint.out.b").unwrap();
    let blank = cfg.model.code_vocab;
    model.params.value_mut(id)[[0, blank]] = 50.0;
    let ckpt = dir.path().join("blanky.ttsx");
    save_checkpoint(&ckpt, &cfg.model, 0, &model.params, None, None).unwrap();

    let out = ttst(&[
        "synth", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--text", "ba", "--ref", data.join("ref_spk0.ttsf").to_str().unwrap(),
        "--out", dir.path().join("empty").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 5, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
