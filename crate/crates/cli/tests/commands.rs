use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fann_core::dataio::{read_fant, DatasetManifest, MANIFEST_FILE};

fn fann(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fann"))
        .args(args)
        .env("FANN_THREADS", "1")
        .output()
        .expect("spawn fann")
}

fn ok(args: &[&str]) -> String {
    let out = fann(args);
    assert!(
        out.status.success(),
        "fann {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    fann(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, seed: &str) {
    ok(&[
        "synth-gen",
        "--out",
        s(dir),
        "--identities",
        "4",
        "--per-camera",
        "2",
        "--seed",
        seed,
    ]);
}

#[test]
fn synth_gen_writes_identical_bytes_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_dataset(a.path(), "5");
    small_dataset(b.path(), "5");
    let manifest = DatasetManifest::read(a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.len(), 16);
    for e in &manifest.entries {
        for rel in [&e.image, &e.mask] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }
}

#[test]
fn synth_gen_rejects_a_single_identity() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["synth-gen", "--out", s(dir.path()), "--identities", "1"]), 2);
    assert_eq!(code(&["synth-gen", "--out", s(dir.path()), "--clutter", "extreme"]), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data, "1");
    let out = dir.path().join("run");
    let manifest = data.join(MANIFEST_FILE);
    ok(&["train", "--data", s(&manifest), "--iters", "0", "--out", s(&out)]);
    let (_, trained) = fann_core::checkpoint::load_checkpoint(out.join("checkpoint")).unwrap();
    let fresh = fann_core::net::Network::build(trained.config()).unwrap();
    assert_eq!(trained.params_snapshot(), fresh.params_snapshot());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "header plus the final row");
}

#[test]
fn train_eval_embed_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data, "2");
    let manifest = data.join(MANIFEST_FILE);
    let config = dir.path().join("run.cfg");
    fs::write(&config, "preset = desk\nbatch_size = 2\nlog_interval = 4\ntrials = 3\n").unwrap();
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&manifest),
        "--iters",
        "10",
        "--out",
        s(&out),
    ]);
    // rows at 0, 4, 8 plus the final one
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 10usize.div_ceil(4) + 1);
    assert!(metrics.starts_with("iter,E,L1,L2,R,mean_u,mean_v,lr\n"));

    let ckpt = out.join("checkpoint");
    let eval_dir = dir.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&manifest),
        "--trials",
        "2",
        "--out",
        s(&eval_dir),
    ]);
    assert!(stdout.contains("top-1"), "{stdout}");
    for f in ["trial_00.csv", "trial_01.csv", "mean.csv"] {
        let text = fs::read_to_string(eval_dir.join(f)).unwrap();
        assert!(text.starts_with("rank,cmc\n"), "{f}: {text}");
        assert!(text.lines().last().unwrap().starts_with("map="), "{f}: {text}");
    }

    let image = data.join("images").join("0000_c0_00.ppm");
    let emb = dir.path().join("e.fant");
    ok(&["embed", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&emb)]);
    let bytes = fs::read(&emb).unwrap();
    let v = read_fant(&emb).unwrap();
    let dim = fann_core::net::NetworkConfig::desk().embedding_dim();
    assert_eq!(v.dims(), [dim]);
    // 10 fixed header bytes, one u64 extent, then whole f64 words
    assert_eq!(bytes.len(), 18 + 8 * dim);
    assert!((v.norm() - 1.0).abs() < 1e-12);
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    assert_eq!(
        code(&["eval", "--checkpoint", s(&nowhere), "--data", s(&nowhere.join("m.tsv"))]),
        2
    );
    assert_eq!(
        code(&["train", "--data", s(&nowhere.join("m.tsv")), "--out", s(&dir.path().join("o"))]),
        2
    );
    assert_eq!(code(&["embed", "--checkpoint", s(&nowhere), "--image", "x.ppm"]), 2);
}

#[test]
fn gradcheck_passes_on_the_desk_config() {
    let stdout = ok(&["gradcheck", "--seed", "4"]);
    assert!(stdout.contains("network"), "{stdout}");
    assert!(stdout.contains("L2"), "{stdout}");
}

#[test]
fn dynamics_writes_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj.csv");
    ok(&["dynamics", "--loss", "symmetric", "--steps", "50", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 52);
    assert_eq!(lines[0], fann_core::losses::DYNAMICS_CSV_HEADER);
    for row in &lines[1..] {
        let f: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[10] + f[11], 1.0, "u + v in {row}");
    }
    assert_eq!(code(&["dynamics", "--loss", "sideways", "--out", s(&out)]), 2);
}
