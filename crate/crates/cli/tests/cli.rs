use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vqcpc::checkpoint::digest;
use vqcpc::corpus::{admissible_shifts, Corpus, VoiceRanges};

fn vqcpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqcpc")).args(args).env_remove("VQCPC_SEED").output().expect("spawn vqcpc")
}

fn ok(args: &[&str]) -> Output {
    let out = vqcpc(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_ENCODER: &[&str] = &[
    "--set", "token_embedding_dim=4",
    "--set", "recurrent_hidden=8",
    "--set", "recurrent_layers=1",
    "--set", "projection_hidden=8",
    "--set", "projection_layers=1",
    "--set", "projected_dim=8",
    "--set", "context_hidden=8",
    "--set", "context_layers=1",
    "--set", "codebook_size=4",
    "--set", "k=2",
    "--set", "negatives=3",
    "--set", "uniform_pool=32",
    "--set", "dropout=0",
    "--set", "learning_rate=0.003",
    "--set", "epochs=2",
];

const TINY_DECODER: &[&str] = &[
    "--set", "token_embedding_dim=8",
    "--set", "code_embedding_dim=8",
    "--set", "positional_dim=2",
    "--set", "encoder_layers=1",
    "--set", "decoder_layers=1",
    "--set", "heads=2",
    "--set", "head_dim=8",
    "--set", "feedforward_dim=16",
    "--set", "dropout=0",
    "--set", "sequence_tokens=128",
    "--set", "learning_rate=0.003",
    "--set", "epochs=3",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_owned(args: &[String]) -> Output {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

/// A prepared synthetic corpus in `<tmp>/data`.
fn prepared(tmp: &Path) -> PathBuf {
    let synth = tmp.join("synth");
    ok(&["synth", "--families", "4", "--pieces", "30", "--length-beats", "8", "--seed", "3", "--out", s(&synth)]);
    let data = tmp.join("data");
    ok(&["prepare", "--in", s(&synth.join("corpus.txt")), "--out", s(&data), "--seed", "1"]);
    data
}

fn train_encoder(data: &Path, out: &Path, extra: &[&str]) {
    let args = with(&["train-encoder", "--corpus", s(data), "--out", s(out), "--seed", "5"], TINY_ENCODER);
    run_owned(&[args, extra.iter().map(|s| s.to_string()).collect()].concat());
}

#[test]
fn prepare_splits_deterministically_and_augments_the_train_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepared(tmp.path());
    let load = |dir: &Path, name: &str| Corpus::load(&dir.join(format!("{name}.txt"))).unwrap();
    let total: usize = ["train", "valid", "test"].iter().map(|n| load(&data, n).len()).sum();
    assert_eq!(total, 30);
    assert_eq!(load(&data, "train").len(), 24);

    let again = tmp.path().join("again");
    let input = tmp.path().join("synth/corpus.txt");
    ok(&["prepare", "--in", s(&input), "--out", s(&again), "--seed", "1"]);
    for n in ["train", "valid", "test"] {
        assert_eq!(load(&data, n), load(&again, n));
    }

    let aug = tmp.path().join("aug");
    ok(&["prepare", "--in", s(&input), "--out", s(&aug), "--seed", "1", "--augment-transpose", "on", "--subseq-tokens", "32"]);
    let train = load(&data, "train");
    let ranges = VoiceRanges::observed(&train.pieces, &train.vocab).unwrap();
    let shifts: usize = train.pieces.iter().map(|p| admissible_shifts(p, &train.vocab, &ranges).len()).sum();
    assert_eq!(load(&aug, "train").len(), shifts);
    assert!(shifts > train.len());
    assert_eq!(load(&aug, "valid"), load(&data, "valid"));
    assert!(std::fs::read_to_string(aug.join("resolved_config.txt")).unwrap().contains("augment_transpose = true"));

    let bad = vqcpc(&["prepare", "--in", s(&input), "--out", s(&aug), "--subseq-tokens", "24"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn encoder_training_is_seeded_and_logs_ln_n() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepared(tmp.path());
    let a = tmp.path().join("runs/a.ckpt");
    let b = tmp.path().join("runs/b.ckpt");
    let u = tmp.path().join("runs/u.ckpt");
    train_encoder(&data, &a, &["--set", "epochs=8"]);
    train_encoder(&data, &b, &["--set", "epochs=8"]);
    train_encoder(&data, &u, &["--set", "epochs=8", "--negatives", "uniform"]);
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(digest(&bytes(&a)), digest(&bytes(&b)));

    let metrics = std::fs::read_to_string(tmp.path().join("runs/a.ckpt.metrics.tsv")).unwrap();
    let row0: Vec<&str> = metrics.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row0[0], "0");
    let nce: f64 = row0[1].parse().unwrap();
    assert!((nce - 4f64.ln()).abs() < 1e-5, "{nce}");
    let log = std::fs::read_to_string(tmp.path().join("runs/resolved_config.txt")).unwrap();
    assert_eq!(log.matches("# train-encoder").count(), 3);
    assert!(log.contains("negative_mode = uniform"));

    let codes = |ckpt: &Path| {
        let out = ok(&["encode", "--encoder", s(ckpt), "--in", s(&data.join("test.txt"))]);
        String::from_utf8(out.stdout).unwrap()
    };
    assert_ne!(codes(&a), codes(&u));
    for line in codes(&a).lines() {
        let c: Vec<usize> = line.split_whitespace().map(|x| x.parse().unwrap()).collect();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|&x| x < 4));
    }

    let clusters = tmp.path().join("clusters");
    ok(&["clusters", "--encoder", s(&a), "--corpus", s(&data), "--out", s(&clusters)]);
    let members: usize = (0..4)
        .map(|c| std::fs::read_to_string(clusters.join(format!("{c}.index"))).unwrap().lines().count())
        .sum();
    assert_eq!(members, 24 * 8);
}

#[test]
fn decoder_training_and_variation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepared(tmp.path());
    let enc = tmp.path().join("enc.ckpt");
    train_encoder(&data, &enc, &[]);
    let enc_hash = digest(&std::fs::read(&enc).unwrap());
    let dec = tmp.path().join("dec.ckpt");
    run_owned(&with(&["train-decoder", "--corpus", s(&data), "--encoder", s(&enc), "--out", s(&dec), "--seed", "2"], TINY_DECODER));
    assert_eq!(digest(&std::fs::read(&enc).unwrap()), enc_hash);

    let vocab = Corpus::load(&data.join("train.txt")).unwrap().vocab;
    let metrics = std::fs::read_to_string(tmp.path().join("dec.ckpt.metrics.tsv")).unwrap();
    let last: Vec<&str> = metrics.lines().last().unwrap().split('\t').collect();
    let valid: f64 = last[2].parse().unwrap();
    assert!(valid < (vocab.len() as f64).ln(), "{metrics}");

    let test_file = data.join("test.txt");
    let vary = |seed: &str, out: &Path| {
        let args = ["vary", "--encoder", s(&enc), "--decoder", s(&dec), "--in", s(&test_file)];
        ok(&[&args[..], &["--seed", seed, "--out", s(out)]].concat());
        Corpus::load(out).unwrap()
    };
    let (va, vb) = (tmp.path().join("va.txt"), tmp.path().join("vb.txt"));
    let (a, b) = (vary("1", &va), vary("2", &vb));
    assert_eq!(a.len(), 1);
    assert_eq!(a.vocab, vocab);
    assert_eq!(a.pieces[0].steps(), 32);
    assert_ne!(a, b);
    let codes = std::fs::read_to_string(tmp.path().join("va.codes")).unwrap();
    assert_eq!(codes.split_whitespace().count(), 8);
    assert!(std::fs::read_to_string(tmp.path().join("resolved_config.txt")).unwrap().contains("top_p = 0.8"));

    let other = tmp.path().join("other.ckpt");
    let args = with(&["train-encoder", "--corpus", s(&data), "--out", s(&other), "--seed", "6"], TINY_ENCODER);
    run_owned(&args);
    let out = vqcpc(&["vary", "--encoder", s(&other), "--decoder", s(&dec), "--in", s(&data.join("test.txt")), "--out", s(&va)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn validation_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepared(tmp.path());
    let enc = tmp.path().join("enc.ckpt");
    let config = tmp.path().join("bad.conf");
    std::fs::write(&config, "recurrent_hidden = 8\nno_such_key = 1\n").unwrap();
    let out = vqcpc(&["train-encoder", "--corpus", s(&data), "--out", s(&enc), "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    train_encoder(&data, &enc, &[]);
    let mut args = with(&["train-decoder", "--corpus", s(&data), "--encoder", s(&enc), "--out", s(&tmp.path().join("d"))], TINY_DECODER);
    args.extend(["--set".to_string(), "subsequence_tokens=32".to_string()]);
    let out = vqcpc(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_vqcpc"))
        .args(["synth", "--out", s(&tmp.path().join("x"))])
        .env("VQCPC_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_defaults_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, env: Option<&str>, flag: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vqcpc"));
        cmd.args(["synth", "--pieces", "5", "--out", s(&out)]).env_remove("VQCPC_SEED");
        if let Some(e) = env {
            cmd.env("VQCPC_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.status().unwrap().success());
        std::fs::read_to_string(out.join("corpus.txt")).unwrap()
    };
    assert_eq!(run("a", Some("9"), None), run("b", None, Some("9")));
    assert_ne!(run("c", Some("9"), None), run("d", Some("9"), Some("10")));
}

#[test]
fn distilled_mode_writes_a_usable_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepared(tmp.path());
    let enc = tmp.path().join("dst.ckpt");
    ok(&[
        "train-encoder", "--corpus", s(&data), "--out", s(&enc), "--mode", "distilled", "--seed", "1",
        "--set", "heads=2", "--set", "head_dim=4", "--set", "feedforward_dim=8", "--set", "token_embedding_dim=4",
        "--set", "positional_dim=2", "--set", "teacher_layers=1", "--set", "stack_layers=1", "--set", "span_tokens=16",
        "--set", "teacher_window=32", "--set", "sequence_tokens=128", "--set", "codebook_size=4",
        "--set", "teacher_epochs=1", "--set", "epochs=1", "--set", "dropout=0",
    ]);
    let metrics = std::fs::read_to_string(tmp.path().join("dst.ckpt.metrics.tsv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("teacher\t0")));
    assert!(metrics.lines().any(|l| l.starts_with("encoder\t1")));
    let out = ok(&["encode", "--encoder", s(&enc), "--in", s(&data.join("valid.txt"))]);
    for line in String::from_utf8(out.stdout).unwrap().lines() {
        let c: Vec<usize> = line.split_whitespace().map(|x| x.parse().unwrap()).collect();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|&x| x < 4));
    }
    let bad = vqcpc(&["train-encoder", "--corpus", s(&data), "--out", s(&enc), "--mode", "distilled", "--negatives", "uniform"]);
    assert_eq!(bad.status.code(), Some(2));
}
