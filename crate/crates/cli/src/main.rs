//! `vqcpc` command-line runner.
//!
//! Every command is reproducible from its inputs, config file and seed, and
//! appends its resolved configuration to `resolved_config.txt` in its output
//! directory. Exit codes: 0 success, 2 validation error, 3 training
//! divergence.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vqcpc::analysis::cluster_dump;
use vqcpc::config::{parse_flat, FlatConfig};
use vqcpc::corpus::{synthesize_corpus, Corpus, SynthConfig, VoiceRanges};
use vqcpc::cpc::{encode_corpus, train_encoder, CodeEncoder, EncoderConfig, NegativeMode};
use vqcpc::decoder::{resolve_config, train_decoder, Conditioning, DecoderConfig, DecoderState};
use vqcpc::distilled::{load_code_encoder, train_distilled_encoder, train_teacher, DistilledConfig};
use vqcpc::generator::{vary, SamplingConfig};

#[derive(Parser)]
#[command(name = "vqcpc", version, about = "Train code encoders and variation decoders on token corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a corpus into train/valid/test and optionally augment the train split.
    Prepare(PrepareArgs),
    /// Write a synthetic corpus with per-beat family labels.
    Synth(SynthArgs),
    /// Train a code encoder.
    TrainEncoder(TrainEncoderArgs),
    /// Train a decoder against a frozen encoder.
    TrainDecoder(TrainDecoderArgs),
    /// Print the codes of every piece, one line per piece.
    Encode(EncodeArgs),
    /// Generate a variation of one piece.
    Vary(VaryArgs),
    /// Dump the subsequences assigned to each code.
    Clusters(ClustersArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncoderMode {
    Cpc,
    Distilled,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Full-size models.
    Full,
    /// Small models that train on one CPU core in minutes.
    Desk,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Defaults to $VQCPC_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = parse_subseq)]
    subseq_tokens: usize,
    #[arg(long, value_enum, default_value = "off")]
    augment_transpose: Switch,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    families: usize,
    #[arg(long, default_value_t = 200)]
    pieces: usize,
    #[arg(long, default_value_t = 24)]
    length_beats: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainEncoderArgs {
    /// A prepared directory (its train split is used) or a corpus file.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "cpc")]
    mode: EncoderMode,
    #[arg(long, value_parser = parse_negatives)]
    negatives: Option<NegativeMode>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainDecoderArgs {
    /// A prepared directory with train and valid splits.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_conditioning)]
    conditioning: Option<Conditioning>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Written to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VaryArgs {
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    /// Corpus file holding the template.
    #[arg(long = "in")]
    input: PathBuf,
    /// Index of the template piece.
    #[arg(long, default_value_t = 0)]
    piece: usize,
    #[arg(long, default_value_t = 0.8)]
    top_p: f64,
    #[arg(long, default_value_t = 0.95)]
    temperature: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus file for the variation; a `.codes` file is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClustersArgs {
    #[arg(long)]
    encoder: PathBuf,
    /// A prepared directory (its train split is used) or a corpus file.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_subseq(s: &str) -> std::result::Result<usize, String> {
    match s {
        "16" => Ok(16),
        "32" => Ok(32),
        _ => Err(format!("expected 16 or 32, got {s:?}")),
    }
}

fn parse_negatives(s: &str) -> std::result::Result<NegativeMode, String> {
    s.parse().map_err(|e: vqcpc::Error| e.to_string())
}

fn parse_conditioning(s: &str) -> std::result::Result<Conditioning, String> {
    s.parse().map_err(|e: vqcpc::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<vqcpc::Error>() {
        Some(vqcpc::Error::Diverged { .. }) => 3,
        Some(vqcpc::Error::Io(_)) | None => 1,
        Some(_) => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::TrainEncoder(a) => train_encoder_cmd(a),
        Command::TrainDecoder(a) => train_decoder_cmd(a),
        Command::Encode(a) => encode(a),
        Command::Vary(a) => vary_cmd(a),
        Command::Clusters(a) => clusters(a),
    }
}

fn resolve_seed(seed: Option<u64>) -> Result<u64> {
    match (seed, std::env::var("VQCPC_SEED")) {
        (Some(s), _) => Ok(s),
        (None, Ok(v)) => v.trim().parse().map_err(|_| invalid(format!("VQCPC_SEED={v:?} is not an integer"))),
        (None, Err(_)) => Ok(0),
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    vqcpc::Error::Invalid(msg.into()).into()
}

/// Applies the config file then `--set` overrides; unknown keys are errors.
fn load_config<C: FlatConfig>(mut base: C, args: &ConfigArgs) -> Result<C> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        pairs.extend(parse_flat(&text)?);
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let unknown = base.apply(&pairs)?;
    if !unknown.is_empty() {
        return Err(invalid(format!("unknown config keys: {}", unknown.join(", "))));
    }
    Ok(base)
}

fn out_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir(path)).with_context(|| format!("creating {}", out_dir(path).display()))
}

/// Appends one run's resolved configuration to `<dir>/resolved_config.txt`.
fn record_run(dir: &Path, command: &str, lines: &[(&str, String)], config: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = format!("# {command}\n");
    for (k, v) in lines {
        writeln!(text, "{k} = {v}")?;
    }
    if let Some(c) = config {
        text.push_str(c);
    }
    text.push('\n');
    let path = dir.join("resolved_config.txt");
    OpenOptions::new().create(true).append(true).open(&path)?.write_all(text.as_bytes())?;
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

/// A prepared directory's split, or the file itself.
fn corpus_split(path: &Path, split: &str) -> Result<Corpus> {
    if path.is_dir() {
        let candidate = path.join(format!("{split}.txt"));
        if candidate.exists() {
            return load_corpus(&candidate);
        }
        let whole = path.join("corpus.txt");
        if whole.exists() {
            return load_corpus(&whole);
        }
        bail!(invalid(format!("{} holds neither {split}.txt nor corpus.txt", path.display())));
    }
    load_corpus(path)
}

fn load_encoder(path: &Path) -> Result<Box<dyn CodeEncoder>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(load_code_encoder(&bytes)?)
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let corpus = load_corpus(&a.input)?;
    let (mut train, valid, test) = corpus.split(0.8, 0.1, seed);
    if a.augment_transpose == Switch::On {
        let ranges = VoiceRanges::observed(&train.pieces, &train.vocab)?;
        train = train.augment(&ranges);
    }
    std::fs::create_dir_all(&a.out)?;
    for (name, c) in [("train", &train), ("valid", &valid), ("test", &test)] {
        c.save(&a.out.join(format!("{name}.txt")))?;
    }
    record_run(
        &a.out,
        "prepare",
        &[
            ("in", a.input.display().to_string()),
            ("subseq_tokens", a.subseq_tokens.to_string()),
            ("augment_transpose", (a.augment_transpose == Switch::On).to_string()),
            ("seed", seed.to_string()),
        ],
        None,
    )?;
    eprintln!("train {} valid {} test {} pieces", train.len(), valid.len(), test.len());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let cfg = SynthConfig { families: a.families, pieces: a.pieces, length_beats: a.length_beats, seed, ..SynthConfig::default() };
    let corpus = synthesize_corpus(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    corpus.save(&a.out.join("corpus.txt"))?;
    record_run(
        &a.out,
        "synth",
        &[
            ("families", a.families.to_string()),
            ("pieces", a.pieces.to_string()),
            ("length_beats", a.length_beats.to_string()),
            ("seed", seed.to_string()),
        ],
        None,
    )?;
    Ok(())
}

fn metrics_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".metrics.tsv");
    out.with_file_name(name)
}

/// Writes the divergence checkpoint beside `out` before passing the error on.
fn keep_last_good(err: vqcpc::Error, out: &Path) -> anyhow::Error {
    if let vqcpc::Error::Diverged { last_good, .. } = &err {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".last_good");
        let path = out.with_file_name(name);
        if std::fs::write(&path, last_good).is_ok() {
            eprintln!("last finite state written to {}", path.display());
        }
    }
    err.into()
}

fn train_encoder_cmd(a: TrainEncoderArgs) -> Result<()> {
    let seed = resolve_seed(a.config.seed)?;
    let corpus = corpus_split(&a.corpus, "train")?;
    create_parent(&a.out)?;
    let mut tsv = String::new();
    let (bytes, resolved) = match a.mode {
        EncoderMode::Cpc => {
            let base = match a.config.preset {
                Preset::Full => EncoderConfig::default(),
                Preset::Desk => EncoderConfig::desk(),
            };
            let mut config = load_config(base, &a.config)?;
            if let Some(n) = a.negatives {
                config.negative_mode = n;
            }
            if config.vocab_size == 0 {
                config.vocab_size = corpus.vocab.len();
            }
            tsv.push_str("epoch\tnce\tvq\tperplexity\n");
            let run = train_encoder(&corpus, &config, seed, |m| {
                eprintln!("epoch {:>3}  nce {:.4}  vq {:.4}  perplexity {:.2}", m.epoch, m.nce, m.vq, m.perplexity);
                let _ = writeln!(tsv, "{}\t{}\t{}\t{}", m.epoch, m.nce, m.vq, m.perplexity);
            })
            .map_err(|e| keep_last_good(e, &a.out))?;
            (run.state.to_bytes(), config.to_text())
        }
        EncoderMode::Distilled => {
            if a.negatives.is_some() {
                return Err(invalid("--negatives applies to the cpc mode only"));
            }
            let base = match a.config.preset {
                Preset::Full => DistilledConfig::default(),
                Preset::Desk => DistilledConfig::desk(),
            };
            let mut config = load_config(base, &a.config)?;
            if config.vocab_size == 0 {
                config.vocab_size = corpus.vocab.len();
            }
            tsv.push_str("phase\tepoch\tloss\tvq\tperplexity\n");
            let teacher = train_teacher(&corpus, &config, seed, |m| {
                eprintln!("teacher epoch {:>3}  loss {:.4}", m.epoch, m.loss);
                let _ = writeln!(tsv, "teacher\t{}\t{}\t\t", m.epoch, m.loss);
            })
            .map_err(|e| keep_last_good(e, &a.out))?;
            let run = train_distilled_encoder(&corpus, &teacher.teacher, seed, |m| {
                eprintln!("encoder epoch {:>3}  distill {:.4}  vq {:.4}  perplexity {:.2}", m.epoch, m.distill, m.vq, m.perplexity);
                let _ = writeln!(tsv, "encoder\t{}\t{}\t{}\t{}", m.epoch, m.distill, m.vq, m.perplexity);
            })
            .map_err(|e| keep_last_good(e, &a.out))?;
            (run.state.to_bytes(), config.to_text())
        }
    };
    std::fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    std::fs::write(metrics_path(&a.out), tsv)?;
    let mode = match a.mode {
        EncoderMode::Cpc => "cpc",
        EncoderMode::Distilled => "distilled",
    };
    record_run(
        &out_dir(&a.out),
        "train-encoder",
        &[
            ("corpus", a.corpus.display().to_string()),
            ("out", a.out.display().to_string()),
            ("mode", mode.to_string()),
            ("seed", seed.to_string()),
        ],
        Some(&resolved),
    )
}

fn train_decoder_cmd(a: TrainDecoderArgs) -> Result<()> {
    let seed = resolve_seed(a.config.seed)?;
    let train = corpus_split(&a.corpus, "train")?;
    let valid = if a.corpus.is_dir() && a.corpus.join("valid.txt").exists() {
        load_corpus(&a.corpus.join("valid.txt"))?
    } else {
        Corpus::new(train.vocab.clone(), Vec::new())
    };
    let encoder = load_encoder(&a.encoder)?;
    let base = match a.config.preset {
        Preset::Full => DecoderConfig::default(),
        Preset::Desk => DecoderConfig::desk(),
    };
    let mut config = load_config(base, &a.config)?;
    if let Some(c) = a.conditioning {
        config.conditioning = c;
    }
    if encoder.subsequence_tokens() != config.subsequence_tokens {
        return Err(invalid(format!(
            "encoder uses {}-token subsequences, decoder config has subsequence_tokens = {}",
            encoder.subsequence_tokens(),
            config.subsequence_tokens
        )));
    }
    let config = resolve_config(&config, &train, encoder.as_ref());
    create_parent(&a.out)?;
    let mut tsv = String::from("epoch\ttrain_nll\tvalid_nll\n");
    let run = train_decoder(&train, &valid, encoder.as_ref(), &config, seed, |m| {
        eprintln!("epoch {:>3}  train {:.4}  valid {:.4}", m.epoch, m.train_nll, m.valid_nll);
        let _ = writeln!(tsv, "{}\t{}\t{}", m.epoch, m.train_nll, m.valid_nll);
    })
    .map_err(|e| keep_last_good(e, &a.out))?;
    std::fs::write(&a.out, run.state.to_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    std::fs::write(metrics_path(&a.out), tsv)?;
    record_run(
        &out_dir(&a.out),
        "train-decoder",
        &[
            ("corpus", a.corpus.display().to_string()),
            ("encoder", a.encoder.display().to_string()),
            ("out", a.out.display().to_string()),
            ("seed", seed.to_string()),
        ],
        Some(&config.to_text()),
    )
}

fn encode(a: EncodeArgs) -> Result<()> {
    let encoder = load_encoder(&a.encoder)?;
    let corpus = load_corpus(&a.input)?;
    let text: String = encode_corpus(encoder.as_ref(), &corpus)?
        .iter()
        .map(|codes| codes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    match &a.out {
        Some(path) => {
            create_parent(path)?;
            std::fs::write(path, text)?;
            record_run(
                &out_dir(path),
                "encode",
                &[("encoder", a.encoder.display().to_string()), ("in", a.input.display().to_string())],
                None,
            )?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn vary_cmd(a: VaryArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let encoder = load_encoder(&a.encoder)?;
    let dec_bytes = std::fs::read(&a.decoder).with_context(|| format!("reading {}", a.decoder.display()))?;
    let decoder = DecoderState::from_bytes(&dec_bytes)?;
    let corpus = load_corpus(&a.input)?;
    if corpus.vocab.len() != decoder.config().vocab_size {
        return Err(invalid(format!(
            "corpus vocabulary has {} symbols, decoder expects {}",
            corpus.vocab.len(),
            decoder.config().vocab_size
        )));
    }
    let sequences = corpus.sequences(decoder.config().subsequence_tokens)?;
    let template = sequences
        .get(a.piece)
        .ok_or_else(|| invalid(format!("piece {} requested from a corpus of {}", a.piece, sequences.len())))?;
    let sampling = SamplingConfig { top_p: a.top_p, temperature: a.temperature, seed };
    let variation = vary(template, encoder.as_ref(), &decoder, &sampling)?;
    if !variation.encoder_matches {
        eprintln!("warning: decoder was trained against a different encoder checkpoint");
    }
    create_parent(&a.out)?;
    let mut text = String::new();
    writeln!(text, "#version 1")?;
    writeln!(text, "#ticks_per_beat {}", vqcpc::corpus::TICKS_PER_BEAT)?;
    writeln!(text, "#vocab {}", corpus.vocab.symbols().join(" "))?;
    writeln!(text, "{}", variation.piece_line(&corpus.vocab)?)?;
    std::fs::write(&a.out, text)?;
    std::fs::write(a.out.with_extension("codes"), variation.codes_line() + "\n")?;
    record_run(
        &out_dir(&a.out),
        "vary",
        &[
            ("encoder", a.encoder.display().to_string()),
            ("decoder", a.decoder.display().to_string()),
            ("in", a.input.display().to_string()),
            ("piece", a.piece.to_string()),
            ("top_p", a.top_p.to_string()),
            ("temperature", a.temperature.to_string()),
            ("seed", seed.to_string()),
        ],
        None,
    )
}

fn clusters(a: ClustersArgs) -> Result<()> {
    let encoder = load_encoder(&a.encoder)?;
    let corpus = corpus_split(&a.corpus, "train")?;
    cluster_dump(&corpus, encoder.as_ref())?.write(&a.out, &corpus)?;
    record_run(
        &a.out,
        "clusters",
        &[("encoder", a.encoder.display().to_string()), ("corpus", a.corpus.display().to_string())],
        None,
    )
}
