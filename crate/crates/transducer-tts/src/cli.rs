//! The `ttst` command-line surface: corpus generation, training, synthesis,
//! alignment inspection, and evaluation.
//!
//! Exit codes: 0 ok, 2 usage/config, 3 I/O, 4 numerical failure, 5 degenerate
//! output (see [`Error::exit_code`]).

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::codec::{
    corpus_generate, default_speakers, generate_sentences, read_codec_file, reference_text,
    rvq_init, write_codec_file, CodecFile,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_codes, read_features, read_manifest, write_codes, write_features};
use crate::model::{ModelConfig, TtsModel};
use crate::numerics::optim::AdamWState;
use crate::numerics::tape::Tape;
use crate::rnnt::{best_path, JointLogProbGrid};
use crate::runtime::decode::{synthesize, DecodeConfig};
use crate::runtime::eval::{evaluate, EvalOptions, Split};
use crate::runtime::train::{batch_indices, load_training_items, train_step};
use crate::text::{bpe_encode, bpe_train, BpeVocab};

#[derive(Debug, Parser)]
#[command(
    name = "ttst",
    version,
    about = "Desk-scale text-to-speech transducer over synthetic codec tokens"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: codec, BPE vocabulary, codes, manifest
    Datagen(DatagenArgs),
    /// Train on a generated corpus, writing checkpoints and a JSONL log
    Train(TrainArgs),
    /// Synthesize features and codes for a text given a reference
    Synth(SynthArgs),
    /// Print the best-path alignment for an utterance as JSON
    Align(AlignArgs),
    /// Decode a manifest split and print an evaluation report as JSON
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Run-config JSON; built-in defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus output directory (created if missing)
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    /// Utterances to generate
    #[arg(long, default_value_t = 50)]
    pub sentences: usize,
    /// Toy speakers (pace 2, 4, … frames per token)
    #[arg(long, default_value_t = 2)]
    pub speakers: usize,
    /// Corpus seed; every output file is a pure function of it
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    /// BPE vocabulary size (base characters + merges)
    #[arg(long = "vocab-size", default_value_t = 64)]
    pub vocab_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run-config JSON; built-in defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory produced by `ttst datagen`
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and train_log.jsonl
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to resume from; its config hash must match
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus directory holding vocab.bpe and codec.json
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub text: String,
    /// Reference TTSF feature file selecting speaker/style
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Output path prefix; writes <out>.ttsf and <out>.ttsc
    #[arg(long)]
    pub out: PathBuf,
    /// Nucleus mass for first-codebook sampling
    #[arg(long, default_value_t = 0.95)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus directory holding vocab.bpe (and the manifest for --entry)
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest utterance id, e.g. utt0007
    #[arg(long)]
    pub entry: Option<String>,
    /// Raw text (requires --codes and --ref)
    #[arg(long)]
    pub text: Option<String>,
    /// TTSC code file for the text
    #[arg(long)]
    pub codes: Option<PathBuf>,
    /// Reference TTSF feature file
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Heldout,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus directory holding vocab.bpe and codec.json
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest path; defaults to <data>/manifest.jsonl
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Subset to score: train = first 80% of entries, heldout = the rest
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Nucleus mass for first-codebook sampling
    #[arg(long, default_value_t = 0.95)]
    pub p: f64,
    /// Score the ground-truth codes instead of decoding (metric self-check)
    #[arg(long, default_value_t = false)]
    pub oracle: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen(a) => cmd_datagen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Align(a) => cmd_align(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn load_model(ckpt: &Path) -> Result<(TtsModel, Option<AdamWState>, u64)> {
    load_checkpoint(ckpt)?.restore(ckpt)
}

fn check_codec_matches(codec: &CodecFile, config: &ModelConfig) -> Result<()> {
    if codec.spec.num_codebooks != config.num_codebooks
        || codec.spec.codebook_size != config.code_vocab
        || codec.spec.feature_dim != config.feature_dim
    {
        return Err(Error::Config(format!(
            "codec (K={}, V_c={}, d_f={}) does not match model (K={}, V_c={}, d_f={})",
            codec.spec.num_codebooks,
            codec.spec.codebook_size,
            codec.spec.feature_dim,
            config.num_codebooks,
            config.code_vocab,
            config.feature_dim
        )));
    }
    Ok(())
}

fn check_vocab_fits(vocab: &BpeVocab, config: &ModelConfig) -> Result<()> {
    if vocab.pad_id() as usize >= config.text_vocab {
        return Err(Error::Config(format!(
            "vocabulary needs {} token ids (incl. padding), model text_vocab is {}",
            vocab.pad_id() + 1,
            config.text_vocab
        )));
    }
    Ok(())
}

pub fn cmd_datagen(args: &DatagenArgs) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    if args.sentences == 0 {
        return Err(Error::Config("--sentences must be positive".into()));
    }
    if args.speakers == 0 {
        return Err(Error::Config("--speakers must be positive".into()));
    }
    let spec = cfg.codec;
    let n_texts = args.sentences.div_ceil(args.speakers);
    let mut texts = generate_sentences(n_texts, args.seed);
    // the speaker reference sentence must be encodable too
    texts.push(reference_text(args.seed));
    let vocab = bpe_train(&texts, args.vocab_size)?;
    let speakers = default_speakers(&spec, args.speakers, args.seed);

    std::fs::create_dir_all(&args.out_dir).map_err(Error::io(&args.out_dir))?;
    let entries = corpus_generate(&vocab, args.sentences, &speakers, &spec, args.seed, &args.out_dir)?;
    vocab.save(&args.out_dir.join("vocab.bpe"))?;
    let books = rvq_init(&spec, args.seed)?;
    write_codec_file(&args.out_dir.join("codec.json"), &books, args.seed, &speakers)?;

    let mut frames = 0usize;
    for e in &entries {
        frames += read_codes(&args.out_dir.join(&e.codes))?.t();
    }
    println!(
        "datagen: {} utterances, {} speakers, vocab {} tokens, {} frames, K={}, V_c={}, seed {}",
        entries.len(),
        speakers.len(),
        vocab.len(),
        frames,
        spec.num_codebooks,
        spec.codebook_size,
        args.seed
    );
    println!("wrote {}", args.out_dir.join("manifest.jsonl").display());
    Ok(())
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    lr: f64,
    rnnt: f64,
    ce: f64,
    total: f64,
    k: usize,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let hash = cfg.hash();
    let vocab = BpeVocab::load(&args.data.join("vocab.bpe"))?;
    check_vocab_fits(&vocab, &cfg.model)?;
    let codec = read_codec_file(&args.data.join("codec.json"))?;
    check_codec_matches(&codec, &cfg.model)?;
    if codec.spec != cfg.codec {
        return Err(Error::Config(
            "codec.json spec differs from the run config codec section".into(),
        ));
    }
    let items = load_training_items(&args.data.join("manifest.jsonl"), &vocab)?;
    for item in &items {
        item.grid.validate(&codec.spec)?;
    }

    let (mut model, mut opt, start_step) = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            match ckpt.run_config_hash.as_deref() {
                Some(h) if h == hash => {}
                Some(_) => {
                    return Err(Error::Config(format!(
                        "refusing to resume: {} was written under a different run config",
                        ckpt_path.display()
                    )))
                }
                None => {
                    return Err(Error::Config(format!(
                        "refusing to resume: {} carries no run-config hash",
                        ckpt_path.display()
                    )))
                }
            }
            let (model, opt, step) = ckpt.restore(ckpt_path)?;
            let opt = opt.ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint {} has no optimizer state to resume from",
                    ckpt_path.display()
                ))
            })?;
            (model, opt, step)
        }
        None => {
            let model = TtsModel::new(cfg.model.clone())?;
            let opt = AdamWState::new(&model.params, cfg.train.weight_decay);
            (model, opt, 0)
        }
    };

    std::fs::create_dir_all(&args.out).map_err(Error::io(&args.out))?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = if args.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        OpenOptions::new().create(true).write(true).truncate(true).open(&log_path)
    }
    .map_err(Error::io(&log_path))?;

    let t = &cfg.train;
    println!(
        "training: alpha {}, batch {}, total_steps {}, max_lr {}, seed {}",
        t.alpha, t.batch_size, t.total_steps, t.schedule.max_lr, t.seed
    );
    println!("config hash {hash}");
    if start_step > 0 {
        println!("resuming from step {start_step}");
    }

    for step in start_step + 1..=t.total_steps {
        let idx = batch_indices(t.seed, step, items.len(), t.batch_size);
        let batch: Vec<_> = idx.iter().map(|&i| &items[i]).collect();
        let br = train_step(&mut model, &mut opt, &batch, t, step)?;
        let line = LogLine { step, lr: br.lr, rnnt: br.rnnt, ce: br.ce, total: br.total, k: br.k };
        writeln!(log, "{}", serde_json::to_string(&line)?).map_err(Error::io(&log_path))?;
        if step % t.checkpoint_every == 0 || step == t.total_steps {
            let path = args.out.join(format!("ckpt_{step:06}.ttsx"));
            save_checkpoint(&path, &cfg.model, step, &model.params, Some(&opt), Some(&hash))?;
            println!("step {step}: total {:.4}, checkpoint {}", br.total, path.display());
        }
    }
    println!("done at step {}", t.total_steps);
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let (model, _, _) = load_model(&args.ckpt)?;
    let vocab = BpeVocab::load(&args.data.join("vocab.bpe"))?;
    check_vocab_fits(&vocab, &model.config)?;
    let codec = read_codec_file(&args.data.join("codec.json"))?;
    check_codec_matches(&codec, &model.config)?;
    let books = codec.codebooks()?;
    let reference = read_features(&args.reference)?;
    let dcfg = DecodeConfig {
        p: args.p,
        max_symbols_per_step: model.config.max_symbols_per_step,
        temperature: args.temperature,
        seed: args.seed,
    };
    let synthesis = synthesize(&model, &vocab, &books, &args.text, &reference, &dcfg)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
    }
    let feat_path = PathBuf::from(format!("{}.ttsf", args.out.display()));
    let code_path = PathBuf::from(format!("{}.ttsc", args.out.display()));
    write_features(&feat_path, &synthesis.features)?;
    write_codes(&code_path, &synthesis.grid)?;

    let grid = &synthesis.grid;
    println!(
        "synth: {} frames, {} text positions, p {}, seed {}",
        grid.t(),
        synthesis.path.blanks(),
        args.p,
        args.seed
    );
    for k in 0..grid.k() {
        let col = grid.column(k);
        let mut counts = std::collections::BTreeMap::new();
        for c in col {
            *counts.entry(c).or_insert(0usize) += 1;
        }
        let (&top, &top_n) = counts.iter().max_by_key(|(_, &n)| n).expect("T ≥ 1");
        println!("level {k}: {} distinct codes, top {top}×{top_n}", counts.len());
    }
    println!("wrote {} and {}", feat_path.display(), code_path.display());
    Ok(())
}

#[derive(Serialize)]
struct AlignOutput {
    path: String,
    frame_to_pos: Vec<usize>,
    /// Frames dwelt on each text position; sums to T.
    dwell: Vec<usize>,
}

pub fn cmd_align(args: &AlignArgs) -> Result<()> {
    match (&args.entry, &args.text) {
        (Some(_), None) | (None, Some(_)) => {}
        _ => {
            return Err(Error::Config(
                "pass exactly one of --entry or --text (with --codes and --ref)".into(),
            ))
        }
    }
    let (model, _, _) = load_model(&args.ckpt)?;
    let vocab = BpeVocab::load(&args.data.join("vocab.bpe"))?;
    check_vocab_fits(&vocab, &model.config)?;

    let (text, grid, reference) = match (&args.entry, &args.text) {
        (Some(id), None) => {
            let manifest_path = args.data.join("manifest.jsonl");
            let entries = read_manifest(&manifest_path)?;
            let e = entries
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| Error::Input(format!("no manifest entry {id}")))?;
            let grid = read_codes(&args.data.join(&e.codes))?;
            let reference = read_features(&args.data.join(&e.reference))?;
            (e.text.clone(), grid, reference)
        }
        (None, Some(text)) => {
            let codes = args.codes.as_ref().ok_or_else(|| {
                Error::Config("--text needs --codes with the TTSC file to align".into())
            })?;
            let reference = args.reference.as_ref().ok_or_else(|| {
                Error::Config("--text needs --ref with reference features".into())
            })?;
            (text.clone(), read_codes(codes)?, read_features(reference)?)
        }
        _ => unreachable!("combination rejected above"),
    };
    if grid.t() == 0 {
        return Err(Error::Input("cannot align an empty code sequence".into()));
    }

    let tokens = bpe_encode(&vocab, &text)?;
    let first: Vec<u16> = grid.codes.column(0).to_vec();
    let target: Vec<usize> = first.iter().map(|&c| c as usize).collect();
    let mut tape = Tape::new(&model.params);
    let spk = model.gst_embed(&mut tape, &reference)?;
    let enc = model.encode_text(&mut tape, &tokens.ids, spk)?;
    let pred = model.predict_codes(&mut tape, &first)?;
    let grid_node = model.joint_grid(&mut tape, enc.node, pred.node);
    let logits = tape.value(grid_node).to_owned();
    drop(tape);
    let lp = JointLogProbGrid::from_logits(&logits, enc.n, first.len())?;
    let path = best_path(&lp, &target)?;

    let mut dwell = vec![0usize; enc.n];
    for &pos in &path.frame_to_pos {
        dwell[pos] += 1;
    }
    let out = AlignOutput { path: path.path, frame_to_pos: path.frame_to_pos, dwell };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, _, _) = load_model(&args.ckpt)?;
    let vocab = BpeVocab::load(&args.data.join("vocab.bpe"))?;
    check_vocab_fits(&vocab, &model.config)?;
    let codec = read_codec_file(&args.data.join("codec.json"))?;
    let manifest = args.manifest.clone().unwrap_or_else(|| args.data.join("manifest.jsonl"));
    let opts = EvalOptions {
        seed: args.seed,
        decode: DecodeConfig {
            p: args.p,
            max_symbols_per_step: model.config.max_symbols_per_step,
            ..DecodeConfig::default()
        },
        oracle: args.oracle,
        split: match args.split {
            SplitArg::All => Split::All,
            SplitArg::Train => Split::Train,
            SplitArg::Heldout => Split::Heldout,
        },
    };
    let report = evaluate(&model, &vocab, &codec, &manifest, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arg_defaults_match_the_documented_interface() {
        let cli = Cli::parse_from(["ttst", "datagen", "--out-dir", "/tmp/x"]);
        match cli.command {
            Command::Datagen(a) => {
                assert_eq!(a.sentences, 50);
                assert_eq!(a.speakers, 2);
                assert_eq!(a.seed, 13);
                assert_eq!(a.vocab_size, 64);
            }
            other => panic!("parsed {other:?}"),
        }
        let cli = Cli::parse_from([
            "ttst", "synth", "--ckpt", "m.ttsx", "--data", "d", "--text", "ab", "--ref",
            "r.ttsf", "--out", "o",
        ]);
        match cli.command {
            Command::Synth(a) => {
                assert_eq!(a.p, 0.95);
                assert_eq!(a.temperature, 1.0);
                assert_eq!(a.seed, 0);
            }
            other => panic!("parsed {other:?}"),
        }
        let cli =
            Cli::parse_from(["ttst", "eval", "--ckpt", "m.ttsx", "--data", "d", "--split", "heldout"]);
        match cli.command {
            Command::Eval(a) => assert_eq!(a.split, SplitArg::Heldout),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn align_requires_exactly_one_source() {
        let mut args = AlignArgs {
            ckpt: "missing.ttsx".into(),
            data: "nowhere".into(),
            entry: None,
            text: None,
            codes: None,
            reference: None,
        };
        // argument validation comes before any file access
        let err = cmd_align(&args).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
        args.entry = Some("utt0000".into());
        args.text = Some("ab".into());
        let err = cmd_align(&args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
