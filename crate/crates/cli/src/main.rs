use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use pragma::agents::{
    distill_compiled, hand_engineered_speaker, train_contrastive_baseline, train_language_model,
    train_listener, train_speaker, LiteralListener, PairSpeaker, Speaker, SpeakerKind, TrainConfig,
};
use pragma::corpus::{
    build_pairs, generate_synthetic, load_corpus, read_pairs, save_corpus, split_corpus,
    write_captions, write_pairs, CorpusFormat, GeneratorConfig, HeldOutSizes, PairCaption,
    PairMode, ResolvedPair, Scene, SceneIndex,
};
use pragma::derive_seed;
use pragma::features::Spaces;
use pragma::harness::{render_table, run_experiment, Experiment, ExperimentConfig};
use pragma::reasoning::{reason, ReasoningConfig, ReasoningSpeaker};

#[derive(Parser)]
#[command(
    name = "pragma",
    version,
    about = "Reference-game speakers and listeners"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus as scenes-jsonl.
    Generate(GenerateArgs),
    /// Split a corpus into train.jsonl, dev.jsonl and test.jsonl.
    Split(SplitArgs),
    /// Draw a pair set from a scene file.
    Pairs(PairsArgs),
    /// Train every model on a split directory.
    Train(TrainArgs),
    /// Describe a target scene next to a distractor with the reasoning speaker.
    Describe(DescribeArgs),
    /// Pre-generate one speaker's captions for a pair set.
    Captions(CaptionsArgs),
    /// Run an experiment and report accuracy tables and gates.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 500)]
    scenes: usize,
    /// Scenes per family of near-duplicates.
    #[arg(long)]
    family_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out sizes default to 10% each (1000 each from 4000 scenes up).
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: PairMode,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<PairMode, String> {
    s.parse()
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `split`.
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, default_value_t = 20)]
    listener_epochs: usize,
    #[arg(long, default_value_t = 5)]
    speaker_epochs: usize,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Teacher captions for the compiled speaker; 0 skips it.
    #[arg(long, default_value_t = 2000)]
    distill_pairs: usize,
    #[arg(long, default_value_t = 0.02)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
}

#[derive(Args)]
struct ReasonArgs {
    #[arg(long, default_value_t = 0.02)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    target: String,
    #[arg(long)]
    distractor: String,
    #[command(flatten)]
    reason: ReasonArgs,
    #[arg(long)]
    checkpoint_s0: PathBuf,
    #[arg(long)]
    checkpoint_l0: PathBuf,
    /// Manifest directory; defaults to the directory of the S0 checkpoint.
    #[arg(long)]
    spaces: Option<PathBuf>,
    /// Scene files to look the ids up in.
    #[arg(long, required = true, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Print every scored candidate as a JSON line before the caption.
    #[arg(long)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpeakerName {
    Literal,
    Contrastive,
    Reasoning,
    Compiled,
    HandEngineered,
}

#[derive(Args)]
struct CaptionsArgs {
    /// Directory written by `train`.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_enum)]
    speaker: SpeakerName,
    #[command(flatten)]
    reason: ReasonArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentName {
    Samples,
    Lambda,
    Final,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Defaults to the experiment of the config, or `final`.
    #[arg(long, value_enum)]
    experiment: Option<ExperimentName>,
    /// Experiment config, or a previous report whose config is replayed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the desk config used when no config file is given.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Where to write the JSON report; defaults to report-<experiment>.json.
    /// The table goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail unless the new report is byte-identical to the one given.
    #[arg(long)]
    expect: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Split(a) => split(a),
        Command::Pairs(a) => pairs(a),
        Command::Train(a) => train(a),
        Command::Describe(a) => describe(a),
        Command::Captions(a) => captions(a),
        Command::Evaluate(a) => return evaluate(a).unwrap_or_else(report_error),
    };
    result.map_or_else(report_error, |()| ExitCode::SUCCESS)
}

fn report_error(e: anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    ExitCode::FAILURE
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn scenes_from(path: &Path) -> Result<Vec<Scene>> {
    load_corpus(path, CorpusFormat::ScenesJsonl)
        .with_context(|| format!("reading {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut config = GeneratorConfig {
        n_scenes: a.scenes,
        ..GeneratorConfig::default()
    };
    if let Some(f) = a.family_size {
        config.family_size = f;
    }
    let scenes = generate_synthetic(&config, a.seed)?;
    save_corpus(&a.out, &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let scenes = scenes_from(&a.corpus)?;
    let default = HeldOutSizes::default_for(scenes.len());
    let sizes = HeldOutSizes {
        dev: a.dev.unwrap_or(default.dev),
        test: a.test.unwrap_or(default.test),
    };
    let split = split_corpus(&scenes, sizes, a.seed)?;
    fs::create_dir_all(&a.out)?;
    for (name, part) in [
        ("train", &split.train),
        ("dev", &split.dev),
        ("test", &split.test),
    ] {
        save_corpus(&a.out.join(format!("{name}.jsonl")), part)?;
    }
    eprintln!(
        "train {} / dev {} / test {} scenes in {}",
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn pairs(a: PairsArgs) -> Result<()> {
    let scenes = scenes_from(&a.scenes)?;
    let pairs = build_pairs(&scenes, a.mode, a.n, a.seed)?;
    let mut out = create(&a.out)?;
    write_pairs(&mut out, &pairs)?;
    out.flush()?;
    Ok(())
}

// Checkpoint file names inside a model directory.
const L0_FILE: &str = "l0.ckpt";
const EVAL_FILE: &str = "eval-l0.ckpt";
const S0_FILE: &str = "s0.ckpt";
const CONTRASTIVE_FILE: &str = "contrastive.ckpt";
const HAND_FILE: &str = "hand-engineered.ckpt";
const LM_FILE: &str = "lm.ckpt";
const COMPILED_FILE: &str = "compiled.ckpt";

fn train(a: TrainArgs) -> Result<()> {
    let train = scenes_from(&a.split.join("train.jsonl"))?;
    let dev = scenes_from(&a.split.join("dev.jsonl"))?;
    let test = scenes_from(&a.split.join("test.jsonl"))?;
    let spaces = Arc::new(Spaces::build(&train, a.min_count)?);
    let mut dims = TrainConfig::default().dims;
    dims.embed = a.embed.unwrap_or(dims.embed);
    dims.hidden = a.hidden.unwrap_or(dims.hidden);
    let lc = TrainConfig {
        dims,
        epochs: a.listener_epochs,
        ..TrainConfig::default()
    };
    let sc = TrainConfig {
        epochs: a.speaker_epochs,
        ..lc
    };
    let seed = |k| derive_seed(a.seed, k);
    let sp = || spaces.clone();
    eprintln!(
        "training on {} scenes, vocabulary {}",
        train.len(),
        spaces.vocab.len()
    );
    let ((l0, eval), ((s0, contrastive), (hand, lm))) = rayon::join(
        || {
            rayon::join(
                || train_listener(&train, sp(), &lc, seed(0)),
                || train_listener(&train, sp(), &lc, seed(1)),
            )
        },
        || {
            rayon::join(
                || {
                    rayon::join(
                        || train_speaker(&train, &dev, sp(), &sc, seed(2)),
                        || train_contrastive_baseline(&train, &dev, sp(), &sc, seed(3)),
                    )
                },
                || {
                    rayon::join(
                        || hand_engineered_speaker(&train, &dev, sp(), &sc, seed(4)),
                        || train_language_model(&test, &[], sp(), &sc, seed(5)),
                    )
                },
            )
        },
    );
    let (l0, s0) = (l0?, s0?);
    fs::create_dir_all(&a.out)?;
    spaces.save_dir(&a.out)?;
    l0.save(&a.out.join(L0_FILE))?;
    eval?.save(&a.out.join(EVAL_FILE))?;
    s0.save(&a.out.join(S0_FILE))?;
    contrastive?.save(&a.out.join(CONTRASTIVE_FILE))?;
    hand?.save(&a.out.join(HAND_FILE))?;
    lm?.save(&a.out.join(LM_FILE))?;
    if a.distill_pairs > 0 {
        let teacher = ReasoningSpeaker {
            s0: &s0,
            l0: &l0,
            config: reasoning_config(a.lambda, a.samples, 0),
        };
        let compiled = distill_compiled(&teacher, &train, sp(), &sc, a.distill_pairs, seed(6))?;
        compiled.save(&a.out.join(COMPILED_FILE))?;
    }
    eprintln!("models written to {}", a.out.display());
    Ok(())
}

fn reasoning_config(lambda: f64, n_samples: usize, seed: u64) -> ReasoningConfig {
    ReasoningConfig {
        lambda,
        n_samples,
        dedupe: false,
        seed,
    }
}

#[derive(Serialize)]
struct CandidateLine {
    index: usize,
    caption: String,
    log_p_s0: f64,
    log_p_l0: f64,
    score: f64,
    chosen: bool,
}

fn describe(a: DescribeArgs) -> Result<()> {
    let dir = match &a.spaces {
        Some(d) => d.clone(),
        None => a
            .checkpoint_s0
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let spaces = Arc::new(
        Spaces::load_dir(&dir)
            .with_context(|| format!("loading manifests from {}", dir.display()))?,
    );
    let s0 = Speaker::load_kind(&a.checkpoint_s0, spaces.clone(), SpeakerKind::Literal)?;
    let l0 = LiteralListener::load(&a.checkpoint_l0, spaces.clone())?;
    let mut scenes = Vec::new();
    for p in &a.scenes {
        scenes.extend(scenes_from(p)?);
    }
    let index = SceneIndex::new(&scenes);
    let pair = ResolvedPair::new(index.get(&a.target)?, index.get(&a.distractor)?, 1);
    let cfg = reasoning_config(a.reason.lambda, a.reason.samples, a.reason.seed);
    let reasoned = reason(&s0, &l0, &pair, &cfg)?;
    let mut out = std::io::stdout().lock();
    if a.verbose {
        for (k, c) in reasoned.candidates.iter().enumerate() {
            let line = CandidateLine {
                index: c.index,
                caption: spaces.vocab.decode(&c.tokens).join(" "),
                log_p_s0: c.log_p_s0,
                log_p_l0: c.log_p_l0,
                score: c.score,
                chosen: k == reasoned.chosen_at,
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
    }
    writeln!(out, "{}", spaces.vocab.decode(&reasoned.chosen).join(" "))?;
    Ok(())
}

fn captions(a: CaptionsArgs) -> Result<()> {
    let spaces = Arc::new(Spaces::load_dir(&a.models)?);
    let load = |file: &str, kind| Speaker::load_kind(&a.models.join(file), spaces.clone(), kind);
    let scenes = scenes_from(&a.scenes)?;
    let index = SceneIndex::new(&scenes);
    let pairs = read_pairs(BufReader::new(fs::File::open(&a.pairs)?))?;
    let s0;
    let l0;
    let other;
    let reasoning;
    let speaker: &dyn PairSpeaker = match a.speaker {
        SpeakerName::Reasoning => {
            s0 = load(S0_FILE, SpeakerKind::Literal)?;
            l0 = LiteralListener::load(&a.models.join(L0_FILE), spaces.clone())?;
            reasoning = ReasoningSpeaker {
                s0: &s0,
                l0: &l0,
                config: reasoning_config(a.reason.lambda, a.reason.samples, 0),
            };
            &reasoning
        }
        name => {
            let (file, kind) = match name {
                SpeakerName::Literal => (S0_FILE, SpeakerKind::Literal),
                SpeakerName::Contrastive => (CONTRASTIVE_FILE, SpeakerKind::Contrastive),
                SpeakerName::Compiled => (COMPILED_FILE, SpeakerKind::Compiled),
                _ => (HAND_FILE, SpeakerKind::HandEngineered),
            };
            other = load(file, kind)?;
            &other
        }
    };
    let lines = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let pair = index.resolve(p)?;
            let tokens = speaker.describe(
                pair.target,
                pair.distractor,
                derive_seed(a.reason.seed, i as u64),
            )?;
            Ok(PairCaption {
                pair_index: i,
                target: p.target.clone(),
                distractor: p.distractor.clone(),
                caption: spaces.vocab.decode(&tokens),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = create(&a.out)?;
    write_captions(&mut out, &lines)?;
    out.flush()?;
    eprintln!(
        "{} captions from {} in {}",
        lines.len(),
        speaker.name(),
        a.out.display()
    );
    Ok(())
}

fn experiment_of(name: ExperimentName) -> Experiment {
    match name {
        ExperimentName::Samples => Experiment::samples(),
        ExperimentName::Lambda => Experiment::lambda(),
        ExperimentName::Final => Experiment::Final,
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let config = match value.get("config") {
        Some(c) if value.get("evaluation").is_some() => c.clone(),
        _ => value,
    };
    Ok(serde_json::from_value(config)?)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let mut config = match &a.config {
        Some(p) => read_config(p)?,
        None => ExperimentConfig::desk(a.seed, Experiment::Final),
    };
    if let Some(name) = a.experiment {
        let wanted = experiment_of(name);
        if wanted.name() != config.experiment.name() {
            config.experiment = wanted;
        }
    }
    let report = run_experiment(&config)?;
    let json = report.to_json()?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("report-{}.json", config.experiment.name())));
    let mut f = create(&out)?;
    f.write_all(json.as_bytes())?;
    f.flush()?;
    print!("{}", render_table(&report));
    println!("report written to {}", out.display());
    if let Some(p) = &a.expect {
        let previous = fs::read_to_string(p)?;
        if previous != json {
            bail!("report differs from {}", p.display());
        }
        println!("report is identical to {}", p.display());
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
