use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::report::ExperimentReport;
use super::{
    run_final_comparison, run_lambda_sweep, run_sample_curve, EvalListener, HarnessError, PairSet,
    Result,
};
use crate::agents::{
    distill_compiled, hand_engineered_speaker, train_contrastive_baseline, train_language_model,
    train_listener, train_speaker, LiteralListener, PairSpeaker, Speaker, TrainConfig,
};
use crate::corpus::{
    build_pairs, generate_synthetic, load_corpus, split_corpus, CorpusFormat, CorpusSplit,
    GamePair, GeneratorConfig, HeldOutSizes, PairMode, ResolvedPair, Scene, SceneIndex,
};
use crate::derive_seed;
use crate::features::Spaces;
use crate::reasoning::{ReasoningConfig, ReasoningSpeaker};

// Seed streams derived from the experiment seed.
const STREAM_CORPUS: u64 = 20;
const STREAM_SPLIT: u64 = 21;
const STREAM_L0: u64 = 22;
const STREAM_EVAL: u64 = 23;
const STREAM_S0: u64 = 24;
const STREAM_CONTRASTIVE: u64 = 25;
const STREAM_HAND: u64 = 26;
const STREAM_LM: u64 = 27;
const STREAM_COMPILED: u64 = 28;
const STREAM_PAIRS_ALL: u64 = 29;
const STREAM_PAIRS_HARD: u64 = 30;
const STREAM_GAMES: u64 = 31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic { generator: GeneratorConfig },
    File { path: PathBuf, format: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Experiment {
    /// Reasoning-speaker accuracy against the number of samples.
    Samples { counts: Vec<usize>, pairs: PairMode },
    /// Accuracy and fluency against λ on one shared candidate draw.
    Lambda { lambdas: Vec<f64>, pairs: PairMode },
    /// Every speaker on both pair sets.
    Final,
}

impl Experiment {
    pub fn samples() -> Self {
        Experiment::Samples {
            counts: vec![1, 10, 100],
            pairs: PairMode::Hard,
        }
    }

    pub fn lambda() -> Self {
        Experiment::Lambda {
            lambdas: vec![0.0, 0.02, 0.1, 0.5, 1.0],
            pairs: PairMode::Hard,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Samples { .. } => "samples",
            Experiment::Lambda { .. } => "lambda",
            Experiment::Final => "final",
        }
    }
}

/// Everything needed to rebuild an experiment from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub held_out: HeldOutSizes,
    /// Held-out set the games are played on; the fluency model is trained
    /// on the captions of the other one.
    pub eval_split: EvalSplit,
    pub min_count: usize,
    pub listener: TrainConfig,
    pub speaker: TrainConfig,
    /// Pairs per pair set.
    pub n_pairs: usize,
    pub lambda: f64,
    pub n_samples: usize,
    /// Teacher captions the compiled speaker is trained on.
    pub distill_pairs: usize,
    pub experiment: Experiment,
}

impl ExperimentConfig {
    /// Desk-scale defaults on a synthetic corpus.
    pub fn desk(seed: u64, experiment: Experiment) -> Self {
        ExperimentConfig {
            seed,
            corpus: CorpusSource::Synthetic {
                generator: GeneratorConfig {
                    n_scenes: 1000,
                    ..GeneratorConfig::default()
                },
            },
            held_out: HeldOutSizes {
                dev: 300,
                test: 100,
            },
            eval_split: EvalSplit::Dev,
            min_count: 1,
            listener: TrainConfig::default(),
            speaker: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            n_pairs: 200,
            lambda: 0.02,
            n_samples: 100,
            distill_pairs: 2000,
            experiment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ReasoningConfig {
            lambda: self.lambda,
            n_samples: self.n_samples,
            dedupe: false,
            seed: 0,
        }
        .validate()?;
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        match &self.experiment {
            Experiment::Samples { counts, .. } if counts.is_empty() || counts.contains(&0) => {
                bad("sample counts must be positive and non-empty")
            }
            Experiment::Lambda { lambdas, .. }
                if lambdas.is_empty() || lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) =>
            {
                bad("lambdas must be non-empty and within [0, 1]")
            }
            _ if self.n_pairs == 0 => bad("n_pairs must be positive"),
            _ => Ok(()),
        }
    }
}

/// Corpus, split, trained models and pair sets of one experiment seed.
#[derive(Debug)]
pub struct Workbench {
    pub config: ExperimentConfig,
    pub split: CorpusSplit,
    pub spaces: Arc<Spaces>,
    pub l0: LiteralListener,
    pub eval: EvalListener,
    pub s0: Speaker,
    pub contrastive: Speaker,
    pub hand: Speaker,
    pub lm: Speaker,
    /// Only trained when asked for (the final comparison needs it).
    pub compiled: Option<Speaker>,
    pub pairs_all: Vec<GamePair>,
    pub pairs_hard: Vec<GamePair>,
}

fn load(config: &ExperimentConfig) -> Result<Vec<Scene>> {
    Ok(match &config.corpus {
        CorpusSource::Synthetic { generator } => {
            generate_synthetic(generator, derive_seed(config.seed, STREAM_CORPUS))?
        }
        CorpusSource::File { path, format } => {
            let format: CorpusFormat = format.parse()?;
            load_corpus(path, format)?
        }
    })
}

impl Workbench {
    pub fn build(config: &ExperimentConfig, with_compiled: bool) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let scenes = load(config)?;
        let split = split_corpus(&scenes, config.held_out, derive_seed(seed, STREAM_SPLIT))?;
        let spaces = Arc::new(Spaces::build(&split.train, config.min_count)?);
        let (eval_scenes, other) = match config.eval_split {
            EvalSplit::Dev => (&split.dev, &split.test),
            EvalSplit::Test => (&split.test, &split.dev),
        };
        let pairs_all = build_pairs(
            eval_scenes,
            PairMode::All,
            config.n_pairs,
            derive_seed(seed, STREAM_PAIRS_ALL),
        )?;
        let pairs_hard = build_pairs(
            eval_scenes,
            PairMode::Hard,
            config.n_pairs,
            derive_seed(seed, STREAM_PAIRS_HARD),
        )?;

        let train = &split.train;
        let sp = &config.speaker;
        let listener = |stream| {
            train_listener(
                train,
                spaces.clone(),
                &config.listener,
                derive_seed(seed, stream),
            )
        };
        let ((l0, eval), (s0, (contrastive, (hand, lm)))) = rayon::join(
            || rayon::join(|| listener(STREAM_L0), || listener(STREAM_EVAL)),
            || {
                rayon::join(
                    || {
                        train_speaker(
                            train,
                            other,
                            spaces.clone(),
                            sp,
                            derive_seed(seed, STREAM_S0),
                        )
                    },
                    || {
                        rayon::join(
                            || {
                                train_contrastive_baseline(
                                    train,
                                    other,
                                    spaces.clone(),
                                    sp,
                                    derive_seed(seed, STREAM_CONTRASTIVE),
                                )
                            },
                            || {
                                rayon::join(
                                    || {
                                        hand_engineered_speaker(
                                            train,
                                            other,
                                            spaces.clone(),
                                            sp,
                                            derive_seed(seed, STREAM_HAND),
                                        )
                                    },
                                    || {
                                        train_language_model(
                                            other,
                                            &[],
                                            spaces.clone(),
                                            sp,
                                            derive_seed(seed, STREAM_LM),
                                        )
                                    },
                                )
                            },
                        )
                    },
                )
            },
        );
        let mut bench = Workbench {
            config: config.clone(),
            spaces: spaces.clone(),
            l0: l0?,
            eval: EvalListener::new(eval?),
            s0: s0?,
            contrastive: contrastive?,
            hand: hand?,
            lm: lm?,
            compiled: None,
            pairs_all,
            pairs_hard,
            split,
        };
        if with_compiled {
            let teacher = bench.reasoning_speaker();
            let compiled = distill_compiled(
                &teacher,
                &bench.split.train,
                spaces,
                sp,
                config.distill_pairs,
                derive_seed(seed, STREAM_COMPILED),
            )?;
            bench.compiled = Some(compiled);
        }
        Ok(bench)
    }

    pub fn eval_scenes(&self) -> &[Scene] {
        match self.config.eval_split {
            EvalSplit::Dev => &self.split.dev,
            EvalSplit::Test => &self.split.test,
        }
    }

    pub fn pairs(&self, mode: PairMode) -> &[GamePair] {
        match mode {
            PairMode::All => &self.pairs_all,
            PairMode::Hard => &self.pairs_hard,
        }
    }

    pub fn resolve(&self, mode: PairMode) -> Result<Vec<ResolvedPair<'_>>> {
        let index = SceneIndex::new(self.eval_scenes());
        Ok(self
            .pairs(mode)
            .iter()
            .map(|p| index.resolve(p))
            .collect::<Result<_, _>>()?)
    }

    pub fn reasoning_speaker(&self) -> ReasoningSpeaker<'_> {
        ReasoningSpeaker {
            s0: &self.s0,
            l0: &self.l0,
            config: ReasoningConfig {
                lambda: self.config.lambda,
                n_samples: self.config.n_samples,
                dedupe: false,
                seed: 0,
            },
        }
    }

    /// Seed of the games on one pair set; shared by every experiment so the
    /// same pair sees the same samples throughout.
    fn games_seed(&self, mode: PairMode) -> u64 {
        let games = derive_seed(self.config.seed, STREAM_GAMES);
        match mode {
            PairMode::All => derive_seed(games, 0),
            PairMode::Hard => derive_seed(games, 1),
        }
    }

    pub fn run(&self, experiment: &Experiment) -> Result<ExperimentReport> {
        let config = ExperimentConfig {
            experiment: experiment.clone(),
            ..self.config.clone()
        };
        config.validate()?;
        let evaluation = match experiment {
            Experiment::Samples { counts, pairs } => {
                let resolved = self.resolve(*pairs)?;
                let name = pairs.to_string();
                run_sample_curve(
                    PairSet {
                        name: &name,
                        pairs: &resolved,
                    },
                    &self.s0,
                    &self.l0,
                    &self.eval,
                    self.config.lambda,
                    counts,
                    Some(&self.lm),
                    self.games_seed(*pairs),
                )?
            }
            Experiment::Lambda { lambdas, pairs } => {
                let resolved = self.resolve(*pairs)?;
                let name = pairs.to_string();
                run_lambda_sweep(
                    PairSet {
                        name: &name,
                        pairs: &resolved,
                    },
                    &self.s0,
                    &self.l0,
                    &self.eval,
                    lambdas,
                    self.config.n_samples,
                    &self.lm,
                    self.games_seed(*pairs),
                )?
            }
            Experiment::Final => {
                let compiled = self.compiled.as_ref().ok_or_else(|| {
                    HarnessError::Config("workbench was built without the compiled speaker".into())
                })?;
                let all = self.resolve(PairMode::All)?;
                let hard = self.resolve(PairMode::Hard)?;
                let reasoning = self.reasoning_speaker();
                let speakers: [&dyn PairSpeaker; 5] = [
                    &self.s0,
                    &self.contrastive,
                    &reasoning,
                    compiled,
                    &self.hand,
                ];
                let games = derive_seed(self.config.seed, STREAM_GAMES);
                run_final_comparison(
                    &[
                        PairSet {
                            name: "all",
                            pairs: &all,
                        },
                        PairSet {
                            name: "hard",
                            pairs: &hard,
                        },
                    ],
                    &speakers,
                    &self.eval,
                    Some(&self.lm),
                    games,
                )?
            }
        };
        let hashes = BTreeMap::from([
            ("reasoning".to_string(), self.l0.params().content_hash()),
            ("evaluation".to_string(), self.eval.param_hash()),
        ]);
        Ok(ExperimentReport::new(config, hashes, evaluation))
    }
}

/// Build everything the experiment needs from its config and run it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let with_compiled = matches!(config.experiment, Experiment::Final);
    Workbench::build(config, with_compiled)?.run(&config.experiment)
}
