//! Simulated reference games and the experiment suite built on them.

mod pipeline;
mod report;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, LiteralListener, PairSpeaker, Speaker};
use crate::corpus::{count_differences, CorpusError, GamePair, ResolvedPair};
use crate::derive_seed;
use crate::features::FeatureError;
use crate::reasoning::{draw_candidates, select, ReasoningError};

pub use pipeline::{
    run_experiment, CorpusSource, EvalSplit, Experiment, ExperimentConfig, Workbench,
};
pub use report::{pooled_by_difference, render_table, wilson_interval, ExperimentReport, Gate};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// A literal listener kept apart from every model a speaker reasons with.
#[derive(Debug, Clone)]
pub struct EvalListener {
    listener: LiteralListener,
}

impl EvalListener {
    pub fn new(listener: LiteralListener) -> Self {
        EvalListener { listener }
    }

    pub fn listener(&self) -> &LiteralListener {
        &self.listener
    }

    pub fn param_hash(&self) -> String {
        self.listener.params().content_hash()
    }

    /// Slot the listener picks for a caption: the more probable one, slot 1
    /// on a tie.
    pub fn choose(&self, tokens: &[u32], pair: &ResolvedPair) -> Result<u8> {
        let (r1, r2) = pair.slots();
        let (lp1, lp2) = self.listener.log_probs(tokens, r1, r2)?;
        Ok(if lp1 >= lp2 { 1 } else { 2 })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Game {
    pub tokens: Vec<u32>,
    pub choice: u8,
    pub correct: bool,
}

/// One round: the speaker describes the target, the listener picks a slot.
pub fn simulate_game(
    speaker: &dyn PairSpeaker,
    listener: &EvalListener,
    pair: &ResolvedPair,
    seed: u64,
) -> Result<Game> {
    let tokens = speaker.describe(pair.target, pair.distractor, seed)?;
    let choice = listener.choose(&tokens, pair)?;
    Ok(Game {
        tokens,
        choice,
        correct: choice == pair.target_slot,
    })
}

/// Seed handed to the speaker for pair `index`.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub speaker: String,
    /// Pair set the record belongs to ("all" or "hard").
    pub pairs: String,
    /// Experiment-specific setting, e.g. a sample count or λ; empty if none.
    pub setting: String,
    pub pair_index: usize,
    pub pair: GamePair,
    pub caption: Vec<String>,
    pub choice: u8,
    pub correct: bool,
    /// Seed the caption was produced with: `derive_seed(run seed, pair_index)`.
    pub seed: u64,
    pub fluency: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl Tally {
    fn of<'a, I: IntoIterator<Item = &'a GameRecord>>(records: I) -> Tally {
        let (mut n, mut correct) = (0, 0);
        for r in records {
            n += 1;
            correct += r.correct as usize;
        }
        Tally {
            n,
            correct,
            accuracy: if n == 0 {
                0.0
            } else {
                correct as f64 / n as f64
            },
        }
    }
}

/// Aggregate over the records sharing (speaker, pairs, setting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub speaker: String,
    pub pairs: String,
    pub setting: String,
    pub tally: Tally,
    /// 95% Wilson interval on the accuracy.
    pub interval: (f64, f64),
    pub fluency: Option<f64>,
    /// Accuracy by number of differences between the scenes.
    pub by_difference: BTreeMap<usize, Tally>,
}

/// Records plus their summaries, in the order the conditions were run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub summaries: Vec<Summary>,
    pub records: Vec<GameRecord>,
}

impl Evaluation {
    fn push(&mut self, records: Vec<GameRecord>) {
        let Some(first) = records.first() else {
            return;
        };
        let mut by_difference: BTreeMap<usize, Vec<&GameRecord>> = BTreeMap::new();
        for r in &records {
            by_difference
                .entry(r.pair.n_differences)
                .or_default()
                .push(r);
        }
        let tally = Tally::of(&records);
        let fluency = if records.iter().all(|r| r.fluency.is_some()) {
            Some(records.iter().filter_map(|r| r.fluency).sum::<f64>() / records.len() as f64)
        } else {
            None
        };
        self.summaries.push(Summary {
            speaker: first.speaker.clone(),
            pairs: first.pairs.clone(),
            setting: first.setting.clone(),
            tally,
            interval: wilson_interval(tally.correct, tally.n, 1.96),
            fluency,
            by_difference: by_difference
                .into_iter()
                .map(|(k, v)| (k, Tally::of(v)))
                .collect(),
        });
        self.records.extend(records);
    }

    pub fn find(&self, speaker: &str, pairs: &str, setting: &str) -> Option<&Summary> {
        self.summaries
            .iter()
            .find(|s| s.speaker == speaker && s.pairs == pairs && s.setting == setting)
    }

    pub fn accuracy(&self, speaker: &str, pairs: &str, setting: &str) -> Option<f64> {
        self.find(speaker, pairs, setting).map(|s| s.tally.accuracy)
    }
}

/// Pairs with their set name ("all" or "hard").
#[derive(Debug, Clone, Copy)]
pub struct PairSet<'p, 'a> {
    pub name: &'p str,
    pub pairs: &'p [ResolvedPair<'a>],
}

fn game_pair(p: &ResolvedPair) -> GamePair {
    GamePair {
        target: p.target.id.clone(),
        distractor: p.distractor.id.clone(),
        target_slot: p.target_slot,
        n_differences: count_differences(p.target, p.distractor),
    }
}

struct Context<'a> {
    listener: &'a EvalListener,
    lm: Option<&'a Speaker>,
}

impl Context<'_> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        speaker: &str,
        set: &str,
        setting: &str,
        index: usize,
        pair: &ResolvedPair,
        tokens: Vec<u32>,
        seed: u64,
    ) -> Result<GameRecord> {
        let choice = self.listener.choose(&tokens, pair)?;
        let fluency = match self.lm {
            Some(lm) => Some(lm.per_token_log_likelihood(&tokens, pair.target, None)?),
            None => None,
        };
        let vocab = &self.listener.listener().spaces().vocab;
        Ok(GameRecord {
            speaker: speaker.to_string(),
            pairs: set.to_string(),
            setting: setting.to_string(),
            pair_index: index,
            pair: game_pair(pair),
            caption: vocab.decode(&tokens),
            choice,
            correct: choice == pair.target_slot,
            seed,
            fluency,
        })
    }
}

/// Reasoning-speaker accuracy for each sample count. Candidate sets are
/// nested: the set for a smaller count is a prefix of the set for a larger.
#[allow(clippy::too_many_arguments)]
pub fn run_sample_curve(
    pairs: PairSet,
    s0: &Speaker,
    l0: &LiteralListener,
    listener: &EvalListener,
    lambda: f64,
    sample_counts: &[usize],
    lm: Option<&Speaker>,
    seed: u64,
) -> Result<Evaluation> {
    let Some(&most) = sample_counts.iter().max() else {
        return Err(HarnessError::Config("no sample counts".into()));
    };
    if sample_counts.contains(&0) {
        return Err(HarnessError::Config(
            "sample counts must be positive".into(),
        ));
    }
    let ctx = Context { listener, lm };
    let per_pair: Vec<Vec<GameRecord>> = pairs
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let s = pair_seed(seed, i);
            let cands = draw_candidates(s0, l0, pair, most, s)?;
            sample_counts
                .iter()
                .map(|&n| {
                    let chosen = select(&cands[..n], lambda, false)?.chosen;
                    ctx.record(
                        "reasoning",
                        pairs.name,
                        &format!("n={n}"),
                        i,
                        pair,
                        chosen,
                        s,
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(collate(per_pair, sample_counts.len()))
}

/// Post-hoc λ sweep: one candidate draw per pair, rescored for every λ.
#[allow(clippy::too_many_arguments)]
pub fn run_lambda_sweep(
    pairs: PairSet,
    s0: &Speaker,
    l0: &LiteralListener,
    listener: &EvalListener,
    lambdas: &[f64],
    n_samples: usize,
    lm: &Speaker,
    seed: u64,
) -> Result<Evaluation> {
    if lambdas.is_empty() || n_samples == 0 {
        return Err(HarnessError::Config(
            "need at least one λ and one sample".into(),
        ));
    }
    let ctx = Context {
        listener,
        lm: Some(lm),
    };
    let per_pair: Vec<Vec<GameRecord>> = pairs
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let s = pair_seed(seed, i);
            let cands = draw_candidates(s0, l0, pair, n_samples, s)?;
            lambdas
                .iter()
                .map(|&lambda| {
                    let chosen = select(&cands, lambda, false)?.chosen;
                    ctx.record(
                        "reasoning",
                        pairs.name,
                        &lambda_setting(lambda),
                        i,
                        pair,
                        chosen,
                        s,
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(collate(per_pair, lambdas.len()))
}

pub fn lambda_setting(lambda: f64) -> String {
    format!("lambda={lambda}")
}

/// Every speaker on every pair set. Within a set, all speakers get the same
/// seed for the same pair.
pub fn run_final_comparison(
    sets: &[PairSet],
    speakers: &[&dyn PairSpeaker],
    listener: &EvalListener,
    lm: Option<&Speaker>,
    seed: u64,
) -> Result<Evaluation> {
    let ctx = Context { listener, lm };
    let mut eval = Evaluation::default();
    for (k, set) in sets.iter().enumerate() {
        let set_seed = derive_seed(seed, k as u64);
        for speaker in speakers {
            let records = set
                .pairs
                .par_iter()
                .enumerate()
                .map(|(i, pair)| {
                    let s = pair_seed(set_seed, i);
                    let tokens = speaker.describe(pair.target, pair.distractor, s)?;
                    ctx.record(speaker.name(), set.name, "", i, pair, tokens, s)
                })
                .collect::<Result<Vec<_>>>()?;
            eval.push(records);
        }
    }
    Ok(eval)
}

/// Regroup per-pair record lists (one record per condition) by condition.
fn collate(per_pair: Vec<Vec<GameRecord>>, n_conditions: usize) -> Evaluation {
    let mut by_condition: Vec<Vec<GameRecord>> = vec![Vec::new(); n_conditions];
    for records in per_pair {
        for (c, r) in records.into_iter().enumerate() {
            by_condition[c].push(r);
        }
    }
    let mut eval = Evaluation::default();
    for records in by_condition {
        eval.push(records);
    }
    eval
}
