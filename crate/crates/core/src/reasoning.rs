//! The reasoning speaker: sample captions from a literal speaker, rescore
//! them with a literal listener, keep the best. Also an exhaustive oracle
//! that maximizes the same score over every short string.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{sample_speaker, AgentError, LiteralListener, PairSpeaker, Speaker};
use crate::corpus::{ResolvedPair, Scene};
use crate::features::Vocabulary;
use crate::netmod::History;

/// Largest number of strings the oracle will score.
pub const ORACLE_BUDGET: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("bad reasoning config: {0}")]
    Config(String),
    #[error("{strings} strings exceed the enumeration budget of {limit}")]
    Budget { strings: String, limit: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
}

impl From<crate::netmod::NetError> for ReasoningError {
    fn from(e: crate::netmod::NetError) -> Self {
        ReasoningError::Agent(e.into())
    }
}

pub type Result<T, E = ReasoningError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReasoningConfig {
    /// Weight of the speaker term; the listener term gets `1 − lambda`.
    pub lambda: f64,
    pub n_samples: usize,
    /// Collapse repeated samples before scoring.
    pub dedupe: bool,
    pub seed: u64,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        ReasoningConfig {
            lambda: 0.02,
            n_samples: 100,
            dedupe: false,
            seed: 0,
        }
    }
}

impl ReasoningConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.n_samples == 0 {
            return Err(ReasoningError::Config(
                "n_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(ReasoningError::Config(format!(
            "lambda {lambda} outside [0, 1]"
        )))
    }
}

/// A sampled caption with both model scores, before weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Position in the sample stream.
    pub index: usize,
    pub tokens: Vec<u32>,
    pub log_p_s0: f64,
    /// Log-probability that the listener picks the target.
    pub log_p_l0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub index: usize,
    pub tokens: Vec<u32>,
    pub log_p_s0: f64,
    pub log_p_l0: f64,
    pub score: f64,
}

/// `λ·log p_S0 + (1−λ)·log p_L0`. A term with zero weight is dropped so a
/// string the other model rules out cannot turn the sum into NaN.
pub fn combined_score(lambda: f64, log_p_s0: f64, log_p_l0: f64) -> f64 {
    if lambda == 0.0 {
        log_p_l0
    } else if lambda == 1.0 {
        log_p_s0
    } else {
        lambda * log_p_s0 + (1.0 - lambda) * log_p_l0
    }
}

impl Candidate {
    pub fn scored(&self, lambda: f64) -> ScoredCandidate {
        ScoredCandidate {
            index: self.index,
            tokens: self.tokens.clone(),
            log_p_s0: self.log_p_s0,
            log_p_l0: self.log_p_l0,
            score: combined_score(lambda, self.log_p_s0, self.log_p_l0),
        }
    }
}

/// Listener log-probabilities of the target slot for many captions, with
/// both scene embeddings computed once.
pub fn listener_scores(
    l0: &LiteralListener,
    pair: &ResolvedPair,
    captions: &[Vec<u32>],
) -> Result<Vec<f64>> {
    let (r1, r2) = pair.slots();
    let e1 = l0.embed_referent(r1)?;
    let e2 = l0.embed_referent(r2)?;
    let slot = pair.target_slot;
    captions
        .par_iter()
        .map(|tokens| {
            let ed = l0.embed_description(tokens)?;
            let (a, b) = l0.log_probs_embedded(&e1, &e2, &ed)?;
            Ok(if slot == 1 { a } else { b })
        })
        .collect()
}

/// Draw `n` captions for the target alone and score them with both models.
/// The first `k` candidates of a draw are the candidates of a draw of size
/// `k` with the same seed.
pub fn draw_candidates(
    s0: &Speaker,
    l0: &LiteralListener,
    pair: &ResolvedPair,
    n: usize,
    seed: u64,
) -> Result<Vec<Candidate>> {
    let samples = sample_speaker(s0, pair.target, n, seed)?;
    let captions: Vec<Vec<u32>> = samples.iter().map(|(t, _)| t.clone()).collect();
    let l0_scores = listener_scores(l0, pair, &captions)?;
    Ok(samples
        .into_iter()
        .zip(l0_scores)
        .enumerate()
        .map(|(index, ((tokens, log_p_s0), log_p_l0))| Candidate {
            index,
            tokens,
            log_p_s0,
            log_p_l0,
        })
        .collect())
}

/// Keep the first occurrence of every token sequence.
pub fn dedupe(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut seen = std::collections::HashSet::new();
    candidates
        .iter()
        .filter(|c| seen.insert(c.tokens.as_slice()))
        .cloned()
        .collect()
}

/// Position of the highest score; the earliest wins ties and NaN never wins.
pub fn argmax(scored: &[ScoredCandidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in scored.iter().enumerate() {
        match best {
            None if !c.score.is_nan() => best = Some(i),
            Some(b) if c.score > scored[b].score => best = Some(i),
            _ => {}
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reasoned {
    pub chosen: Vec<u32>,
    /// Position of the chosen caption in `candidates`.
    pub chosen_at: usize,
    pub candidates: Vec<ScoredCandidate>,
}

impl Reasoned {
    pub fn chosen_candidate(&self) -> &ScoredCandidate {
        &self.candidates[self.chosen_at]
    }
}

/// Weight and select among already drawn candidates.
pub fn select(candidates: &[Candidate], lambda: f64, dedupe_first: bool) -> Result<Reasoned> {
    check_lambda(lambda)?;
    let pool = if dedupe_first {
        dedupe(candidates)
    } else {
        candidates.to_vec()
    };
    let scored: Vec<ScoredCandidate> = pool.iter().map(|c| c.scored(lambda)).collect();
    let chosen_at = argmax(&scored)
        .ok_or_else(|| ReasoningError::Config("no candidate with a defined score".into()))?;
    Ok(Reasoned {
        chosen: scored[chosen_at].tokens.clone(),
        chosen_at,
        candidates: scored,
    })
}

/// Sample, score, select.
pub fn reason(
    s0: &Speaker,
    l0: &LiteralListener,
    pair: &ResolvedPair,
    cfg: &ReasoningConfig,
) -> Result<Reasoned> {
    cfg.validate()?;
    let candidates = draw_candidates(s0, l0, pair, cfg.n_samples, cfg.seed)?;
    select(&candidates, cfg.lambda, cfg.dedupe)
}

/// The reasoning speaker's caption for `target` shown next to `distractor`.
pub fn describe_in_context(
    s0: &Speaker,
    l0: &LiteralListener,
    target: &Scene,
    distractor: &Scene,
    cfg: &ReasoningConfig,
) -> Result<Vec<u32>> {
    Ok(reason(s0, l0, &ResolvedPair::new(target, distractor, 1), cfg)?.chosen)
}

/// Number of strings of length at most `max_len` over `alphabet_size`
/// symbols, or `None` on overflow.
pub fn string_count(alphabet_size: usize, max_len: usize) -> Option<usize> {
    let mut total: usize = 1;
    let mut layer: usize = 1;
    for _ in 0..max_len {
        layer = layer.checked_mul(alphabet_size)?;
        total = total.checked_add(layer)?;
    }
    Some(total)
}

fn check_budget(alphabet_size: usize, max_len: usize) -> Result<()> {
    match string_count(alphabet_size, max_len) {
        Some(n) if n <= ORACLE_BUDGET => Ok(()),
        n => Err(ReasoningError::Budget {
            strings: n.map_or_else(|| "too many".to_string(), |n| n.to_string()),
            limit: ORACLE_BUDGET,
        }),
    }
}

/// Every string over `alphabet` of length at most `max_len`, in
/// lexicographic order (the empty string first).
pub fn enumerate_strings(alphabet: &[u32], max_len: usize) -> Result<Vec<Vec<u32>>> {
    check_budget(alphabet.len(), max_len)?;
    let mut sorted = alphabet.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    fn walk(alphabet: &[u32], max_len: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        out.push(prefix.clone());
        if prefix.len() == max_len {
            return;
        }
        for &a in alphabet {
            prefix.push(a);
            walk(alphabet, max_len, prefix, out);
            prefix.pop();
        }
    }
    walk(&sorted, max_len, &mut prefix, &mut out);
    Ok(out)
}

/// Tokens a speaker can emit: everything but BOS and EOS.
pub fn emittable_tokens(vocab_size: usize) -> Vec<u32> {
    (0..vocab_size as u32)
        .filter(|&t| t != Vocabulary::BOS && t != Vocabulary::EOS)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub argmax: Vec<u32>,
    pub score: f64,
    /// One entry per string, in lexicographic order; `index` is the position.
    pub table: Vec<ScoredCandidate>,
}

/// Exact maximization of the combined score over every string of length at
/// most `max_len`. S0 probabilities are those of the speaker's own
/// length-capped sampler. Ties go to the lexicographically smallest string.
pub fn exhaustive_oracle(
    s0: &Speaker,
    l0: &LiteralListener,
    pair: &ResolvedPair,
    lambda: f64,
    max_len: usize,
) -> Result<OracleResult> {
    check_lambda(lambda)?;
    if s0.kind().uses_distractor() {
        return Err(AgentError::NeedsDistractor(s0.kind().name()).into());
    }
    let vocab = s0.spaces().vocab.len();
    let alphabet = emittable_tokens(vocab);
    check_budget(alphabet.len(), max_len)?;

    // one describer step per prefix, accumulated in the sampler's order
    let ctx = s0.context(pair.target, None)?;
    let cap = s0.max_len();
    let mut strings: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), History::default(), 0.0f64)];
    while let Some((prefix, history, lp)) = stack.pop() {
        // past the cap every probability is already zero
        let step = if prefix.len() < cap {
            Some(ctx.step(&history)?)
        } else {
            None
        };
        let end = match &step {
            Some(s) => lp + s[Vocabulary::EOS as usize],
            None => lp,
        };
        if prefix.len() < max_len {
            for &a in alphabet.iter().rev() {
                let mut p = prefix.clone();
                p.push(a);
                let mut h = history.clone();
                h.push(a);
                let next = step
                    .as_ref()
                    .map_or(f64::NEG_INFINITY, |s| lp + s[a as usize]);
                stack.push((p, h, next));
            }
        }
        strings.push((prefix, end));
    }

    let captions: Vec<Vec<u32>> = strings.iter().map(|(t, _)| t.clone()).collect();
    let l0_scores = listener_scores(l0, pair, &captions)?;
    let table: Vec<ScoredCandidate> = strings
        .into_iter()
        .zip(l0_scores)
        .enumerate()
        .map(|(index, ((tokens, log_p_s0), log_p_l0))| ScoredCandidate {
            index,
            tokens,
            log_p_s0,
            log_p_l0,
            score: combined_score(lambda, log_p_s0, log_p_l0),
        })
        .collect();
    let best = argmax(&table)
        .ok_or_else(|| ReasoningError::Config("no string with a defined score".into()))?;
    Ok(OracleResult {
        argmax: table[best].tokens.clone(),
        score: table[best].score,
        table,
    })
}

/// The reasoning speaker as a game player. The seed of each call replaces
/// the config seed.
#[derive(Debug, Clone, Copy)]
pub struct ReasoningSpeaker<'a> {
    pub s0: &'a Speaker,
    pub l0: &'a LiteralListener,
    pub config: ReasoningConfig,
}

impl PairSpeaker for ReasoningSpeaker<'_> {
    fn name(&self) -> &str {
        "reasoning"
    }

    fn describe(
        &self,
        target: &Scene,
        distractor: &Scene,
        seed: u64,
    ) -> crate::agents::Result<Vec<u32>> {
        let cfg = ReasoningConfig {
            seed,
            ..self.config
        };
        describe_in_context(self.s0, self.l0, target, distractor, &cfg).map_err(|e| match e {
            ReasoningError::Agent(a) => a,
            other => AgentError::Invalid(other.to_string()),
        })
    }
}

#[cfg(test)]
mod tests;
