use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_shape, checkpoint_for, optimize, read_checkpoint, space_hashes, write_checkpoint,
    AgentError, PairSpeaker, Plan, Result, TrainConfig, TrainTrace,
};
use crate::corpus::{build_pairs, PairMode, Scene};
use crate::derive_seed;
use crate::diffgraph::{Checkpoint, NodeId, ParamId, ParamSet, Tape};
use crate::features::{featurize_difference, FeatureVector, Spaces};
use crate::netmod::{
    encode_on, sequence_logprob_on, DescriberContext, DescriberIds, DescriberParams, W1, W6, W7,
};

/// What a describer is conditioned on, and how it was trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeakerKind {
    /// `W1 f(target)`, maximum likelihood.
    Literal,
    /// `W1 f(target)`, likelihood with a hinge penalty against a distractor.
    Contrastive,
    /// `W1 f_diff(target, distractor)`: features of target objects whose kind
    /// is absent from the distractor.
    HandEngineered,
    /// `[W1 f(target), W1 f(distractor)]`, distilled from a pair speaker.
    Compiled,
    /// No conditioning at all.
    LanguageModel,
}

impl SpeakerKind {
    pub const ALL: [SpeakerKind; 5] = [
        SpeakerKind::Literal,
        SpeakerKind::Contrastive,
        SpeakerKind::HandEngineered,
        SpeakerKind::Compiled,
        SpeakerKind::LanguageModel,
    ];

    /// Checkpoint kind tag.
    pub fn tag(self) -> &'static str {
        match self {
            SpeakerKind::Literal => "S0",
            SpeakerKind::Contrastive => "S0-contrastive",
            SpeakerKind::HandEngineered => "S0-diff",
            SpeakerKind::Compiled => "S0c",
            SpeakerKind::LanguageModel => "LM",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    /// Display name used in reports.
    pub fn name(self) -> &'static str {
        match self {
            SpeakerKind::Literal => "literal",
            SpeakerKind::Contrastive => "contrastive",
            SpeakerKind::HandEngineered => "hand-engineered",
            SpeakerKind::Compiled => "compiled",
            SpeakerKind::LanguageModel => "language-model",
        }
    }

    pub fn uses_distractor(self) -> bool {
        matches!(self, SpeakerKind::HandEngineered | SpeakerKind::Compiled)
    }

    fn context_dim(self, embed: usize) -> usize {
        match self {
            SpeakerKind::LanguageModel => 0,
            SpeakerKind::Compiled => 2 * embed,
            _ => embed,
        }
    }
}

/// Referent input to a describer before encoding.
#[derive(Debug, Clone)]
enum Cond {
    Empty,
    One(FeatureVector),
    Two(FeatureVector, FeatureVector),
}

fn condition(
    kind: SpeakerKind,
    spaces: &Spaces,
    target: &Scene,
    distractor: Option<&Scene>,
) -> Result<Cond> {
    let need = || distractor.ok_or(AgentError::NeedsDistractor(kind.name()));
    Ok(match kind {
        SpeakerKind::LanguageModel => Cond::Empty,
        SpeakerKind::Literal | SpeakerKind::Contrastive => Cond::One(spaces.referent(target)),
        SpeakerKind::HandEngineered => {
            Cond::One(featurize_difference(target, need()?, &spaces.referent))
        }
        SpeakerKind::Compiled => Cond::Two(spaces.referent(target), spaces.referent(need()?)),
    })
}

fn embed_fast(params: &ParamSet, cond: &Cond) -> Result<Vec<f64>> {
    let encode = |f: &FeatureVector| -> Result<Vec<f64>> {
        let w1 = params.by_name(W1)?;
        let mut v = vec![0.0; w1.rows()];
        w1.add_columns(&f.indices, &mut v);
        Ok(v)
    };
    Ok(match cond {
        Cond::Empty => Vec::new(),
        Cond::One(f) => encode(f)?,
        Cond::Two(a, b) => {
            let mut v = encode(a)?;
            v.extend(encode(b)?);
            v
        }
    })
}

fn embed_on(tape: &mut Tape, w1: Option<ParamId>, cond: &Cond) -> Result<NodeId> {
    let w1 = || w1.ok_or_else(|| AgentError::Invalid("describer has no W1".into()));
    Ok(match cond {
        Cond::Empty => tape.input(Vec::new())?,
        Cond::One(f) => encode_on(tape, w1()?, f)?,
        Cond::Two(a, b) => {
            let ea = encode_on(tape, w1()?, a)?;
            let eb = encode_on(tape, w1()?, b)?;
            tape.concat(&[ea, eb])?
        }
    })
}

/// A describer-based speaker.
#[derive(Debug, Clone)]
pub struct Speaker {
    kind: SpeakerKind,
    params: ParamSet,
    spaces: Arc<Spaces>,
    max_len: usize,
    trace: TrainTrace,
}

fn speaker_shapes(
    kind: SpeakerKind,
    spaces: &Spaces,
    embed: usize,
    hidden: usize,
) -> Vec<(&'static str, usize, usize)> {
    let v = spaces.vocab.len();
    let mut shapes = Vec::new();
    if kind != SpeakerKind::LanguageModel {
        shapes.push((W1, embed, spaces.referent.dim()));
    }
    shapes.push((W6, v - 1, hidden));
    shapes.push((W7, hidden, 2 * v + kind.context_dim(embed)));
    shapes
}

impl Speaker {
    pub fn kind(&self) -> SpeakerKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn spaces(&self) -> &Arc<Spaces> {
        &self.spaces
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn trace(&self) -> &TrainTrace {
        &self.trace
    }

    /// The conditioning embedding for a target (and distractor, for the
    /// pair-aware kinds; ignored otherwise).
    pub fn embed(&self, target: &Scene, distractor: Option<&Scene>) -> Result<Vec<f64>> {
        embed_fast(
            &self.params,
            &condition(self.kind, &self.spaces, target, distractor)?,
        )
    }

    fn describer(&self) -> Result<DescriberParams<'_>> {
        Ok(DescriberParams::from_params(&self.params)?)
    }

    pub fn context(
        &self,
        target: &Scene,
        distractor: Option<&Scene>,
    ) -> Result<DescriberContext<'_>> {
        Ok(self
            .describer()?
            .context(&self.embed(target, distractor)?)?)
    }

    /// `n` ancestral samples (tokens without EOS) with their log-probabilities
    /// under the length-capped distribution. Sample `k` of a run with `n`
    /// equals sample `k` of any longer run with the same seed.
    pub fn sample(
        &self,
        target: &Scene,
        distractor: Option<&Scene>,
        n: usize,
        seed: u64,
    ) -> Result<Vec<(Vec<u32>, f64)>> {
        let ctx = self.context(target, distractor)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Ok(ctx.sample(self.max_len, &mut rng)?))
            .collect()
    }

    /// Log-probability of `tokens` under the length-capped sampler.
    pub fn log_prob(
        &self,
        tokens: &[u32],
        target: &Scene,
        distractor: Option<&Scene>,
    ) -> Result<f64> {
        Ok(self
            .context(target, distractor)?
            .capped_logprob(tokens, self.max_len)?)
    }

    /// Mean log-probability per token, EOS included, without the length cap.
    pub fn per_token_log_likelihood(
        &self,
        tokens: &[u32],
        target: &Scene,
        distractor: Option<&Scene>,
    ) -> Result<f64> {
        let lp = self.context(target, distractor)?.sequence_logprob(tokens)?;
        Ok(lp / (tokens.len() + 1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        checkpoint_for(
            self.kind.tag(),
            &self.spaces,
            &self.params,
            Some(self.max_len),
        )
    }

    pub fn from_checkpoint(ck: Checkpoint, spaces: Arc<Spaces>) -> Result<Self> {
        let kind = SpeakerKind::from_tag(&ck.kind).ok_or_else(|| AgentError::WrongKind {
            expected: "a speaker".into(),
            found: ck.kind.clone(),
        })?;
        ck.validate(&space_hashes(&spaces))?;
        let max_len = ck
            .meta
            .get("max_len")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AgentError::Invalid("missing max_len".into()))?;
        let hidden = ck.params.by_name(W6)?.cols();
        let embed = match kind {
            SpeakerKind::LanguageModel => 0,
            _ => ck.params.by_name(W1)?.rows(),
        };
        let shapes = speaker_shapes(kind, &spaces, embed, hidden);
        if shapes.len() != ck.params.len() {
            return Err(AgentError::Invalid(format!(
                "{} parameters for a {} model",
                ck.params.len(),
                kind.tag()
            )));
        }
        for (name, r, c) in shapes {
            check_shape(&ck.params, name, (r, c))?;
        }
        Ok(Speaker {
            kind,
            params: ck.params,
            spaces,
            max_len,
            trace: TrainTrace::default(),
        })
    }

    /// Load a checkpoint and require a particular kind.
    pub fn load_kind(path: &Path, spaces: Arc<Spaces>, kind: SpeakerKind) -> Result<Self> {
        let s = Self::load(path, spaces)?;
        if s.kind != kind {
            return Err(AgentError::WrongKind {
                expected: kind.tag().into(),
                found: s.kind.tag().into(),
            });
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path, spaces: Arc<Spaces>) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?, spaces)
    }
}

/// A single sample: the literal speaker's (and every other describer's)
/// behaviour in the game.
impl PairSpeaker for Speaker {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn describe(&self, target: &Scene, distractor: &Scene, seed: u64) -> Result<Vec<u32>> {
        let mut s = self.sample(target, Some(distractor), 1, seed)?;
        Ok(s.pop().map(|(t, _)| t).unwrap_or_default())
    }
}

/// `n` samples from a target-conditioned speaker.
pub fn sample_speaker(s: &Speaker, r: &Scene, n: usize, seed: u64) -> Result<Vec<(Vec<u32>, f64)>> {
    if s.kind.uses_distractor() {
        return Err(AgentError::NeedsDistractor(s.kind.name()));
    }
    s.sample(r, None, n, seed)
}

/// Weights of the contrastive hinge penalty (`μ`, `M`); `μ = 0` for every
/// other speaker kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weight: f64,
    pub margin: f64,
}

impl Objective {
    pub fn from_config(config: &TrainConfig) -> Self {
        Objective {
            weight: config.contrastive_weight,
            margin: config.contrastive_margin,
        }
    }
}

/// Records one training example's objective for a describer of `kind`:
/// `log p(d | cond)`, minus `μ·max(0, log p(d|r′) − log p(d|r) + M)` for the
/// contrastive kind. `distractor` is the contrast scene (required by the
/// contrastive, hand-engineered and compiled kinds).
pub fn speaker_objective_on(
    tape: &mut Tape,
    kind: SpeakerKind,
    spaces: &Spaces,
    target: &Scene,
    distractor: Option<&Scene>,
    tokens: &[u32],
    weights: Objective,
) -> Result<NodeId> {
    let params = tape.params();
    let ids = DescriberIds::from_params(params)?;
    let w1 = params.id(W1).ok();
    let e = embed_on(tape, w1, &condition(kind, spaces, target, distractor)?)?;
    let lp = sequence_logprob_on(tape, ids, tokens, e)?;
    if kind != SpeakerKind::Contrastive {
        return Ok(lp);
    }
    let other = distractor.ok_or(AgentError::NeedsDistractor(kind.name()))?;
    let e2 = embed_on(tape, w1, &condition(kind, spaces, other, None)?)?;
    let lp2 = sequence_logprob_on(tape, ids, tokens, e2)?;
    let neg = tape.scale(lp, -1.0)?;
    let gap = tape.add(lp2, neg)?;
    let m = tape.input(vec![weights.margin])?;
    let gap = tape.add(gap, m)?;
    let hinge = tape.relu(gap)?;
    let penalty = tape.scale(hinge, -weights.weight)?;
    Ok(tape.add(lp, penalty)?)
}

/// Value of [`speaker_objective_on`] computed without a tape.
pub fn speaker_objective(
    params: &ParamSet,
    kind: SpeakerKind,
    spaces: &Spaces,
    target: &Scene,
    distractor: Option<&Scene>,
    tokens: &[u32],
    weights: Objective,
) -> Result<f64> {
    let dp = DescriberParams::from_params(params)?;
    let logp = |cond: &Cond| -> Result<f64> {
        Ok(dp
            .context(&embed_fast(params, cond)?)?
            .sequence_logprob(tokens)?)
    };
    let lp = logp(&condition(kind, spaces, target, distractor)?)?;
    if kind != SpeakerKind::Contrastive {
        return Ok(lp);
    }
    let other = distractor.ok_or(AgentError::NeedsDistractor(kind.name()))?;
    let lp2 = logp(&condition(kind, spaces, other, None)?)?;
    Ok(lp - weights.weight * (lp2 - lp + weights.margin).max(0.0))
}

struct Example {
    scene: usize,
    /// Fixed distractor (compiled speaker only).
    partner: Option<usize>,
    tokens: Vec<u32>,
}

fn caption_examples(scenes: &[Scene], spaces: &Spaces) -> Vec<Example> {
    let mut out = Vec::new();
    for (j, scene) in scenes.iter().enumerate() {
        for caption in &scene.captions {
            out.push(Example {
                scene: j,
                partner: None,
                tokens: spaces.vocab.encode(caption),
            });
        }
    }
    out
}

/// Held-out captions with their (fixed) conditioning.
fn heldout_examples(
    kind: SpeakerKind,
    heldout: &[Scene],
    spaces: &Spaces,
    seed: u64,
) -> Result<Vec<(Cond, Vec<u32>)>> {
    if kind == SpeakerKind::Compiled || (kind.uses_distractor() && heldout.len() < 2) {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let mut out = Vec::new();
    for (j, scene) in heldout.iter().enumerate() {
        for caption in &scene.captions {
            let distractor = if kind.uses_distractor() {
                let d = super::draw_distractors(&mut rng, &[j], heldout.len())[0];
                Some(&heldout[d])
            } else {
                None
            };
            out.push((
                condition(kind, spaces, scene, distractor)?,
                spaces.vocab.encode(caption),
            ));
        }
    }
    Ok(out)
}

fn train_describer(
    kind: SpeakerKind,
    scenes: &[Scene],
    examples: Vec<Example>,
    heldout: &[Scene],
    spaces: Arc<Spaces>,
    config: &TrainConfig,
    seed: u64,
) -> Result<Speaker> {
    let draws_distractors = matches!(kind, SpeakerKind::Contrastive | SpeakerKind::HandEngineered);
    if draws_distractors && scenes.len() < 2 {
        return Err(AgentError::TooFewScenes(2));
    }
    let held = heldout_examples(kind, heldout, &spaces, seed)?;
    let shapes = speaker_shapes(kind, &spaces, config.dims.embed, config.dims.hidden);
    let params = ParamSet::init(seed, &shapes)?;
    let weights = Objective::from_config(config);

    // the scene each example is contrasted with, if any
    let other = |ex: &Example, aux: Option<usize>| ex.partner.or(aux).map(|d| &scenes[d]);
    let loss = |tape: &mut Tape, i: usize, aux: Option<usize>| -> Result<NodeId> {
        let ex = &examples[i];
        speaker_objective_on(
            tape,
            kind,
            &spaces,
            &scenes[ex.scene],
            other(ex, aux),
            &ex.tokens,
            weights,
        )
    };
    let objective = |p: &ParamSet, monitor: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for (i, ex) in examples.iter().enumerate() {
            let d = other(ex, monitor.get(i).copied());
            total +=
                speaker_objective(p, kind, &spaces, &scenes[ex.scene], d, &ex.tokens, weights)?;
        }
        Ok(total / examples.len() as f64)
    };

    let heldout_ll = |p: &ParamSet| -> Result<Option<f64>> {
        if held.is_empty() {
            return Ok(None);
        }
        let dp = DescriberParams::from_params(p)?;
        let (mut lp, mut count) = (0.0, 0usize);
        for (cond, tokens) in &held {
            lp += dp
                .context(&embed_fast(p, cond)?)?
                .sequence_logprob(tokens)?;
            count += tokens.len() + 1;
        }
        Ok(Some(lp / count as f64))
    };

    let owners: Vec<usize> = examples.iter().map(|e| e.scene).collect();
    let plan = Plan {
        owners: &owners,
        n_scenes: scenes.len(),
        distractors: draws_distractors,
    };
    let (params, trace) = optimize(params, config, seed, plan, loss, objective, heldout_ll)?;
    Ok(Speaker {
        kind,
        params,
        spaces,
        max_len: config.max_len,
        trace,
    })
}

/// Maximum-likelihood literal speaker over every (scene, caption) pair.
/// `heldout` scenes are only used for the per-token log-likelihood trace.
pub fn train_speaker(
    train: &[Scene],
    heldout: &[Scene],
    spaces: Arc<Spaces>,
    config: &TrainConfig,
    seed: u64,
) -> Result<Speaker> {
    let examples = caption_examples(train, &spaces);
    train_describer(
        SpeakerKind::Literal,
        train,
        examples,
        heldout,
        spaces,
        config,
        seed,
    )
}

/// Literal speaker trained with a hinge penalty whenever a caption is at
/// least as likely (up to the margin) for a random distractor as for its own
/// scene.
pub fn train_contrastive_baseline(
    train: &[Scene],
    heldout: &[Scene],
    spaces: Arc<Spaces>,
    config: &TrainConfig,
    seed: u64,
) -> Result<Speaker> {
    let examples = caption_examples(train, &spaces);
    train_describer(
        SpeakerKind::Contrastive,
        train,
        examples,
        heldout,
        spaces,
        config,
        seed,
    )
}

/// Speaker conditioned on difference features of (scene, random distractor)
/// during training and (target, distractor) at inference.
pub fn hand_engineered_speaker(
    train: &[Scene],
    heldout: &[Scene],
    spaces: Arc<Spaces>,
    config: &TrainConfig,
    seed: u64,
) -> Result<Speaker> {
    let examples = caption_examples(train, &spaces);
    train_describer(
        SpeakerKind::HandEngineered,
        train,
        examples,
        heldout,
        spaces,
        config,
        seed,
    )
}

/// Unconditioned caption model, used to score fluency.
pub fn train_language_model(
    captions_from: &[Scene],
    heldout: &[Scene],
    spaces: Arc<Spaces>,
    config: &TrainConfig,
    seed: u64,
) -> Result<Speaker> {
    let examples = caption_examples(captions_from, &spaces);
    train_describer(
        SpeakerKind::LanguageModel,
        captions_from,
        examples,
        heldout,
        spaces,
        config,
        seed,
    )
}

/// Train a contrast-embedding speaker on captions the `teacher` produces for
/// `n_pairs` random training pairs (one caption each).
pub fn distill_compiled(
    teacher: &dyn PairSpeaker,
    train: &[Scene],
    spaces: Arc<Spaces>,
    config: &TrainConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<Speaker> {
    let pairs = build_pairs(train, PairMode::All, n_pairs, derive_seed(seed, 10))?;
    let index: HashMap<&str, usize> = train
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let teacher_seed = derive_seed(seed, 11);
    let examples = pairs
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let (t, d) = (index[p.target.as_str()], index[p.distractor.as_str()]);
            let tokens =
                teacher.describe(&train[t], &train[d], derive_seed(teacher_seed, k as u64))?;
            Ok(Example {
                scene: t,
                partner: Some(d),
                tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    train_describer(
        SpeakerKind::Compiled,
        train,
        examples,
        &[],
        spaces,
        config,
        seed,
    )
}
