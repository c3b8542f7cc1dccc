//! Trainable agents: the literal listener, the describer-based speakers
//! (literal, contrastive, hand-engineered, compiled, plain language model),
//! and the training loop they share.

mod listener;
mod speaker;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Scene};
use crate::derive_seed;
use crate::diffgraph::{Adagrad, AdagradConfig, Checkpoint, DiffError, NodeId, ParamSet, Tape};
use crate::features::{SpaceHash, Spaces};
use crate::netmod::{ModelDims, NetError, MAX_CAPTION_LEN};

pub use listener::{listener_objective_on, train_listener, LiteralListener};
pub use speaker::{
    distill_compiled, hand_engineered_speaker, sample_speaker, speaker_objective,
    speaker_objective_on, train_contrastive_baseline, train_language_model, train_speaker,
    Objective, Speaker, SpeakerKind,
};

pub const KIND_L0: &str = "L0";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("training needs at least {0} scenes")]
    TooFewScenes(usize),
    #[error("no training captions")]
    NoCaptions,
    #[error("training diverged in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: String, found: String },
    #[error("{0} speaker needs a distractor")]
    NeedsDistractor(&'static str),
    #[error("bad model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub epochs: usize,
    pub optimizer: AdagradConfig,
    /// Generation length cap; EOS is forced after this many tokens.
    pub max_len: usize,
    /// μ in `log p(d|r) − μ·max(0, log p(d|r′) − log p(d|r) + M)`.
    pub contrastive_weight: f64,
    /// M in the same objective.
    pub contrastive_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dims: ModelDims::default(),
            epochs: 20,
            optimizer: AdagradConfig::default(),
            max_len: MAX_CAPTION_LEN,
            contrastive_weight: 1.0,
            contrastive_margin: 0.0,
        }
    }
}

/// Per-epoch record of a training run. Index 0 is the untrained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean per-example training objective on a fixed monitoring draw.
    pub objective: Vec<f64>,
    /// Held-out per-token log-likelihood (speakers with held-out data only).
    pub heldout: Vec<f64>,
    /// Learning rate each epoch ran with.
    pub lr: Vec<f64>,
    /// Epochs whose update was undone because the objective went down.
    pub rolled_back: Vec<usize>,
}

/// Something that produces a caption for a target in the context of a
/// distractor.
pub trait PairSpeaker: Sync {
    fn name(&self) -> &str;
    fn describe(&self, target: &Scene, distractor: &Scene, seed: u64) -> Result<Vec<u32>>;
}

/// Objective below which an epoch's update is undone.
const DECREASE_TOLERANCE: f64 = 1e-6;

// Seed streams used by every training run.
const STREAM_ORDER: u64 = 1;
const STREAM_DISTRACTORS: u64 = 2;
const STREAM_MONITOR: u64 = 3;

/// For each example, a uniformly drawn scene index other than its own.
fn draw_distractors<R: Rng>(rng: &mut R, owners: &[usize], n_scenes: usize) -> Vec<usize> {
    owners
        .iter()
        .map(|&own| {
            let k = rng.random_range(0..n_scenes - 1);
            if k >= own {
                k + 1
            } else {
                k
            }
        })
        .collect()
}

/// Examples for one training run. `owners[i]` is the scene of example i;
/// when `distractors` is set a fresh distractor per example is drawn every
/// epoch.
struct Plan<'a> {
    owners: &'a [usize],
    n_scenes: usize,
    distractors: bool,
}

/// Shared optimization loop: per-example Adagrad ascent in shuffled order,
/// epoch-end evaluation of the objective on a fixed draw, and rollback plus
/// lr halving when that objective decreases.
fn optimize<L, O, H>(
    mut params: ParamSet,
    config: &TrainConfig,
    seed: u64,
    plan: Plan,
    loss: L,
    objective: O,
    heldout: H,
) -> Result<(ParamSet, TrainTrace)>
where
    L: Fn(&mut Tape, usize, Option<usize>) -> Result<NodeId>,
    O: Fn(&ParamSet, &[usize]) -> Result<f64>,
    H: Fn(&ParamSet) -> Result<Option<f64>>,
{
    let n = plan.owners.len();
    if n == 0 {
        return Err(AgentError::NoCaptions);
    }
    if plan.distractors && plan.n_scenes < 2 {
        return Err(AgentError::TooFewScenes(2));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ORDER));
    let mut aux_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DISTRACTORS));
    let monitor = if plan.distractors {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_MONITOR));
        draw_distractors(&mut rng, plan.owners, plan.n_scenes)
    } else {
        Vec::new()
    };

    let mut trace = TrainTrace::default();
    let evaluate = |p: &ParamSet, epoch: usize| -> Result<f64> {
        let v = objective(p, &monitor)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AgentError::Divergence { epoch })
        }
    };
    let mut best = evaluate(&params, 0)?;
    trace.objective.push(best);
    if let Some(h) = heldout(&params)? {
        trace.heldout.push(h);
    }

    let mut opt = Adagrad::new(&params, config.optimizer);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        let aux = if plan.distractors {
            draw_distractors(&mut aux_rng, plan.owners, plan.n_scenes)
        } else {
            Vec::new()
        };
        order.shuffle(&mut order_rng);
        trace.lr.push(opt.lr());
        let snapshot = (params.clone(), opt.clone());
        for &i in &order {
            let grads = {
                let mut tape = Tape::new(&params);
                let out =
                    loss(&mut tape, i, aux.get(i).copied()).map_err(|e| diverged(e, epoch))?;
                tape.backward(out).map_err(|e| diverged(e.into(), epoch))?
            };
            opt.step(&mut params, &grads)
                .map_err(|e| diverged(e.into(), epoch))?;
        }
        let value = evaluate(&params, epoch)?;
        if value < best - DECREASE_TOLERANCE {
            (params, opt) = snapshot;
            opt.halve_lr();
            trace.rolled_back.push(epoch);
        } else {
            best = value;
        }
        trace.objective.push(best);
        if let Some(h) = heldout(&params)? {
            trace.heldout.push(h);
        }
    }
    Ok((params, trace))
}

fn diverged(e: AgentError, epoch: usize) -> AgentError {
    match e {
        AgentError::Diff(DiffError::NonFinite { .. })
        | AgentError::Net(NetError::Diff(DiffError::NonFinite { .. })) => {
            AgentError::Divergence { epoch }
        }
        other => other,
    }
}

fn space_hashes(spaces: &Spaces) -> [(&'static str, SpaceHash); 3] {
    [
        ("vocab", spaces.vocab.hash()),
        ("referent", spaces.referent.hash()),
        ("description", spaces.description.hash()),
    ]
}

fn checkpoint_for(
    kind: &str,
    spaces: &Spaces,
    params: &ParamSet,
    max_len: Option<usize>,
) -> Checkpoint {
    Checkpoint {
        kind: kind.to_string(),
        hashes: space_hashes(spaces)
            .iter()
            .map(|&(k, h)| (k.to_string(), h))
            .collect(),
        meta: max_len
            .map(|m| ("max_len".to_string(), m.to_string()))
            .into_iter()
            .collect(),
        params: params.clone(),
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    Ok(Checkpoint::read(std::io::BufReader::new(file))?)
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    ck.write(&mut out)?;
    std::io::Write::flush(&mut out)?;
    Ok(())
}

fn check_shape(params: &ParamSet, name: &str, shape: (usize, usize)) -> Result<()> {
    let found = params.by_name(name)?.shape();
    if found != shape {
        return Err(AgentError::Invalid(format!(
            "{name} is {found:?}, expected {shape:?}"
        )));
    }
    Ok(())
}
