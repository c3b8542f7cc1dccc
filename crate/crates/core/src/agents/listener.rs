use std::path::Path;
use std::sync::Arc;

use super::{
    check_shape, checkpoint_for, optimize, read_checkpoint, space_hashes, write_checkpoint,
    AgentError, Plan, Result, TrainConfig, TrainTrace, KIND_L0,
};
use crate::corpus::Scene;
use crate::diffgraph::{Checkpoint, NodeId, ParamSet, Tape};
use crate::features::{FeatureVector, Spaces};
use crate::netmod::{
    encode_description, encode_on, encode_referent, rank_log, rank_on, EncoderParams, RankerIds,
    RankerParams, W1, W2, W3, W4, W5,
};

/// Literal listener: embeds both candidates and the description and ranks
/// the candidates.
#[derive(Debug, Clone)]
pub struct LiteralListener {
    params: ParamSet,
    spaces: Arc<Spaces>,
    trace: TrainTrace,
}

fn listener_shapes(
    spaces: &Spaces,
    embed: usize,
    hidden: usize,
) -> Vec<(&'static str, usize, usize)> {
    vec![
        (W1, embed, spaces.referent.dim()),
        (W2, embed, spaces.description.dim()),
        (W3, 1, hidden),
        (W4, hidden, embed),
        (W5, hidden, embed),
    ]
}

impl LiteralListener {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn spaces(&self) -> &Arc<Spaces> {
        &self.spaces
    }

    pub fn trace(&self) -> &TrainTrace {
        &self.trace
    }

    fn encoder(&self) -> Result<EncoderParams<'_>> {
        Ok(EncoderParams {
            w1: self.params.by_name(W1)?,
            w2: Some(self.params.by_name(W2)?),
            referent_space: self.spaces.referent.hash(),
            description_space: Some(self.spaces.description.hash()),
        })
    }

    pub fn embed_referent(&self, scene: &Scene) -> Result<Vec<f64>> {
        Ok(encode_referent(
            &self.spaces.referent(scene),
            &self.encoder()?,
        )?)
    }

    pub fn embed_description(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(encode_description(
            &self.spaces.description_of(tokens),
            &self.encoder()?,
        )?)
    }

    /// Log choice probabilities from precomputed embeddings.
    pub fn log_probs_embedded(&self, e1: &[f64], e2: &[f64], ed: &[f64]) -> Result<(f64, f64)> {
        Ok(rank_log(
            e1,
            e2,
            ed,
            &RankerParams::from_params(&self.params)?,
        )?)
    }

    /// `(log p(1), log p(2))` for a token-index description.
    pub fn log_probs(&self, tokens: &[u32], r1: &Scene, r2: &Scene) -> Result<(f64, f64)> {
        self.log_probs_embedded(
            &self.embed_referent(r1)?,
            &self.embed_referent(r2)?,
            &self.embed_description(tokens)?,
        )
    }

    /// `(p(1 | d, r1, r2), p(2 | d, r1, r2))` for a description given as words.
    pub fn listener_prob<S: AsRef<str>>(
        &self,
        words: &[S],
        r1: &Scene,
        r2: &Scene,
    ) -> Result<(f64, f64)> {
        let fd = self.spaces.description(words);
        self.prob_features(&fd, &self.spaces.referent(r1), &self.spaces.referent(r2))
    }

    /// Choice probabilities from feature vectors; fails on a space mismatch.
    pub fn prob_features(
        &self,
        fd: &FeatureVector,
        f1: &FeatureVector,
        f2: &FeatureVector,
    ) -> Result<(f64, f64)> {
        let enc = self.encoder()?;
        let (a, b) = self.log_probs_embedded(
            &encode_referent(f1, &enc)?,
            &encode_referent(f2, &enc)?,
            &encode_description(fd, &enc)?,
        )?;
        Ok((a.exp(), b.exp()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        checkpoint_for(KIND_L0, &self.spaces, &self.params, None)
    }

    pub fn from_checkpoint(ck: Checkpoint, spaces: Arc<Spaces>) -> Result<Self> {
        if ck.kind != KIND_L0 {
            return Err(AgentError::WrongKind {
                expected: KIND_L0.into(),
                found: ck.kind,
            });
        }
        ck.validate(&space_hashes(&spaces))?;
        let embed = ck.params.by_name(W1)?.rows();
        let hidden = ck.params.by_name(W4)?.rows();
        for (name, r, c) in listener_shapes(&spaces, embed, hidden) {
            check_shape(&ck.params, name, (r, c))?;
        }
        Ok(LiteralListener {
            params: ck.params,
            spaces,
            trace: TrainTrace::default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path, spaces: Arc<Spaces>) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?, spaces)
    }
}

/// Records `log p(1 | d, target, distractor)` with the target in slot 1.
pub fn listener_objective_on(
    tape: &mut Tape,
    target: &FeatureVector,
    distractor: &FeatureVector,
    description: &FeatureVector,
) -> Result<NodeId> {
    let params = tape.params();
    let ids = RankerIds::from_params(params)?;
    let (w1, w2) = (params.id(W1)?, params.id(W2)?);
    let e1 = encode_on(tape, w1, target)?;
    let e2 = encode_on(tape, w1, distractor)?;
    let ed = encode_on(tape, w2, description)?;
    let lp = rank_on(tape, ids, e1, e2, ed)?;
    Ok(tape.pick(lp, 0)?)
}

/// Train a literal listener to pick each training scene over a random
/// distractor given one of its captions (distractors redrawn every epoch).
pub fn train_listener(
    train: &[Scene],
    spaces: Arc<Spaces>,
    config: &TrainConfig,
    seed: u64,
) -> Result<LiteralListener> {
    if train.len() < 2 {
        return Err(AgentError::TooFewScenes(2));
    }
    let referents: Vec<FeatureVector> = train.iter().map(|s| spaces.referent(s)).collect();
    let mut owners = Vec::new();
    let mut descriptions = Vec::new();
    for (j, scene) in train.iter().enumerate() {
        for caption in &scene.captions {
            owners.push(j);
            descriptions.push(spaces.description(caption));
        }
    }
    let shapes = listener_shapes(&spaces, config.dims.embed, config.dims.hidden);
    let params = ParamSet::init(seed, &shapes)?;
    let (w1, w2) = (params.id(W1)?, params.id(W2)?);

    let loss = |tape: &mut Tape, i: usize, other: Option<usize>| {
        let other = other.expect("listener examples always carry a distractor");
        listener_objective_on(
            tape,
            &referents[owners[i]],
            &referents[other],
            &descriptions[i],
        )
    };
    let objective = |p: &ParamSet, monitor: &[usize]| -> Result<f64> {
        let w1m = p.get(w1);
        let embed = |f: &FeatureVector| {
            let mut v = vec![0.0; w1m.rows()];
            w1m.add_columns(&f.indices, &mut v);
            v
        };
        let scene_embs: Vec<Vec<f64>> = referents.iter().map(embed).collect();
        let rp = RankerParams::from_params(p)?;
        let w2m = p.get(w2);
        let mut total = 0.0;
        for (i, fd) in descriptions.iter().enumerate() {
            let mut ed = vec![0.0; w2m.rows()];
            w2m.add_columns(&fd.indices, &mut ed);
            let (lp, _) = rank_log(&scene_embs[owners[i]], &scene_embs[monitor[i]], &ed, &rp)?;
            total += lp;
        }
        Ok(total / descriptions.len() as f64)
    };
    let plan = Plan {
        owners: &owners,
        n_scenes: train.len(),
        distractors: true,
    };
    let (params, trace) = optimize(params, config, seed, plan, loss, objective, |_| Ok(None))?;
    Ok(LiteralListener {
        params,
        spaces,
        trace,
    })
}
