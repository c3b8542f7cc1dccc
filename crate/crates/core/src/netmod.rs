//! The four model building blocks: referent encoder, description encoder,
//! choice ranker and referent describer.
//!
//! Each block has a plain forward function over borrowed matrices (used at
//! inference time) and a `*_on` builder that records the same computation on
//! a [`Tape`] for training.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{log_softmax, DiffError, Matrix, NodeId, ParamId, ParamSet, Tape};
use crate::features::{FeatureVector, SpaceHash, Vocabulary};

pub const W1: &str = "W1";
pub const W2: &str = "W2";
pub const W3: &str = "w3";
pub const W4: &str = "W4";
pub const W5: &str = "W5";
pub const W6: &str = "W6";
pub const W7: &str = "W7";

/// Generated captions are cut off (EOS forced) after this many tokens.
pub const MAX_CAPTION_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("feature vector from space {found}, parameters built for {expected}")]
    SpaceMismatch {
        expected: SpaceHash,
        found: SpaceHash,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("no description encoder in these parameters")]
    NoDescriptionEncoder,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embed: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed: 64,
            hidden: 128,
        }
    }
}

fn check_space(f: &FeatureVector, expected: SpaceHash, w: &Matrix) -> Result<()> {
    if f.space != expected {
        return Err(NetError::SpaceMismatch {
            expected,
            found: f.space,
        });
    }
    if f.dim != w.cols() {
        return Err(NetError::Shape(format!(
            "feature dim {} vs encoder width {}",
            f.dim,
            w.cols()
        )));
    }
    Ok(())
}

fn sparse_product(w: &Matrix, f: &FeatureVector) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    w.add_columns(&f.indices, &mut out);
    out
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams<'a> {
    pub w1: &'a Matrix,
    pub w2: Option<&'a Matrix>,
    pub referent_space: SpaceHash,
    pub description_space: Option<SpaceHash>,
}

/// `E_r(r) = W1 f(r)`.
pub fn encode_referent(f: &FeatureVector, p: &EncoderParams) -> Result<Vec<f64>> {
    check_space(f, p.referent_space, p.w1)?;
    Ok(sparse_product(p.w1, f))
}

/// `E_d(d) = W2 f(d)`.
pub fn encode_description(f: &FeatureVector, p: &EncoderParams) -> Result<Vec<f64>> {
    let (w2, space) =
        p.w2.zip(p.description_space)
            .ok_or(NetError::NoDescriptionEncoder)?;
    check_space(f, space, w2)?;
    Ok(sparse_product(w2, f))
}

#[derive(Debug, Clone, Copy)]
pub struct RankerParams<'a> {
    /// Stored as a `1 × hidden` row.
    pub w3: &'a Matrix,
    pub w4: &'a Matrix,
    pub w5: &'a Matrix,
}

impl<'a> RankerParams<'a> {
    pub fn from_params(p: &'a ParamSet) -> Result<Self> {
        Ok(RankerParams {
            w3: p.by_name(W3)?,
            w4: p.by_name(W4)?,
            w5: p.by_name(W5)?,
        })
    }
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// `s_i = w3ᵀ ρ(W4 e_i + W5 e_d)`.
fn choice_score(e: &[f64], wd: &[f64], p: &RankerParams) -> f64 {
    let mut h = p.w4.matvec(e);
    h.iter_mut().zip(wd).for_each(|(a, b)| *a += b);
    relu_in_place(&mut h);
    p.w3.row(0).iter().zip(&h).map(|(a, b)| a * b).sum()
}

/// Log-probabilities of choosing slot 1 and slot 2.
pub fn rank_log(e1: &[f64], e2: &[f64], ed: &[f64], p: &RankerParams) -> Result<(f64, f64)> {
    let embed = p.w4.cols();
    if e1.len() != embed || e2.len() != embed || ed.len() != p.w5.cols() {
        return Err(NetError::Shape(format!(
            "ranker expects embeddings of {embed}, got {}/{}/{}",
            e1.len(),
            e2.len(),
            ed.len()
        )));
    }
    let wd = p.w5.matvec(ed);
    let (s1, s2) = (choice_score(e1, &wd, p), choice_score(e2, &wd, p));
    let lp = log_softmax(&[s1, s2]);
    Ok((lp[0], lp[1]))
}

/// `R(e_i | e_{-i}, e_d)` for i = 1, 2.
pub fn rank(e1: &[f64], e2: &[f64], ed: &[f64], p: &RankerParams) -> Result<(f64, f64)> {
    let (a, b) = rank_log(e1, e2, ed, p)?;
    Ok((a.exp(), b.exp()))
}

#[derive(Debug, Clone, Copy)]
pub struct DescriberParams<'a> {
    /// `(vocab − 1) × hidden`: one output per token except BOS, which is
    /// only ever an input.
    pub w6: &'a Matrix,
    /// `hidden × (vocab + vocab + context)`.
    pub w7: &'a Matrix,
}

impl<'a> DescriberParams<'a> {
    pub fn from_params(p: &'a ParamSet) -> Result<Self> {
        let d = DescriberParams {
            w6: p.by_name(W6)?,
            w7: p.by_name(W7)?,
        };
        if d.w7.rows() != d.w6.cols() || d.w7.cols() < 2 * (d.w6.rows() + 1) {
            return Err(NetError::Shape(format!(
                "W6 {:?} incompatible with W7 {:?}",
                d.w6.shape(),
                d.w7.shape()
            )));
        }
        Ok(d)
    }

    pub fn vocab_size(&self) -> usize {
        self.w6.rows() + 1
    }

    /// Width of the conditioning embedding.
    pub fn context_dim(&self) -> usize {
        self.w7.cols() - 2 * self.vocab_size()
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.vocab_size() {
            return Err(NetError::TokenOutOfRange {
                token,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(())
    }

    /// Precompute the context contribution for one conditioning embedding.
    pub fn context(&self, e: &[f64]) -> Result<DescriberContext<'a>> {
        if e.len() != self.context_dim() {
            return Err(NetError::Shape(format!(
                "describer context is {}, embedding has {}",
                self.context_dim(),
                e.len()
            )));
        }
        Ok(DescriberContext {
            params: *self,
            base: self.w7.matvec_cols(e, 2 * self.vocab_size()),
        })
    }
}

/// A describer with its conditioning embedding folded in: `W7[:, ctx] · e`
/// is computed once and reused at every step.
#[derive(Debug, Clone)]
pub struct DescriberContext<'a> {
    params: DescriberParams<'a>,
    base: Vec<f64>,
}

/// History of a partially generated caption as seen by the describer: the
/// last token and the set of earlier generated tokens (BOS excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct History {
    last: u32,
    bag: Vec<u32>,
}

impl Default for History {
    fn default() -> Self {
        History {
            last: Vocabulary::BOS,
            bag: Vec::new(),
        }
    }
}

impl History {
    pub fn last(&self) -> u32 {
        self.last
    }

    pub fn bag(&self) -> &[u32] {
        &self.bag
    }

    /// Append a generated token; the previous last token enters the bag.
    pub fn push(&mut self, token: u32) {
        if self.last != Vocabulary::BOS {
            if let Err(i) = self.bag.binary_search(&self.last) {
                self.bag.insert(i, self.last);
            }
        }
        self.last = token;
    }
}

impl DescriberContext<'_> {
    /// `log p(· | d_n, d_<n, e)`: `log_softmax(W6 ρ(W7 [onehot(d_n), bag(d_<n), e]))`,
    /// indexed by token; the BOS entry is −∞.
    pub fn step(&self, history: &History) -> Result<Vec<f64>> {
        let v = self.params.vocab_size();
        self.params.check_token(history.last)?;
        let mut h = self.base.clone();
        let mut cols = Vec::with_capacity(1 + history.bag.len());
        cols.push(history.last);
        for &b in &history.bag {
            self.params.check_token(b)?;
            cols.push(v as u32 + b);
        }
        self.params.w7.add_columns(&cols, &mut h);
        relu_in_place(&mut h);
        let scores = self.params.w6.matvec(&h);
        let mut out = Vec::with_capacity(v);
        out.push(f64::NEG_INFINITY);
        out.extend(log_softmax(&scores));
        Ok(out)
    }

    /// Chain-rule log-probability of `tokens` followed by EOS.
    pub fn sequence_logprob(&self, tokens: &[u32]) -> Result<f64> {
        let mut history = History::default();
        let mut total = 0.0;
        for &t in tokens.iter().chain(std::iter::once(&Vocabulary::EOS)) {
            self.params.check_token(t)?;
            total += self.step(&history)?[t as usize];
            history.push(t);
        }
        Ok(total)
    }

    /// Log-probability under the length-capped sampler: EOS is forced (with
    /// probability one) once `max_len` tokens have been generated. Sequences
    /// longer than the cap have probability zero.
    pub fn capped_logprob(&self, tokens: &[u32], max_len: usize) -> Result<f64> {
        if tokens.len() > max_len {
            return Ok(f64::NEG_INFINITY);
        }
        let mut history = History::default();
        let mut total = 0.0;
        for &t in tokens {
            self.params.check_token(t)?;
            total += self.step(&history)?[t as usize];
            history.push(t);
        }
        if tokens.len() < max_len {
            total += self.step(&history)?[Vocabulary::EOS as usize];
        }
        Ok(total)
    }

    /// Ancestral sample of one caption (without EOS) and its capped
    /// log-probability.
    pub fn sample<R: Rng>(&self, max_len: usize, rng: &mut R) -> Result<(Vec<u32>, f64)> {
        let mut history = History::default();
        let mut tokens = Vec::new();
        let mut logp = 0.0;
        while tokens.len() < max_len {
            let lp = self.step(&history)?;
            let t = sample_index(&lp, rng);
            logp += lp[t];
            if t as u32 == Vocabulary::EOS {
                return Ok((tokens, logp));
            }
            tokens.push(t as u32);
            history.push(t as u32);
        }
        Ok((tokens, logp))
    }
}

/// Inverse-CDF draw from a log-distribution.
fn sample_index<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated mass; take the last nonzero entry
    log_probs
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(log_probs.len() - 1)
}

/// One describer step from explicit history, without a precomputed context.
pub fn describer_step(last: u32, bag: &[u32], e: &[f64], p: &DescriberParams) -> Result<Vec<f64>> {
    let mut bag = bag.to_vec();
    bag.sort_unstable();
    bag.dedup();
    p.context(e)?.step(&History { last, bag })
}

pub fn sequence_logprob(tokens: &[u32], e: &[f64], p: &DescriberParams) -> Result<f64> {
    p.context(e)?.sequence_logprob(tokens)
}

// ---------------------------------------------------------------------------
// Tape builders

/// `W · f` for a sparse indicator vector.
pub fn encode_on(tape: &mut Tape, w: ParamId, f: &FeatureVector) -> Result<NodeId> {
    let m = tape.params().get(w);
    if f.dim != m.cols() {
        return Err(NetError::Shape(format!(
            "feature dim {} vs encoder width {}",
            f.dim,
            m.cols()
        )));
    }
    Ok(tape.sparse_matvec(w, &f.indices)?)
}

#[derive(Debug, Clone, Copy)]
pub struct RankerIds {
    pub w3: ParamId,
    pub w4: ParamId,
    pub w5: ParamId,
}

impl RankerIds {
    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(RankerIds {
            w3: p.id(W3)?,
            w4: p.id(W4)?,
            w5: p.id(W5)?,
        })
    }
}

/// Records the ranker and returns the 2-vector of log choice probabilities.
pub fn rank_on(
    tape: &mut Tape,
    ids: RankerIds,
    e1: NodeId,
    e2: NodeId,
    ed: NodeId,
) -> Result<NodeId> {
    let wd = tape.matvec(ids.w5, ed)?;
    let mut scores = Vec::with_capacity(2);
    for e in [e1, e2] {
        let a = tape.matvec(ids.w4, e)?;
        let h = tape.add(a, wd)?;
        let h = tape.relu(h)?;
        scores.push(tape.matvec(ids.w3, h)?);
    }
    let s = tape.concat(&scores)?;
    Ok(tape.log_softmax(s)?)
}

#[derive(Debug, Clone, Copy)]
pub struct DescriberIds {
    pub w6: ParamId,
    pub w7: ParamId,
}

impl DescriberIds {
    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(DescriberIds {
            w6: p.id(W6)?,
            w7: p.id(W7)?,
        })
    }
}

/// Records `log p(tokens · EOS | e)` and returns the scalar node.
pub fn sequence_logprob_on(
    tape: &mut Tape,
    ids: DescriberIds,
    tokens: &[u32],
    e: NodeId,
) -> Result<NodeId> {
    let vocab = tape.params().get(ids.w6).rows() + 1;
    let mut history = History::default();
    let mut terms = Vec::with_capacity(tokens.len() + 1);
    for &t in tokens.iter().chain(std::iter::once(&Vocabulary::EOS)) {
        if t == Vocabulary::BOS || t as usize >= vocab || history.last as usize >= vocab {
            return Err(NetError::TokenOutOfRange {
                token: t,
                vocab_size: vocab,
            });
        }
        let mut onehot = vec![0.0; vocab];
        onehot[history.last as usize] = 1.0;
        let mut bag = vec![0.0; vocab];
        for &b in &history.bag {
            bag[b as usize] = 1.0;
        }
        let x_last = tape.input(onehot)?;
        let x_bag = tape.input(bag)?;
        let x = tape.concat(&[x_last, x_bag, e])?;
        let h = tape.matvec(ids.w7, x)?;
        let h = tape.relu(h)?;
        let s = tape.matvec(ids.w6, h)?;
        let lp = tape.log_softmax(s)?;
        terms.push(tape.pick(lp, t as usize - 1)?);
        history.push(t);
    }
    Ok(tape.sum(&terms)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::{gradient_check, FD_STEP};
    use crate::features::{FeatureSpace, SpaceKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(n: usize) -> FeatureSpace {
        FeatureSpace::new(SpaceKind::Referent, (0..n).map(|i| format!("f{i:02}")))
    }

    fn fv(space: &FeatureSpace, idx: &[u32]) -> FeatureVector {
        FeatureVector {
            space: space.hash(),
            dim: space.dim(),
            indices: idx.to_vec(),
        }
    }

    /// Straight-line dense reference: W · dense(f).
    fn dense_matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.rows()];
        for (r, o) in out.iter_mut().enumerate() {
            for (c, xv) in x.iter().enumerate() {
                *o += w.get(r, c) * xv;
            }
        }
        out
    }

    #[test]
    fn encoder_linearity_and_dense_agreement() {
        let sp = space(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w1 = Matrix::uniform(4, 7, 1.0, &mut rng);
        let p = EncoderParams {
            w1: &w1,
            w2: Some(&w1),
            referent_space: sp.hash(),
            description_space: Some(sp.hash()),
        };
        let zero = encode_referent(&fv(&sp, &[]), &p).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let a = encode_referent(&fv(&sp, &[0, 2]), &p).unwrap();
        let b = encode_referent(&fv(&sp, &[5]), &p).unwrap();
        let ab = encode_referent(&fv(&sp, &[0, 2, 5]), &p).unwrap();
        for i in 0..4 {
            assert!((a[i] + b[i] - ab[i]).abs() < 1e-14);
        }

        let f = fv(&sp, &[1, 3, 6]);
        let dense = dense_matvec(&w1, &f.to_dense());
        for (x, y) in encode_referent(&f, &p).unwrap().iter().zip(&dense) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in encode_description(&f, &p).unwrap().iter().zip(&dense) {
            assert!((x - y).abs() < 1e-14);
        }

        let other = space(8);
        assert!(matches!(
            encode_referent(&fv(&other, &[1]), &p),
            Err(NetError::SpaceMismatch { .. })
        ));
    }

    fn ranker(seed: u64, embed: usize, hidden: usize) -> ParamSet {
        ParamSet::init(
            seed,
            &[(W3, 1, hidden), (W4, hidden, embed), (W5, hidden, embed)],
        )
        .unwrap()
    }

    #[test]
    fn ranker_symmetry_and_normalization() {
        let p = ranker(5, 6, 8);
        let rp = RankerParams::from_params(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e2: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ed: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(rank(&e1, &e1, &ed, &rp).unwrap(), (0.5, 0.5));
        let (p1, p2) = rank(&e1, &e2, &ed, &rp).unwrap();
        assert!((p1 + p2 - 1.0).abs() < 1e-12);
        let (q1, q2) = rank(&e2, &e1, &ed, &rp).unwrap();
        assert_eq!(p1, q2);
        assert_eq!(p2, q1);
    }

    #[test]
    fn ranker_constructed_scores() {
        // W4 = I, W5 = 0, w3 = [ln 3, 0]: s1 = ln 3 for e1 = [1, 0], s2 = 0 for e2 = 0.
        let w3 = Matrix::from_vec(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let w4 = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w5 = Matrix::zeros(2, 2);
        let rp = RankerParams {
            w3: &w3,
            w4: &w4,
            w5: &w5,
        };
        let (p1, p2) = rank(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &rp).unwrap();
        assert!((p1 - 0.75).abs() < 1e-12);
        assert!((p2 - 0.25).abs() < 1e-12);
    }

    fn describer(seed: u64, vocab: usize, hidden: usize, ctx: usize) -> ParamSet {
        ParamSet::init(
            seed,
            &[(W6, vocab - 1, hidden), (W7, hidden, 2 * vocab + ctx)],
        )
        .unwrap()
    }

    fn logsumexp(v: &[f64]) -> f64 {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn describer_step_normalizes_and_matches_dense() {
        let p = describer(1, 6, 5, 3);
        let dp = DescriberParams::from_params(&p).unwrap();
        let e = [0.3, -0.7, 1.1];
        let lp = describer_step(4, &[3, 5], &e, &dp).unwrap();
        assert!(logsumexp(&lp).abs() < 1e-12);

        // dense recomputation
        let mut x = vec![0.0; 15];
        x[4] = 1.0;
        x[6 + 3] = 1.0;
        x[6 + 5] = 1.0;
        x[12..].copy_from_slice(&e);
        let mut h = dense_matvec(dp.w7, &x);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let s = dense_matvec(dp.w6, &h);
        let z = logsumexp(&s);
        assert_eq!(lp[0], f64::NEG_INFINITY);
        for (a, b) in lp[1..].iter().zip(s.iter().map(|v| v - z)) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(matches!(
            describer_step(6, &[], &e, &dp),
            Err(NetError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_output_weights_give_uniform_distribution() {
        let w6 = Matrix::zeros(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w7 = Matrix::uniform(3, 2 * 3 + 2, 1.0, &mut rng);
        let dp = DescriberParams { w6: &w6, w7: &w7 };
        let lp = describer_step(0, &[], &[0.5, 0.5], &dp).unwrap();
        assert_eq!(lp[Vocabulary::BOS as usize], f64::NEG_INFINITY);
        for v in lp.into_iter().skip(1) {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn history_bag_excludes_previous_token_and_bos() {
        let mut h = History::default();
        h.push(5);
        assert_eq!((h.last(), h.bag()), (5, &[][..]));
        h.push(4);
        h.push(5);
        assert_eq!((h.last(), h.bag()), (5, &[4, 5][..]));
        h.push(5);
        assert_eq!(h.bag(), &[4, 5]);
    }

    #[test]
    fn sequence_logprob_is_chain_of_steps() {
        let p = describer(2, 5, 4, 2);
        let dp = DescriberParams::from_params(&p).unwrap();
        let e = [0.2, -0.4];
        let ctx = dp.context(&e).unwrap();
        let empty = ctx.sequence_logprob(&[]).unwrap();
        let first = describer_step(Vocabulary::BOS, &[], &e, &dp).unwrap();
        assert_eq!(empty, first[Vocabulary::EOS as usize]);

        let d = [3, 4, 3];
        let s1 = describer_step(0, &[], &e, &dp).unwrap()[3];
        let s2 = describer_step(3, &[], &e, &dp).unwrap()[4];
        let s3 = describer_step(4, &[3], &e, &dp).unwrap()[3];
        let s4 = describer_step(3, &[3, 4], &e, &dp).unwrap()[1];
        let total = sequence_logprob(&d, &e, &dp).unwrap();
        assert!((total - (s1 + s2 + s3 + s4)).abs() < 1e-12);
    }

    /// Every string over `alphabet` of length ≤ `max_len`.
    fn all_strings(alphabet: &[u32], max_len: usize) -> Vec<Vec<u32>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for &a in alphabet {
                    let mut t: Vec<u32> = s.clone();
                    t.push(a);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn total_probability_of_short_strings_is_at_most_one() {
        // 3 tokens (BOS, EOS, UNK: only UNK is emittable) and one more word
        for (vocab, alphabet) in [(3, vec![2]), (4, vec![2, 3])] {
            let p = describer(3, vocab, 4, 2);
            let dp = DescriberParams::from_params(&p).unwrap();
            let ctx = dp.context(&[1.0, -1.0]).unwrap();
            let strings = all_strings(&alphabet, 3);
            let k = alphabet.len();
            assert_eq!(strings.len(), 1 + k + k * k + k * k * k);
            let total: f64 = strings
                .iter()
                .map(|s| ctx.sequence_logprob(s).unwrap().exp())
                .sum();
            assert!(total <= 1.0 + 1e-12, "{total}");
            let capped: f64 = strings
                .iter()
                .map(|s| ctx.capped_logprob(s, 3).unwrap().exp())
                .sum();
            assert!((capped - 1.0).abs() < 1e-12, "{capped}");
            // BOS is never produced
            assert_eq!(ctx.sequence_logprob(&[0]).unwrap(), f64::NEG_INFINITY);
        }
    }

    #[test]
    fn sampling_reports_capped_logprob() {
        let p = describer(4, 6, 5, 2);
        let dp = DescriberParams::from_params(&p).unwrap();
        let ctx = dp.context(&[0.1, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for max_len in [1, 3, 20] {
            for _ in 0..50 {
                let (toks, lp) = ctx.sample(max_len, &mut rng).unwrap();
                assert!(toks.len() <= max_len);
                assert!(toks
                    .iter()
                    .all(|&t| t != Vocabulary::EOS && (t as usize) < 6));
                let again = ctx.capped_logprob(&toks, max_len).unwrap();
                assert!((lp - again).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_frequencies_match_enumerated_probabilities() {
        for (vocab, alphabet) in [(3, vec![2]), (4, vec![2, 3])] {
            let p = describer(6, vocab, 4, 2);
            let dp = DescriberParams::from_params(&p).unwrap();
            let ctx = dp.context(&[0.4, -0.2]).unwrap();
            let n = 100_000;
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut counts = std::collections::HashMap::new();
            for _ in 0..n {
                let (toks, _) = ctx.sample(MAX_CAPTION_LEN, &mut rng).unwrap();
                *counts.entry(toks).or_insert(0usize) += 1;
            }
            for s in all_strings(&alphabet, 2) {
                let prob = ctx.sequence_logprob(&s).unwrap().exp();
                let expected = n as f64 * prob;
                let sigma = (n as f64 * prob * (1.0 - prob)).sqrt();
                let seen = *counts.get(&s).unwrap_or(&0) as f64;
                assert!(
                    (seen - expected).abs() <= 3.0 * sigma,
                    "{s:?}: seen {seen}, expected {expected:.1} ± {sigma:.1}"
                );
            }
        }
    }

    #[test]
    fn tape_builders_match_inference_and_gradients_check() {
        let embed = 3;
        let hidden = 4;
        let vocab = 5;
        let p = ParamSet::init(
            9,
            &[
                (W1, embed, 6),
                (W2, embed, 7),
                (W3, 1, hidden),
                (W4, hidden, embed),
                (W5, hidden, embed),
                (W6, vocab - 1, hidden),
                (W7, hidden, 2 * vocab + embed),
            ],
        )
        .unwrap();
        let rs = space(6);
        let ds = FeatureSpace::new(SpaceKind::Description, (0..7).map(|i| format!("d{i}")));
        let f1 = fv(&rs, &[0, 4]);
        let f2 = fv(&rs, &[1, 4, 5]);
        let fd = fv(&ds, &[2, 3, 6]);
        let ids = RankerIds::from_params(&p).unwrap();
        let (w1, w2) = (p.id(W1).unwrap(), p.id(W2).unwrap());

        // forward agreement
        let mut t = Tape::new(&p);
        let e1 = encode_on(&mut t, w1, &f1).unwrap();
        let e2 = encode_on(&mut t, w1, &f2).unwrap();
        let ed = encode_on(&mut t, w2, &fd).unwrap();
        let lp = rank_on(&mut t, ids, e1, e2, ed).unwrap();
        let rp = RankerParams::from_params(&p).unwrap();
        let (a, b) = rank_log(t.value(e1), t.value(e2), t.value(ed), &rp).unwrap();
        assert!((t.value(lp)[0] - a).abs() < 1e-14 && (t.value(lp)[1] - b).abs() < 1e-14);

        let dids = DescriberIds::from_params(&p).unwrap();
        let tokens = [3, 4, 3, 2];
        let seq = sequence_logprob_on(&mut t, dids, &tokens, e1).unwrap();
        let dp = DescriberParams::from_params(&p).unwrap();
        let direct = sequence_logprob(&tokens, t.value(e1), &dp).unwrap();
        assert!((t.scalar(seq) - direct).abs() < 1e-12);

        // finite differences through the full composition
        let check = gradient_check(&p, FD_STEP, |t| {
            let e1 = encode_on(t, w1, &f1).map_err(|_| DiffError::NonFinite { op: "enc" })?;
            let e2 = encode_on(t, w1, &f2).map_err(|_| DiffError::NonFinite { op: "enc" })?;
            let ed = encode_on(t, w2, &fd).map_err(|_| DiffError::NonFinite { op: "enc" })?;
            let lp =
                rank_on(t, ids, e1, e2, ed).map_err(|_| DiffError::NonFinite { op: "rank" })?;
            let l = t.pick(lp, 0)?;
            let s = sequence_logprob_on(t, dids, &tokens, e1)
                .map_err(|_| DiffError::NonFinite { op: "seq" })?;
            t.add(l, s)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }
}
