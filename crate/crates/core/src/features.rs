//! Vocabularies and frozen sparse indicator feature spaces for referents
//! and descriptions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Scene;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Side length of the position grid used for referent features.
pub const GRID: usize = 3;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no training scenes")]
    EmptyTrain,
    #[error("vocabulary is empty after applying min_count={0}")]
    EmptyVocabulary(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Content hash identifying a vocabulary or feature space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpaceHash(pub u64);

impl fmt::Display for SpaceHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for SpaceHash {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(SpaceHash)
    }
}

fn content_hash(kind: SpaceKind, names: &[String]) -> SpaceHash {
    let mut h = Sha256::new();
    h.update(kind.to_string().as_bytes());
    for n in names {
        h.update(b"\n");
        h.update(n.as_bytes());
    }
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    SpaceHash(u64::from_be_bytes(head))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Vocabulary,
    Referent,
    Description,
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceKind::Vocabulary => "vocabulary",
            SpaceKind::Referent => "referent",
            SpaceKind::Description => "description",
        })
    }
}

impl FromStr for SpaceKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vocabulary" => Ok(SpaceKind::Vocabulary),
            "referent" => Ok(SpaceKind::Referent),
            "description" => Ok(SpaceKind::Description),
            other => Err(FeatureError::Manifest(format!(
                "unknown space kind {other:?}"
            ))),
        }
    }
}

/// Token ↔ index map. Indices 0, 1, 2 are BOS, EOS and UNK; the remaining
/// tokens follow in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    hash: SpaceHash,
}

impl Vocabulary {
    pub const BOS: u32 = 0;
    pub const EOS: u32 = 1;
    pub const UNK: u32 = 2;

    /// Build from content tokens; reserved tokens are prepended and any
    /// duplicates dropped.
    pub fn new<I, S>(content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = content
            .into_iter()
            .map(Into::into)
            .filter(|t| t != BOS && t != EOS && t != UNK)
            .collect();
        let tokens: Vec<String> = [BOS, EOS, UNK]
            .into_iter()
            .map(String::from)
            .chain(sorted)
            .collect();
        Self::from_ordered(tokens)
    }

    fn from_ordered(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let hash = content_hash(SpaceKind::Vocabulary, &tokens);
        Vocabulary {
            tokens,
            index,
            hash,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hash(&self) -> SpaceHash {
        self.hash
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: u32) -> &str {
        &self.tokens[index as usize]
    }

    /// Map tokens to indices, sending unknown tokens to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.index(t.as_ref()).unwrap_or(Self::UNK))
            .collect()
    }

    pub fn decode(&self, indices: &[u32]) -> Vec<String> {
        indices.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn write_manifest<W: Write>(&self, out: W) -> Result<()> {
        write_manifest(out, SpaceKind::Vocabulary, self.hash, &self.tokens)
    }

    pub fn read_manifest<R: BufRead>(input: R) -> Result<Self> {
        let (kind, hash, names) = read_manifest(input)?;
        if kind != SpaceKind::Vocabulary {
            return Err(FeatureError::Manifest(format!(
                "expected a vocabulary manifest, found {kind}"
            )));
        }
        if names.len() < 3 || names[0] != BOS || names[1] != EOS || names[2] != UNK {
            return Err(FeatureError::Manifest(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let vocab = Self::from_ordered(names);
        check_hash(hash, vocab.hash)?;
        Ok(vocab)
    }
}

/// A frozen, ordered set of feature names. Names outside the space are
/// ignored by the featurizers; the space never grows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    kind: SpaceKind,
    names: Vec<String>,
    index: HashMap<String, u32>,
    hash: SpaceHash,
}

impl FeatureSpace {
    pub fn new<I, S>(kind: SpaceKind, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        Self::from_ordered(kind, sorted.into_iter().collect())
    }

    fn from_ordered(kind: SpaceKind, names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        let hash = content_hash(kind, &names);
        FeatureSpace {
            kind,
            names,
            index,
            hash,
        }
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn hash(&self) -> SpaceHash {
        self.hash
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    /// Indicator vector over the names that exist in this space.
    pub fn vector<I, S>(&self, names: I) -> FeatureVector
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let active: BTreeSet<u32> = names
            .into_iter()
            .filter_map(|n| self.index(n.as_ref()))
            .collect();
        FeatureVector {
            space: self.hash,
            dim: self.dim(),
            indices: active.into_iter().collect(),
        }
    }

    pub fn write_manifest<W: Write>(&self, out: W) -> Result<()> {
        write_manifest(out, self.kind, self.hash, &self.names)
    }

    pub fn read_manifest<R: BufRead>(input: R) -> Result<Self> {
        let (kind, hash, names) = read_manifest(input)?;
        if kind == SpaceKind::Vocabulary {
            return Err(FeatureError::Manifest(
                "expected a feature-space manifest, found a vocabulary".into(),
            ));
        }
        let space = Self::from_ordered(kind, names);
        check_hash(hash, space.hash)?;
        Ok(space)
    }
}

fn check_hash(declared: SpaceHash, actual: SpaceHash) -> Result<()> {
    if declared != actual {
        return Err(FeatureError::Manifest(format!(
            "content hash {actual} does not match header hash {declared}"
        )));
    }
    Ok(())
}

const MANIFEST_MAGIC: &str = "# pragma-space";

fn write_manifest<W: Write>(
    mut out: W,
    kind: SpaceKind,
    hash: SpaceHash,
    names: &[String],
) -> Result<()> {
    writeln!(
        out,
        "{MANIFEST_MAGIC} kind={kind} hash={hash} dim={}",
        names.len()
    )?;
    for n in names {
        writeln!(out, "{n}")?;
    }
    Ok(())
}

fn read_manifest<R: BufRead>(input: R) -> Result<(SpaceKind, SpaceHash, Vec<String>)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| FeatureError::Manifest("empty manifest".into()))??;
    let rest = header
        .strip_prefix(MANIFEST_MAGIC)
        .ok_or_else(|| FeatureError::Manifest(format!("bad header {header:?}")))?;
    let fields: BTreeMap<&str, &str> = rest
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| FeatureError::Manifest(format!("header lacks {k}=")))
    };
    let kind: SpaceKind = field("kind")?.parse()?;
    let hash: SpaceHash = field("hash")?
        .parse()
        .map_err(|e| FeatureError::Manifest(format!("bad hash: {e}")))?;
    let dim: usize = field("dim")?
        .parse()
        .map_err(|e| FeatureError::Manifest(format!("bad dim: {e}")))?;
    let names = lines.collect::<std::io::Result<Vec<String>>>()?;
    if names.len() != dim {
        return Err(FeatureError::Manifest(format!(
            "header declares {dim} names, found {}",
            names.len()
        )));
    }
    Ok((kind, hash, names))
}

/// Sparse indicator vector: strictly increasing active indices, value 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureVector {
    pub space: SpaceHash,
    pub dim: usize,
    pub indices: Vec<u32>,
}

impl FeatureVector {
    pub fn empty(space: &FeatureSpace) -> Self {
        FeatureVector {
            space: space.hash(),
            dim: space.dim(),
            indices: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &i in &self.indices {
            v[i as usize] = 1.0;
        }
        v
    }
}

fn grid_cell(v: f64) -> usize {
    ((v * GRID as f64) as usize).min(GRID - 1)
}

/// Which referent feature families to generate when building a space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferentFeatureConfig {
    pub attributes: bool,
    pub positions: bool,
}

impl Default for ReferentFeatureConfig {
    fn default() -> Self {
        ReferentFeatureConfig {
            attributes: true,
            positions: true,
        }
    }
}

impl ReferentFeatureConfig {
    /// Bare object identity only.
    pub fn identity_only() -> Self {
        ReferentFeatureConfig {
            attributes: false,
            positions: false,
        }
    }
}

/// Feature names for the given objects: `obj:K`, `attr:K:A`, `pos:K@col,row`.
fn object_feature_names<'a, I>(objects: I, config: ReferentFeatureConfig) -> Vec<String>
where
    I: IntoIterator<Item = &'a crate::corpus::SceneObject>,
{
    let mut names = Vec::new();
    for o in objects {
        names.push(format!("obj:{}", o.kind));
        if config.attributes {
            for a in &o.attrs {
                names.push(format!("attr:{}:{}", o.kind, a));
            }
        }
        if config.positions {
            names.push(format!(
                "pos:{}@{},{}",
                o.kind,
                grid_cell(o.x),
                grid_cell(o.y)
            ));
        }
    }
    names
}

pub fn referent_feature_names(scene: &Scene, config: ReferentFeatureConfig) -> Vec<String> {
    object_feature_names(&scene.objects, config)
}

pub fn featurize_referent(scene: &Scene, space: &FeatureSpace) -> FeatureVector {
    debug_assert_eq!(space.kind(), SpaceKind::Referent);
    space.vector(referent_feature_names(
        scene,
        ReferentFeatureConfig::default(),
    ))
}

/// Referent features restricted to objects whose kind is absent from the
/// distractor.
pub fn featurize_difference(
    target: &Scene,
    distractor: &Scene,
    space: &FeatureSpace,
) -> FeatureVector {
    debug_assert_eq!(space.kind(), SpaceKind::Referent);
    let other = distractor.kinds();
    let unique = target
        .objects
        .iter()
        .filter(|o| !other.contains(o.kind.as_str()));
    space.vector(object_feature_names(
        unique,
        ReferentFeatureConfig::default(),
    ))
}

/// Unigrams of `d` and bigrams of `BOS d EOS`, as feature names.
pub fn description_feature_names<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut names: Vec<String> = tokens
        .iter()
        .map(|t| format!("uni:{}", t.as_ref()))
        .collect();
    let padded: Vec<&str> = std::iter::once(BOS)
        .chain(tokens.iter().map(AsRef::as_ref))
        .chain(std::iter::once(EOS))
        .collect();
    names.extend(padded.windows(2).map(|w| format!("bi:{} {}", w[0], w[1])));
    names
}

pub fn featurize_description<S: AsRef<str>>(tokens: &[S], space: &FeatureSpace) -> FeatureVector {
    debug_assert_eq!(space.kind(), SpaceKind::Description);
    space.vector(description_feature_names(tokens))
}

const VOCAB_FILE: &str = "vocab.manifest";
const REFERENT_FILE: &str = "referent.manifest";
const DESCRIPTION_FILE: &str = "description.manifest";

/// Vocabulary plus both feature spaces, built together from one train set.
#[derive(Debug, Clone, PartialEq)]
pub struct Spaces {
    pub vocab: Vocabulary,
    pub referent: FeatureSpace,
    pub description: FeatureSpace,
}

impl Spaces {
    pub fn build(train: &[Scene], min_count: usize) -> Result<Self> {
        Self::build_with(train, min_count, ReferentFeatureConfig::default())
    }

    pub fn build_with(
        train: &[Scene],
        min_count: usize,
        config: ReferentFeatureConfig,
    ) -> Result<Self> {
        let (vocab, referent, description) = build_spaces_with(train, min_count, config)?;
        Ok(Spaces {
            vocab,
            referent,
            description,
        })
    }

    pub fn referent(&self, scene: &Scene) -> FeatureVector {
        featurize_referent(scene, &self.referent)
    }

    pub fn description<S: AsRef<str>>(&self, tokens: &[S]) -> FeatureVector {
        featurize_description(tokens, &self.description)
    }

    /// Write the three manifests into `dir` (created if missing).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let create = |name: &str| fs::File::create(dir.join(name)).map(std::io::BufWriter::new);
        self.vocab.write_manifest(create(VOCAB_FILE)?)?;
        self.referent.write_manifest(create(REFERENT_FILE)?)?;
        self.description.write_manifest(create(DESCRIPTION_FILE)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let open = |name: &str| fs::File::open(dir.join(name)).map(std::io::BufReader::new);
        Ok(Spaces {
            vocab: Vocabulary::read_manifest(open(VOCAB_FILE)?)?,
            referent: FeatureSpace::read_manifest(open(REFERENT_FILE)?)?,
            description: FeatureSpace::read_manifest(open(DESCRIPTION_FILE)?)?,
        })
    }

    /// Description features of a token-index sequence.
    pub fn description_of(&self, tokens: &[u32]) -> FeatureVector {
        let words: Vec<&str> = tokens.iter().map(|&t| self.vocab.token(t)).collect();
        self.description(&words)
    }
}

pub fn build_spaces(
    train: &[Scene],
    min_count: usize,
) -> Result<(Vocabulary, FeatureSpace, FeatureSpace)> {
    build_spaces_with(train, min_count, ReferentFeatureConfig::default())
}

pub fn build_spaces_with(
    train: &[Scene],
    min_count: usize,
    config: ReferentFeatureConfig,
) -> Result<(Vocabulary, FeatureSpace, FeatureSpace)> {
    if train.is_empty() {
        return Err(FeatureError::EmptyTrain);
    }
    let mut token_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ngram_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut referent_names = BTreeSet::new();
    for scene in train {
        referent_names.extend(referent_feature_names(scene, config));
        for caption in &scene.captions {
            for t in caption {
                *token_counts.entry(t.as_str()).or_default() += 1;
            }
            for n in description_feature_names(caption) {
                *ngram_counts.entry(n).or_default() += 1;
            }
        }
    }
    let kept = token_counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(t, _)| t);
    let vocab = Vocabulary::new(kept);
    if vocab.len() <= 3 {
        return Err(FeatureError::EmptyVocabulary(min_count));
    }
    let description = FeatureSpace::new(
        SpaceKind::Description,
        ngram_counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .map(|(n, _)| n),
    );
    let referent = FeatureSpace::new(SpaceKind::Referent, referent_names);
    Ok((vocab, referent, description))
}
