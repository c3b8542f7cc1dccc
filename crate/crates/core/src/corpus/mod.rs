//! Captioned-scene corpora: loading, validation, splitting, and evaluation pairs.

mod pairs;
mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pairs::{
    build_pairs, read_captions, read_pairs, write_captions, write_pairs, GamePair, PairCaption,
    PairMode, ResolvedPair, DRAWS_PER_PAIR,
};
pub use synth::{generate_synthetic, GeneratorConfig, KindSpec, Region};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate scene id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: scene {id:?} has an empty caption")]
    EmptyCaption { line: usize, id: String },
    #[error("line {line}: scene {id:?}: {message}")]
    InvalidScene {
        line: usize,
        id: String,
        message: String,
    },
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
    #[error("held-out sizes {dev}+{test} leave no training scenes out of {total}")]
    SplitTooLarge {
        dev: usize,
        test: usize,
        total: usize,
    },
    #[error("found only {found} of {wanted} qualifying {mode} pairs within the draw budget")]
    InsufficientPairs {
        mode: PairMode,
        wanted: usize,
        found: usize,
    },
    #[error("unknown scene id {0:?}")]
    UnknownScene(String),
    #[error("unknown corpus format {0:?}")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: String,
    #[serde(default)]
    pub attrs: Vec<String>,
    pub x: f64,
    pub y: f64,
}

impl SceneObject {
    fn check(&self) -> std::result::Result<(), String> {
        if self.kind.trim().is_empty() {
            return Err("object kind is empty".into());
        }
        for (axis, v) in [("x", self.x), ("y", self.y)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("object {:?}: {axis}={v} outside [0,1]", self.kind));
            }
        }
        Ok(())
    }
}

/// A referent: placed objects plus the captions written for it in isolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub objects: Vec<SceneObject>,
    pub captions: Vec<Vec<String>>,
}

impl Scene {
    /// Object kinds present, duplicates collapsed.
    pub fn kinds(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.kind.as_str()).collect()
    }
}

/// Lowercase, split on whitespace, and trim punctuation from both ends of
/// each token. Internal punctuation ("chef's") and misspellings survive.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Number of object kinds that appear in one scene but not the other.
pub fn count_differences(a: &Scene, b: &Scene) -> usize {
    a.kinds().symmetric_difference(&b.kinds()).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    ScenesJsonl,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scenes-jsonl" => Ok(CorpusFormat::ScenesJsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusFormat::ScenesJsonl => f.write_str("scenes-jsonl"),
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Scene>> {
    match format {
        CorpusFormat::ScenesJsonl => {
            let file = fs::File::open(path)?;
            parse_scenes_jsonl(BufReader::new(file))
        }
    }
}

/// Parse `scenes-jsonl` text. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_scenes_jsonl<R: BufRead>(reader: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut scene: Scene = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        normalize_scene(&mut scene, line_no)?;
        if !seen.insert(scene.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: scene.id,
            });
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

fn normalize_scene(scene: &mut Scene, line: usize) -> Result<()> {
    let invalid = |message: String| CorpusError::InvalidScene {
        line,
        id: scene.id.clone(),
        message,
    };
    if scene.id.is_empty() {
        return Err(invalid("empty scene id".into()));
    }
    for obj in &scene.objects {
        obj.check().map_err(invalid)?;
    }
    if scene.captions.is_empty() {
        return Err(invalid("no captions".into()));
    }
    for caption in &mut scene.captions {
        *caption = tokenize(&caption.join(" "));
        if caption.is_empty() {
            return Err(CorpusError::EmptyCaption {
                line,
                id: scene.id.clone(),
            });
        }
    }
    Ok(())
}

pub fn write_scenes_jsonl<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    for scene in scenes {
        serde_json::to_writer(&mut out, scene).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_scenes_jsonl(&mut file, scenes)?;
    file.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOutSizes {
    pub dev: usize,
    pub test: usize,
}

impl HeldOutSizes {
    /// 1000/1000 for full-size corpora, otherwise 10% each.
    pub fn default_for(total: usize) -> Self {
        if total >= 4000 {
            HeldOutSizes {
                dev: 1000,
                test: 1000,
            }
        } else {
            let n = total / 10;
            HeldOutSizes { dev: n, test: n }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Scene>,
    pub dev: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Shuffle scenes with `seed` and carve off dev and test sets. Each set keeps
/// the original corpus order among its members.
pub fn split_corpus(scenes: &[Scene], sizes: HeldOutSizes, seed: u64) -> Result<CorpusSplit> {
    let total = scenes.len();
    if sizes.dev + sizes.test >= total {
        return Err(CorpusError::SplitTooLarge {
            dev: sizes.dev,
            test: sizes.test,
            total,
        });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev_idx = order[..sizes.dev].to_vec();
    let mut test_idx = order[sizes.dev..sizes.dev + sizes.test].to_vec();
    let mut train_idx = order[sizes.dev + sizes.test..].to_vec();
    dev_idx.sort_unstable();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| scenes[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplit {
        train: pick(&train_idx),
        dev: pick(&dev_idx),
        test: pick(&test_idx),
    })
}

/// Id lookup over a borrowed scene list.
#[derive(Debug, Clone)]
pub struct SceneIndex<'a> {
    by_id: HashMap<&'a str, &'a Scene>,
}

impl<'a> SceneIndex<'a> {
    pub fn new<I: IntoIterator<Item = &'a Scene>>(scenes: I) -> Self {
        SceneIndex {
            by_id: scenes.into_iter().map(|s| (s.id.as_str(), s)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&'a Scene> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| CorpusError::UnknownScene(id.to_string()))
    }

    pub fn resolve(&self, pair: &GamePair) -> Result<ResolvedPair<'a>> {
        Ok(ResolvedPair {
            target: self.get(&pair.target)?,
            distractor: self.get(&pair.distractor)?,
            target_slot: pair.target_slot,
        })
    }
}
