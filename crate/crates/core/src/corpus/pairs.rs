use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{count_differences, CorpusError, Result, Scene};

/// Rejection-sampling budget: random scene pairs drawn per pair still needed.
pub const DRAWS_PER_PAIR: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// Between one and four differences.
    All,
    /// Exactly one difference.
    Hard,
}

impl PairMode {
    pub fn admits(self, n_differences: usize) -> bool {
        match self {
            PairMode::All => (1..=4).contains(&n_differences),
            PairMode::Hard => n_differences == 1,
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::All => "all",
            PairMode::Hard => "hard",
        })
    }
}

impl FromStr for PairMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(PairMode::All),
            "hard" => Ok(PairMode::Hard),
            other => Err(format!("unknown pair mode {other:?} (expected all|hard)")),
        }
    }
}

/// One reference-game instance. Slot 1 and slot 2 are the presentation
/// positions; the target sits in `target_slot`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GamePair {
    pub target: String,
    pub distractor: String,
    pub target_slot: u8,
    #[serde(rename = "n_diff")]
    pub n_differences: usize,
}

/// A pair with its scenes looked up.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedPair<'a> {
    pub target: &'a Scene,
    pub distractor: &'a Scene,
    pub target_slot: u8,
}

impl<'a> ResolvedPair<'a> {
    pub fn new(target: &'a Scene, distractor: &'a Scene, target_slot: u8) -> Self {
        debug_assert!(target_slot == 1 || target_slot == 2);
        ResolvedPair {
            target,
            distractor,
            target_slot,
        }
    }

    /// Scenes in presentation order (slot 1, slot 2).
    pub fn slots(&self) -> (&'a Scene, &'a Scene) {
        if self.target_slot == 1 {
            (self.target, self.distractor)
        } else {
            (self.distractor, self.target)
        }
    }

    pub fn swapped(&self) -> Self {
        ResolvedPair {
            target: self.distractor,
            distractor: self.target,
            target_slot: 3 - self.target_slot,
        }
    }
}

/// Draw `n_pairs` distinct (unordered) scene pairs whose difference count
/// qualifies under `mode`, by rejection sampling over uniform random pairs.
pub fn build_pairs(
    scenes: &[Scene],
    mode: PairMode,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<GamePair>> {
    let insufficient = |found| CorpusError::InsufficientPairs {
        mode,
        wanted: n_pairs,
        found,
    };
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    if scenes.len() < 2 {
        return Err(insufficient(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut out = Vec::with_capacity(n_pairs);
    while out.len() < n_pairs {
        let mut found = None;
        for _ in 0..DRAWS_PER_PAIR {
            let i = rng.random_range(0..scenes.len());
            let j = rng.random_range(0..scenes.len());
            if i == j || scenes[i].id == scenes[j].id {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if used.contains(&key) {
                continue;
            }
            let n_differences = count_differences(&scenes[i], &scenes[j]);
            if mode.admits(n_differences) {
                used.insert(key);
                found = Some((i, j, n_differences));
                break;
            }
        }
        let (i, j, n_differences) = found.ok_or_else(|| insufficient(out.len()))?;
        let target_slot = if rng.random_bool(0.5) { 1 } else { 2 };
        out.push(GamePair {
            target: scenes[i].id.clone(),
            distractor: scenes[j].id.clone(),
            target_slot,
            n_differences,
        });
    }
    Ok(out)
}

pub fn write_pairs<W: Write>(mut out: W, pairs: &[GamePair]) -> Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut out, pair).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<GamePair>> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: GamePair = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if pair.target_slot != 1 && pair.target_slot != 2 {
            return Err(CorpusError::Parse {
                line: i + 1,
                message: format!("target_slot must be 1 or 2, got {}", pair.target_slot),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// A pre-generated caption for one pair of a pair set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCaption {
    pub pair_index: usize,
    pub target: String,
    pub distractor: String,
    pub caption: Vec<String>,
}

pub fn write_captions<W: Write>(mut out: W, captions: &[PairCaption]) -> Result<()> {
    for c in captions {
        serde_json::to_writer(&mut out, c).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_captions<R: BufRead>(reader: R) -> Result<Vec<PairCaption>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SceneObject;

    fn scene(id: &str, kinds: &[&str]) -> Scene {
        Scene {
            id: id.into(),
            objects: kinds
                .iter()
                .map(|k| SceneObject {
                    kind: (*k).into(),
                    attrs: vec![],
                    x: 0.2,
                    y: 0.8,
                })
                .collect(),
            captions: vec![vec!["a".into()]],
        }
    }

    #[test]
    fn identical_scenes_have_no_hard_pair() {
        let scenes = vec![scene("a", &["sun"]), scene("b", &["sun"])];
        assert!(matches!(
            build_pairs(&scenes, PairMode::Hard, 1, 0),
            Err(CorpusError::InsufficientPairs { found: 0, .. })
        ));
    }

    #[test]
    fn hard_pairs_have_one_difference_and_are_deterministic() {
        let scenes = vec![
            scene("a", &["sun", "tree"]),
            scene("b", &["sun"]),
            scene("c", &["sun", "owl"]),
            scene("d", &["tree"]),
        ];
        let pairs = build_pairs(&scenes, PairMode::Hard, 3, 11).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert_eq!(p.n_differences, 1);
            assert_ne!(p.target, p.distractor);
            assert!(p.target_slot == 1 || p.target_slot == 2);
        }
        assert_eq!(pairs, build_pairs(&scenes, PairMode::Hard, 3, 11).unwrap());
    }

    #[test]
    fn pairs_jsonl_uses_n_diff_key() {
        let pair = GamePair {
            target: "a".into(),
            distractor: "b".into(),
            target_slot: 2,
            n_differences: 1,
        };
        let mut buf = Vec::new();
        write_pairs(&mut buf, std::slice::from_ref(&pair)).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line.trim(),
            r#"{"target":"a","distractor":"b","target_slot":2,"n_diff":1}"#
        );
        assert_eq!(read_pairs(buf.as_slice()).unwrap(), vec![pair]);
    }

    #[test]
    fn captions_jsonl_round_trip() {
        let c = PairCaption {
            pair_index: 3,
            target: "a".into(),
            distractor: "b".into(),
            caption: vec!["the".into(), "sun".into()],
        };
        let mut buf = Vec::new();
        write_captions(&mut buf, std::slice::from_ref(&c)).unwrap();
        assert_eq!(read_captions(buf.as_slice()).unwrap(), vec![c]);
        assert!(read_captions("{".as_bytes()).is_err());
    }

    #[test]
    fn resolved_pair_slot_order() {
        let a = scene("a", &["sun"]);
        let b = scene("b", &["tree"]);
        let p = ResolvedPair::new(&a, &b, 2);
        assert_eq!(p.slots().0.id, "b");
        let q = p.swapped();
        assert_eq!(q.target.id, "b");
        assert_eq!(q.slots().0.id, "b");
        assert_eq!(q.slots().1.id, "a");
    }
}
