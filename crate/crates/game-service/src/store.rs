//! Pair sets and captions loaded from the data directory, and sessions kept
//! as append-only event logs under `sessions/`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use pragma::corpus::{load_corpus, read_captions, read_pairs, CorpusFormat, GamePair, Scene};

use crate::error::ServiceError;

type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub side: Side,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: String,
    /// Position of the pair in its pair set.
    pub pair_index: usize,
    pub pair: GamePair,
    pub caption: Vec<String>,
    pub speaker: String,
    pub target_side: Side,
    pub answer: Option<Answer>,
    pub fluency: Option<u8>,
}

impl Trial {
    pub fn correct(&self) -> Option<bool> {
        self.answer.as_ref().map(|a| a.side == self.target_side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSession {
    pub id: String,
    pub pair_set: String,
    pub speaker: String,
    pub seed: u64,
    pub participant: Option<String>,
    pub created_at: DateTime<Utc>,
    pub trials: Vec<Trial>,
}

impl GameSession {
    pub fn answered(&self) -> usize {
        self.trials.iter().filter(|t| t.answer.is_some()).count()
    }

    pub fn complete(&self) -> bool {
        self.answered() == self.trials.len()
    }

    pub fn trial(&self, k: usize) -> Result<&Trial> {
        self.trials.get(k).ok_or(ServiceError::UnknownTrial(k))
    }
}

/// One line of a session log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum Event {
    Created {
        session: GameSession,
    },
    Answer {
        trial: usize,
        side: Side,
        at: DateTime<Utc>,
    },
    Fluency {
        trial: usize,
        rating: u8,
    },
}

impl Event {
    fn apply(self, session: &mut Option<GameSession>) -> std::result::Result<(), String> {
        match (self, session.as_mut()) {
            (Event::Created { session: s }, None) => *session = Some(s),
            (Event::Created { .. }, Some(_)) => return Err("second created event".into()),
            (_, None) => return Err("event before created".into()),
            (Event::Answer { trial, side, at }, Some(s)) => {
                let t = s.trials.get_mut(trial).ok_or("answer for unknown trial")?;
                if t.answer.is_some() {
                    return Err(format!("trial {trial} answered twice"));
                }
                t.answer = Some(Answer { side, at });
            }
            (Event::Fluency { trial, rating }, Some(s)) => {
                let t = s.trials.get_mut(trial).ok_or("rating for unknown trial")?;
                if t.fluency.is_some() {
                    return Err(format!("trial {trial} rated twice"));
                }
                t.fluency = Some(rating);
            }
        }
        Ok(())
    }
}

/// Captions for one (pair set, speaker), by pair index.
type CaptionTable = BTreeMap<usize, Vec<String>>;

#[derive(Debug, Default)]
pub struct Catalog {
    pub scenes: HashMap<String, Scene>,
    pub pair_sets: BTreeMap<String, Vec<GamePair>>,
    /// pair set -> speaker -> captions
    pub captions: BTreeMap<String, BTreeMap<String, CaptionTable>>,
}

fn stem(path: &Path) -> Option<String> {
    (path.extension()? == "jsonl").then(|| path.file_stem()?.to_str().map(String::from))?
}

fn jsonl_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(name) = stem(&path) {
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

impl Catalog {
    /// Read `scenes.jsonl`, `pair_sets/*.jsonl` and
    /// `captions/<pair set>/<speaker>.jsonl`. Every pair must name known
    /// scenes and every caption must match its pair.
    pub fn load(dir: &Path) -> Result<Self> {
        let bad = |m: String| Err(ServiceError::Data(m));
        let scenes: HashMap<String, Scene> =
            load_corpus(&dir.join("scenes.jsonl"), CorpusFormat::ScenesJsonl)?
                .into_iter()
                .map(|s| (s.id.clone(), s))
                .collect();
        let mut catalog = Catalog {
            scenes,
            ..Catalog::default()
        };
        for (name, path) in jsonl_files(&dir.join("pair_sets"))? {
            let pairs = read_pairs(BufReader::new(fs::File::open(&path)?))?;
            for p in &pairs {
                for id in [&p.target, &p.distractor] {
                    if !catalog.scenes.contains_key(id) {
                        return bad(format!("pair set {name} names unknown scene {id}"));
                    }
                }
            }
            catalog.pair_sets.insert(name, pairs);
        }
        for (set, pairs) in &catalog.pair_sets {
            let mut speakers = BTreeMap::new();
            for (speaker, path) in jsonl_files(&dir.join("captions").join(set))? {
                let mut table = CaptionTable::new();
                for c in read_captions(BufReader::new(fs::File::open(&path)?))? {
                    match pairs.get(c.pair_index) {
                        Some(p) if p.target == c.target && p.distractor == c.distractor => {
                            table.insert(c.pair_index, c.caption);
                        }
                        _ => {
                            return bad(format!(
                                "{speaker} caption {} does not match pair set {set}",
                                c.pair_index
                            ))
                        }
                    }
                }
                speakers.insert(speaker, table);
            }
            catalog.captions.insert(set.clone(), speakers);
        }
        Ok(catalog)
    }

    /// Speaker names with the pair sets they have captions for.
    pub fn speakers(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (set, speakers) in &self.captions {
            for speaker in speakers.keys() {
                out.entry(speaker).or_default().push(set);
            }
        }
        out
    }

    /// Trials for a new session: pairs drawn without replacement from those
    /// the speaker has captions for, target side drawn per trial. Both come
    /// from `seed` alone.
    pub fn draw_trials(
        &self,
        pair_set: &str,
        speaker: &str,
        n_trials: usize,
        seed: u64,
    ) -> Result<Vec<Trial>> {
        let pairs = self
            .pair_sets
            .get(pair_set)
            .ok_or_else(|| ServiceError::UnknownPairSet(pair_set.into()))?;
        let table = self
            .captions
            .get(pair_set)
            .and_then(|s| s.get(speaker))
            .ok_or_else(|| ServiceError::UnknownSpeaker(speaker.into()))?;
        if n_trials == 0 {
            return Err(ServiceError::BadRequest("n_trials must be positive".into()));
        }
        if n_trials > table.len() {
            return Err(ServiceError::PairSetExhausted {
                wanted: n_trials,
                available: table.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = table.keys().copied().collect();
        indices.shuffle(&mut rng);
        Ok(indices
            .into_iter()
            .take(n_trials)
            .enumerate()
            .map(|(k, i)| Trial {
                id: format!("t{k}"),
                pair_index: i,
                pair: pairs[i].clone(),
                caption: table[&i].clone(),
                speaker: speaker.into(),
                target_side: if rng.random_bool(0.5) {
                    Side::Left
                } else {
                    Side::Right
                },
                answer: None,
                fluency: None,
            })
            .collect())
    }
}

/// A live session and the file its events go to.
#[derive(Debug)]
pub struct SessionSlot {
    pub session: GameSession,
    log: PathBuf,
}

impl SessionSlot {
    fn append(&self, event: &Event) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log)?;
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn answer(&mut self, k: usize, side: Side) -> Result<()> {
        let trial = self.session.trial(k)?;
        if trial.answer.is_some() {
            return Err(ServiceError::AlreadyAnswered(trial.id.clone()));
        }
        let at = Utc::now();
        self.append(&Event::Answer { trial: k, side, at })?;
        self.session.trials[k].answer = Some(Answer { side, at });
        Ok(())
    }

    pub fn rate(&mut self, k: usize, rating: u8) -> Result<()> {
        let trial = self.session.trial(k)?;
        if !(1..=5).contains(&rating) {
            return Err(ServiceError::BadRequest(format!(
                "rating {rating} outside 1-5"
            )));
        }
        if trial.fluency.is_some() {
            return Err(ServiceError::AlreadyRated(trial.id.clone()));
        }
        self.append(&Event::Fluency { trial: k, rating })?;
        self.session.trials[k].fluency = Some(rating);
        Ok(())
    }
}

/// Catalog plus every session, replayed from disk at startup.
#[derive(Debug)]
pub struct Store {
    pub catalog: Catalog,
    dir: PathBuf,
    sessions: std::sync::RwLock<BTreeMap<String, Arc<Mutex<SessionSlot>>>>,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self> {
        let catalog = Catalog::load(dir)?;
        let sessions_dir = dir.join("sessions");
        fs::create_dir_all(&sessions_dir)?;
        let mut sessions = BTreeMap::new();
        for (id, path) in jsonl_files(&sessions_dir)? {
            let session = replay(&path)?;
            if session.id != id {
                return Err(ServiceError::Data(format!(
                    "{} holds session {}",
                    path.display(),
                    session.id
                )));
            }
            sessions.insert(id, Arc::new(Mutex::new(SessionSlot { session, log: path })));
        }
        Ok(Store {
            catalog,
            dir: dir.to_path_buf(),
            sessions: std::sync::RwLock::new(sessions),
        })
    }

    pub fn create(
        &self,
        pair_set: &str,
        speaker: &str,
        n_trials: usize,
        seed: u64,
        participant: Option<String>,
    ) -> Result<GameSession> {
        let trials = self
            .catalog
            .draw_trials(pair_set, speaker, n_trials, seed)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = GameSession {
            id: id.clone(),
            pair_set: pair_set.into(),
            speaker: speaker.into(),
            seed,
            participant,
            created_at: Utc::now(),
            trials,
        };
        let slot = SessionSlot {
            session: session.clone(),
            log: self.dir.join("sessions").join(format!("{id}.jsonl")),
        };
        slot.append(&Event::Created {
            session: session.clone(),
        })?;
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id, Arc::new(Mutex::new(slot)));
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<SessionSlot>>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.into()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .keys()
            .cloned()
            .collect()
    }
}

fn replay(path: &Path) -> Result<GameSession> {
    let mut session = None;
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| ServiceError::Data(format!("{} line {}: {m}", path.display(), i + 1));
        let event: Event = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        event.apply(&mut session).map_err(at)?;
    }
    session.ok_or_else(|| ServiceError::Data(format!("{} is empty", path.display())))
}
