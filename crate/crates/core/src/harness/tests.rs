use std::sync::{Arc, OnceLock};

use super::*;
use crate::agents::{train_listener, train_speaker, TrainConfig};
use crate::corpus::{GeneratorConfig, HeldOutSizes, PairMode, Scene, SceneObject};
use crate::features::Spaces;
use crate::netmod::ModelDims;
use crate::reasoning::{draw_candidates, ReasoningConfig, ReasoningSpeaker};

fn scene(id: &str, kinds: &[&str], captions: &[&str]) -> Scene {
    Scene {
        id: id.into(),
        objects: kinds
            .iter()
            .enumerate()
            .map(|(i, k)| SceneObject {
                kind: k.to_string(),
                attrs: Vec::new(),
                x: 0.2 + 0.3 * i as f64,
                y: 0.5,
            })
            .collect(),
        captions: captions
            .iter()
            .map(|c| c.split(' ').map(String::from).collect())
            .collect(),
    }
}

struct Models {
    scenes: Vec<Scene>,
    s0: Speaker,
    l0: LiteralListener,
    eval: EvalListener,
}

fn small() -> TrainConfig {
    TrainConfig {
        dims: ModelDims {
            embed: 8,
            hidden: 8,
        },
        epochs: 15,
        max_len: 4,
        ..TrainConfig::default()
    }
}

fn models() -> &'static Models {
    static M: OnceLock<Models> = OnceLock::new();
    M.get_or_init(|| {
        let scenes = vec![
            scene("s", &["sun"], &["the sun", "sun is out"]),
            scene("t", &["tree"], &["a tree", "the tree"]),
            scene(
                "st",
                &["sun", "tree"],
                &["the sun", "a tree", "sun and tree"],
            ),
            scene("d", &["dog"], &["a dog", "the dog is out"]),
            scene("sd", &["sun", "dog"], &["the dog", "the sun"]),
        ];
        let spaces = Arc::new(Spaces::build(&scenes, 1).unwrap());
        let l0 = train_listener(&scenes, spaces.clone(), &small(), 1).unwrap();
        let eval = train_listener(&scenes, spaces.clone(), &small(), 2).unwrap();
        let s0 = train_speaker(&scenes, &[], spaces, &small(), 3).unwrap();
        Models {
            scenes,
            s0,
            l0,
            eval: EvalListener::new(eval),
        }
    })
}

fn all_pairs(scenes: &[Scene]) -> Vec<ResolvedPair<'_>> {
    let mut out = Vec::new();
    for (i, t) in scenes.iter().enumerate() {
        for (j, d) in scenes.iter().enumerate() {
            if i != j {
                out.push(ResolvedPair::new(t, d, 1 + ((i + j) % 2) as u8));
            }
        }
    }
    out
}

struct Fixed(Vec<u32>);

impl PairSpeaker for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }

    fn describe(&self, _: &Scene, _: &Scene, _: u64) -> crate::agents::Result<Vec<u32>> {
        Ok(self.0.clone())
    }
}

#[test]
fn wilson_interval_solves_the_score_equation() {
    // the bounds are the roots of (p̂ − p)² = z² p (1 − p) / n
    for (k, n) in [(0, 10), (3, 10), (8, 10), (10, 10), (131, 200), (1, 1)] {
        let (lo, hi) = wilson_interval(k, n, 1.96);
        let (p, n, z2) = (k as f64 / n as f64, n as f64, 1.96f64 * 1.96);
        let a = 1.0 + z2 / n;
        let b = -(2.0 * p + z2 / n);
        let c = p * p;
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        assert!(
            (lo - ((-b - disc) / (2.0 * a)).max(0.0)).abs() < 1e-12,
            "{k}/{n}"
        );
        assert!(
            (hi - ((-b + disc) / (2.0 * a)).min(1.0)).abs() < 1e-12,
            "{k}/{n}"
        );
        assert!(lo <= p && p <= hi);
    }
    assert_eq!(wilson_interval(0, 0, 1.96), (0.0, 1.0));
}

#[test]
fn identical_scenes_tie_toward_slot_one() {
    let m = models();
    let t = &m.scenes[2];
    let caption = Fixed(vec![3, 4]);
    for slot in [1, 2] {
        let pair = ResolvedPair::new(t, t, slot);
        let g = simulate_game(&caption, &m.eval, &pair, 0).unwrap();
        assert_eq!(g.choice, 1);
        assert_eq!(g.correct, slot == 1);
    }
}

#[test]
fn games_replay_identically() {
    let m = models();
    let pair = ResolvedPair::new(&m.scenes[0], &m.scenes[3], 2);
    let a = simulate_game(&m.s0, &m.eval, &pair, 9).unwrap();
    let b = simulate_game(&m.s0, &m.eval, &pair, 9).unwrap();
    assert_eq!(a, b);
    let rs = ReasoningSpeaker {
        s0: &m.s0,
        l0: &m.l0,
        config: ReasoningConfig {
            n_samples: 20,
            ..ReasoningConfig::default()
        },
    };
    assert_eq!(
        simulate_game(&rs, &m.eval, &pair, 4).unwrap(),
        simulate_game(&rs, &m.eval, &pair, 4).unwrap()
    );
}

#[test]
fn sample_curve_nests_and_starts_at_the_literal_speaker() {
    let m = models();
    let pairs = all_pairs(&m.scenes);
    let set = PairSet {
        name: "all",
        pairs: &pairs,
    };
    let eval = run_sample_curve(set, &m.s0, &m.l0, &m.eval, 0.02, &[1, 5, 20], None, 11).unwrap();
    assert_eq!(eval.summaries.len(), 3);
    assert_eq!(eval.records.len(), 3 * pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let seed = pair_seed(11, i);
        let first = eval
            .records
            .iter()
            .find(|r| r.pair_index == i && r.setting == "n=1")
            .unwrap();
        assert_eq!(first.seed, seed);
        let literal = simulate_game(&m.s0, &m.eval, pair, seed).unwrap();
        assert_eq!(first.caption, m.s0.spaces().vocab.decode(&literal.tokens));
        assert_eq!(first.correct, literal.correct);
    }
    for s in &eval.summaries {
        let recs: Vec<_> = eval
            .records
            .iter()
            .filter(|r| r.setting == s.setting)
            .collect();
        let mean = recs.iter().filter(|r| r.correct).count() as f64 / recs.len() as f64;
        assert_eq!(mean, s.tally.accuracy);
        let by: usize = s.by_difference.values().map(|t| t.n).sum();
        assert_eq!(by, s.tally.n);
    }
    assert!(run_sample_curve(set, &m.s0, &m.l0, &m.eval, 0.02, &[], None, 1).is_err());
    assert!(run_sample_curve(set, &m.s0, &m.l0, &m.eval, 0.02, &[0, 3], None, 1).is_err());
}

#[test]
fn lambda_sweep_rescores_one_shared_draw() {
    let m = models();
    let pairs = all_pairs(&m.scenes);
    let set = PairSet {
        name: "hard",
        pairs: &pairs,
    };
    let eval = run_lambda_sweep(set, &m.s0, &m.l0, &m.eval, &[0.0, 1.0], 15, &m.s0, 5).unwrap();
    let vocab = &m.s0.spaces().vocab;
    for (i, pair) in pairs.iter().enumerate() {
        let cands = draw_candidates(&m.s0, &m.l0, pair, 15, pair_seed(5, i)).unwrap();
        let rec = |setting: &str| {
            eval.records
                .iter()
                .find(|r| r.pair_index == i && r.setting == setting)
                .unwrap()
        };
        let top_s0 = cands
            .iter()
            .map(|c| c.log_p_s0)
            .fold(f64::NEG_INFINITY, f64::max);
        let mode = cands.iter().find(|c| c.log_p_s0 == top_s0).unwrap();
        assert_eq!(
            rec(&lambda_setting(1.0)).caption,
            vocab.decode(&mode.tokens)
        );
        let top_l0 = cands
            .iter()
            .map(|c| c.log_p_l0)
            .fold(f64::NEG_INFINITY, f64::max);
        let best = cands.iter().find(|c| c.log_p_l0 == top_l0).unwrap();
        assert_eq!(
            rec(&lambda_setting(0.0)).caption,
            vocab.decode(&best.tokens)
        );
        assert!(rec(&lambda_setting(0.0)).fluency.is_some());
    }
    assert!(eval.summaries.iter().all(|s| s.fluency.is_some()));
}

#[test]
fn final_comparison_gives_speakers_the_same_seeds() {
    let m = models();
    let pairs = all_pairs(&m.scenes);
    let sets = [
        PairSet {
            name: "all",
            pairs: &pairs,
        },
        PairSet {
            name: "hard",
            pairs: &pairs[..4],
        },
    ];
    let fixed = Fixed(vec![3]);
    let eval = run_final_comparison(&sets, &[&m.s0, &fixed], &m.eval, None, 3).unwrap();
    assert_eq!(eval.summaries.len(), 4);
    assert_eq!(eval.records.len(), 2 * pairs.len() + 2 * 4);
    let lit: Vec<u64> = eval
        .records
        .iter()
        .filter(|r| r.speaker == "literal" && r.pairs == "all")
        .map(|r| r.seed)
        .collect();
    let fix: Vec<u64> = eval
        .records
        .iter()
        .filter(|r| r.speaker == "fixed" && r.pairs == "all")
        .map(|r| r.seed)
        .collect();
    assert_eq!(lit, fix);
    assert!(eval.records.iter().all(|r| r.fluency.is_none()));
}

fn record(speaker: &str, pairs: &str, n_diff: usize, correct: bool) -> GameRecord {
    GameRecord {
        speaker: speaker.into(),
        pairs: pairs.into(),
        setting: String::new(),
        pair_index: 0,
        pair: GamePair {
            target: "a".into(),
            distractor: "b".into(),
            target_slot: 1,
            n_differences: n_diff,
        },
        caption: vec![],
        choice: if correct { 1 } else { 2 },
        correct,
        seed: 0,
        fluency: None,
    }
}

fn evaluation(groups: Vec<Vec<GameRecord>>) -> Evaluation {
    let mut e = Evaluation::default();
    for g in groups {
        e.push(g);
    }
    e
}

fn hashes() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("reasoning".to_string(), "a".to_string()),
        ("evaluation".to_string(), "b".to_string()),
    ])
}

fn config(experiment: Experiment) -> ExperimentConfig {
    ExperimentConfig::desk(0, experiment)
}

fn many(speaker: &str, pairs: &str, n_diff: usize, correct: usize, n: usize) -> Vec<GameRecord> {
    (0..n)
        .map(|i| record(speaker, pairs, n_diff, i < correct))
        .collect()
}

#[test]
fn final_gates_follow_the_margins() {
    let group = |speaker: &str, all: usize, hard: usize| {
        vec![
            many(speaker, "all", 4, all, 100),
            many(speaker, "hard", 1, hard, 100),
        ]
    };
    let mut groups = Vec::new();
    groups.extend(group("literal", 60, 50));
    groups.extend(group("contrastive", 64, 55));
    groups.extend(group("reasoning", 70, 56));
    groups.extend(group("compiled", 63, 52));
    let eval = evaluation(groups.clone());
    let report = ExperimentReport::new(config(Experiment::Final), hashes(), eval);
    let gate = |name: &str| {
        report
            .gates
            .iter()
            .find(|g| g.name.starts_with(name))
            .unwrap()
            .passed
    };
    // margins of exactly 10 and 6 points pass
    assert!(gate("reasoning beats literal by 5 points on all"));
    assert!(gate("reasoning beats literal by 5 points on hard"));
    assert!(gate("reasoning at least contrastive"));
    assert!(gate("compiled trails reasoning"));
    assert!(gate("compiled within 2 points"));
    assert!(report.passed());
    assert!(render_table(&report).contains("reasoning"));

    let mut worse = groups;
    worse[5] = many("reasoning", "hard", 1, 54, 100);
    let report = ExperimentReport::new(config(Experiment::Final), hashes(), evaluation(worse));
    assert!(!report.passed());
    let failed: Vec<&str> = report
        .gates
        .iter()
        .filter(|g| !g.passed)
        .map(|g| g.name.as_str())
        .collect();
    assert_eq!(
        failed,
        ["reasoning beats literal by 5 points on hard pairs"]
    );
}

#[test]
fn shared_hashes_fail_the_independence_gate() {
    let mut h = hashes();
    h.insert("evaluation".into(), "a".into());
    let report = ExperimentReport::new(config(Experiment::Final), h, Evaluation::default());
    assert!(!report.gates[0].passed);
}

#[test]
fn pooled_breakdown_merges_pair_sets() {
    let eval = evaluation(vec![
        many("x", "all", 1, 1, 4),
        many("x", "hard", 1, 3, 4),
        many("y", "all", 4, 2, 2),
    ]);
    let pooled = pooled_by_difference(&eval);
    assert_eq!(pooled.len(), 2);
    assert_eq!(pooled[0].1[&1].n, 8);
    assert_eq!(pooled[0].1[&1].correct, 4);
    assert_eq!(pooled[1].1[&4].accuracy, 1.0);
}

#[test]
fn configs_validate_and_round_trip() {
    let c = config(Experiment::samples());
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), c);
    for bad in [
        Experiment::Samples {
            counts: vec![],
            pairs: PairMode::Hard,
        },
        Experiment::Lambda {
            lambdas: vec![1.2],
            pairs: PairMode::All,
        },
    ] {
        assert!(config(bad).validate().is_err());
    }
    let mut c = config(Experiment::Final);
    c.n_samples = 0;
    assert!(c.validate().is_err());
}

fn tiny_config(experiment: Experiment) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(4, experiment);
    c.corpus = CorpusSource::Synthetic {
        generator: GeneratorConfig {
            n_scenes: 480,
            ..GeneratorConfig::default()
        },
    };
    c.held_out = HeldOutSizes { dev: 120, test: 40 };
    c.listener = TrainConfig {
        epochs: 3,
        ..small()
    };
    c.speaker = TrainConfig {
        epochs: 2,
        ..small()
    };
    c.n_pairs = 12;
    c.n_samples = 10;
    c.distill_pairs = 40;
    c
}

#[test]
fn reports_replay_byte_identically() {
    let report = run_experiment(&tiny_config(Experiment::Final)).unwrap();
    let json = report.to_json().unwrap();
    let parsed = ExperimentReport::from_json(&json).unwrap();
    let again = run_experiment(&parsed.config).unwrap().to_json().unwrap();
    assert_eq!(json, again);
    assert_eq!(report.evaluation.summaries.len(), 10);
    assert_ne!(
        report.listener_hashes["reasoning"],
        report.listener_hashes["evaluation"]
    );
}

#[test]
fn workbench_runs_every_experiment() {
    let bench = Workbench::build(&tiny_config(Experiment::samples()), false).unwrap();
    assert!(bench.compiled.is_none());
    assert!(matches!(
        bench.run(&Experiment::Final),
        Err(HarnessError::Config(_))
    ));
    let samples = bench.run(&Experiment::samples()).unwrap();
    assert_eq!(samples.evaluation.records.len(), 3 * 12);
    assert_eq!(samples.config.experiment, Experiment::samples());
    let lambda = bench.run(&Experiment::lambda()).unwrap();
    assert_eq!(lambda.evaluation.summaries.len(), 5);
    assert!(render_table(&lambda).starts_with("lambda"));
}
