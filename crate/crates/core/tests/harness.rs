//! Final comparison on one desk workbench, plus a constructed oracle speaker.

use std::sync::OnceLock;

use pragma::agents::{AgentError, PairSpeaker};
use pragma::corpus::{tokenize, GeneratorConfig, PairMode, ResolvedPair, Scene};
use pragma::harness::{
    pooled_by_difference, run_final_comparison, Evaluation, Experiment, ExperimentConfig,
    ExperimentReport, PairSet, Workbench,
};

struct Bench {
    bench: Workbench,
    report: ExperimentReport,
}

fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let config = ExperimentConfig::desk(5, Experiment::Final);
        let bench = Workbench::build(&config, true).unwrap();
        let report = bench.run(&Experiment::Final).unwrap();
        Bench { bench, report }
    })
}

/// Names the one kind the target has and the distractor lacks.
struct OracleSpeaker<'a> {
    generator: GeneratorConfig,
    bench: &'a Workbench,
}

impl PairSpeaker for OracleSpeaker<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn describe(
        &self,
        target: &Scene,
        distractor: &Scene,
        _seed: u64,
    ) -> Result<Vec<u32>, AgentError> {
        let extra = target
            .kinds()
            .difference(&distractor.kinds())
            .next()
            .copied();
        let words = match extra.and_then(|k| self.generator.kinds.iter().find(|s| s.kind == k)) {
            Some(spec) => tokenize(&format!("{} {} {}", spec.article, spec.noun, spec.acts[0])),
            None => Vec::new(),
        };
        Ok(self.bench.spaces.vocab.encode(&words))
    }
}

fn acc(eval: &Evaluation, speaker: &str, set: &str) -> f64 {
    eval.accuracy(speaker, set, "").unwrap()
}

#[test]
fn oracle_speaker_wins_hard_pairs() {
    let b = &bench().bench;
    // hard pairs differ in one kind; put the scene holding it in the target role
    let pairs: Vec<ResolvedPair> = b
        .resolve(PairMode::Hard)
        .unwrap()
        .into_iter()
        .map(|p| {
            if p.target.kinds().len() > p.distractor.kinds().len() {
                p
            } else {
                p.swapped()
            }
        })
        .collect();
    assert!(pairs.len() >= 200);
    let oracle = OracleSpeaker {
        generator: GeneratorConfig::default(),
        bench: b,
    };
    let eval = run_final_comparison(
        &[PairSet {
            name: "hard",
            pairs: &pairs,
        }],
        &[&oracle],
        &b.eval,
        None,
        3,
    )
    .unwrap();
    assert!(eval.records.iter().all(|r| !r.caption.is_empty()));
    let a = acc(&eval, "oracle", "hard");
    assert!(a > 0.9, "oracle accuracy {a}");
}

#[test]
fn speakers_order_on_all_pairs() {
    let eval = &bench().report.evaluation;
    let (literal, contrastive, reasoning) = (
        acc(eval, "literal", "all"),
        acc(eval, "contrastive", "all"),
        acc(eval, "reasoning", "all"),
    );
    assert!(literal < contrastive, "{literal} vs {contrastive}");
    assert!(contrastive < reasoning, "{contrastive} vs {reasoning}");
    let hand = acc(eval, "hand-engineered", "all");
    assert!(hand < reasoning, "{hand} vs {reasoning}");
}

#[test]
fn compiled_keeps_up_with_literal_on_middle_difficulty() {
    let pooled = pooled_by_difference(&bench().report.evaluation);
    let middle = |speaker: &str| {
        let table = &pooled.iter().find(|(s, _)| s == speaker).unwrap().1;
        let (n, c) = [2, 3]
            .iter()
            .filter_map(|k| table.get(k))
            .fold((0, 0), |(n, c), t| (n + t.n, c + t.correct));
        assert!(n > 0);
        c as f64 / n as f64
    };
    let (compiled, literal) = (middle("compiled"), middle("literal"));
    assert!(compiled >= literal, "{compiled} vs {literal}");
}

#[test]
fn report_gates_pass_and_survive_json() {
    let report = &bench().report;
    let failed: Vec<_> = report.gates.iter().filter(|g| !g.passed).collect();
    assert!(failed.is_empty(), "{failed:?}");
    let back = ExperimentReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(&back, report);
}
