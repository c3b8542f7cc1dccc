use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pipeline::{Experiment, ExperimentConfig};
use super::{lambda_setting, Evaluation, GameRecord, Summary, Tally};

/// Slack for comparing accuracy differences against point margins.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Gate {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Gate {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Parameter hashes of the reasoning speaker's listener and of the
    /// evaluation listener.
    pub listener_hashes: BTreeMap<String, String>,
    pub gates: Vec<Gate>,
    pub evaluation: Evaluation,
}

impl ExperimentReport {
    pub fn new(
        config: ExperimentConfig,
        listener_hashes: BTreeMap<String, String>,
        evaluation: Evaluation,
    ) -> Self {
        let gates = gates(&config.experiment, &listener_hashes, &evaluation);
        ExperimentReport {
            config,
            listener_hashes,
            gates,
            evaluation,
        }
    }

    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Wilson score interval for `correct` successes out of `n`.
pub fn wilson_interval(correct: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = correct as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn pts(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn gates(
    experiment: &Experiment,
    hashes: &BTreeMap<String, String>,
    eval: &Evaluation,
) -> Vec<Gate> {
    let mut out = Vec::new();
    let distinct: std::collections::BTreeSet<&String> = hashes.values().collect();
    out.push(Gate::new(
        "evaluation listener is independent",
        hashes.len() >= 2 && distinct.len() == hashes.len(),
        format!("{hashes:?}"),
    ));
    let consistent = eval.summaries.iter().all(|s| {
        let flags: Vec<bool> = eval
            .records
            .iter()
            .filter(|r| r.speaker == s.speaker && r.pairs == s.pairs && r.setting == s.setting)
            .map(|r| r.correct)
            .collect();
        let mean = flags.iter().filter(|&&c| c).count() as f64 / flags.len().max(1) as f64;
        flags.len() == s.tally.n && mean == s.tally.accuracy
    });
    out.push(Gate::new(
        "accuracy equals mean of record flags",
        consistent,
        format!("{} summaries", eval.summaries.len()),
    ));

    match experiment {
        Experiment::Samples { counts, pairs } => {
            let set = pairs.to_string();
            let acc = |n: usize| eval.accuracy("reasoning", &set, &format!("n={n}"));
            let (Some(&lo), Some(&hi)) = (counts.iter().min(), counts.iter().max()) else {
                return out;
            };
            if let (Some(a_lo), Some(a_hi)) = (acc(lo), acc(hi)) {
                out.push(Gate::new(
                    format!("accuracy(n={hi}) exceeds accuracy(n={lo}) by 5 points"),
                    a_hi - a_lo >= 0.05 - EPS,
                    format!("{} vs {}", pts(a_hi), pts(a_lo)),
                ));
                for &n in counts.iter().filter(|&&n| n != lo && n != hi) {
                    if let Some(a) = acc(n) {
                        out.push(Gate::new(
                            format!("accuracy(n={n}) at least accuracy(n={lo}) minus 2 points"),
                            a >= a_lo - 0.02 - EPS,
                            format!("{} vs {}", pts(a), pts(a_lo)),
                        ));
                    }
                }
            }
        }
        Experiment::Lambda { lambdas, pairs } => {
            let set = pairs.to_string();
            let at = |l: f64| eval.find("reasoning", &set, &lambda_setting(l));
            if lambdas.contains(&0.0) && lambdas.contains(&1.0) {
                if let (Some(s0), Some(s1)) = (at(0.0), at(1.0)) {
                    let (f0, f1) = (
                        s0.fluency.unwrap_or(f64::NAN),
                        s1.fluency.unwrap_or(f64::NAN),
                    );
                    out.push(Gate::new(
                        "fluency at lambda=1 at least fluency at lambda=0",
                        f1 >= f0,
                        format!("{f1:.4} vs {f0:.4}"),
                    ));
                    out.push(Gate::new(
                        "accuracy at lambda=0 at least accuracy at lambda=1",
                        s0.tally.accuracy >= s1.tally.accuracy,
                        format!("{} vs {}", pts(s0.tally.accuracy), pts(s1.tally.accuracy)),
                    ));
                }
            }
        }
        Experiment::Final => final_gates(eval, &mut out),
    }
    out
}

fn final_gates(eval: &Evaluation, out: &mut Vec<Gate>) {
    let acc = |speaker: &str, set: &str| eval.accuracy(speaker, set, "");
    for set in ["all", "hard"] {
        if let (Some(r), Some(l)) = (acc("reasoning", set), acc("literal", set)) {
            out.push(Gate::new(
                format!("reasoning beats literal by 5 points on {set} pairs"),
                r - l >= 0.05 - EPS,
                format!("{} vs {}", pts(r), pts(l)),
            ));
        }
    }
    if let (Some(r), Some(c)) = (acc("reasoning", "all"), acc("contrastive", "all")) {
        out.push(Gate::new(
            "reasoning at least contrastive on all pairs",
            r >= c,
            format!("{} vs {}", pts(r), pts(c)),
        ));
    }
    let mean = |speaker: &str| {
        let v: Vec<f64> = ["all", "hard"]
            .iter()
            .filter_map(|s| acc(speaker, s))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    if let (Some(c), Some(r), Some(l)) = (mean("compiled"), mean("reasoning"), mean("literal")) {
        out.push(Gate::new(
            "compiled trails reasoning by 3 points",
            r - c >= 0.03 - EPS,
            format!("{} vs {}", pts(c), pts(r)),
        ));
        out.push(Gate::new(
            "compiled within 2 points of literal or above",
            c >= l - 0.02 - EPS,
            format!("{} vs {}", pts(c), pts(l)),
        ));
    }
    for (speaker, table) in pooled_by_difference(eval) {
        if let (Some(one), Some(four)) = (table.get(&1), table.get(&4)) {
            out.push(Gate::new(
                format!("{speaker} accuracy with 4 differences at least with 1"),
                four.accuracy >= one.accuracy,
                format!("{} vs {}", pts(four.accuracy), pts(one.accuracy)),
            ));
        }
    }
}

/// Per-speaker accuracy by number of differences over every pair set, in
/// order of first appearance. Pooling gives the one-difference bucket the
/// hard pairs as well.
pub fn pooled_by_difference(eval: &Evaluation) -> Vec<(String, BTreeMap<usize, Tally>)> {
    let mut out: Vec<(String, BTreeMap<usize, Tally>)> = Vec::new();
    for s in &eval.summaries {
        if out.iter().any(|(sp, _)| *sp == s.speaker) {
            continue;
        }
        let mut groups: BTreeMap<usize, Vec<&GameRecord>> = BTreeMap::new();
        for r in eval.records.iter().filter(|r| r.speaker == s.speaker) {
            groups.entry(r.pair.n_differences).or_default().push(r);
        }
        let table = groups.into_iter().map(|(k, v)| (k, Tally::of(v))).collect();
        out.push((s.speaker.clone(), table));
    }
    out
}

/// Plain-text rendering: a results table in the layout of the experiment,
/// then the gates.
pub fn render_table(report: &ExperimentReport) -> String {
    let eval = &report.evaluation;
    let mut t = String::new();
    let row = |s: &Summary| {
        format!(
            "{:>6} [{:>5}, {:>5}]  n={}",
            pts(s.tally.accuracy),
            pts(s.interval.0),
            pts(s.interval.1),
            s.tally.n
        )
    };
    match &report.config.experiment {
        Experiment::Samples { .. } => {
            let _ = writeln!(t, "{:<10} accuracy (95% CI)", "# samples");
            for s in &eval.summaries {
                let _ = writeln!(t, "{:<10} {}", s.setting.trim_start_matches("n="), row(s));
            }
        }
        Experiment::Lambda { .. } => {
            let _ = writeln!(t, "{:<8} {:<34} fluency", "lambda", "accuracy (95% CI)");
            for s in &eval.summaries {
                let _ = writeln!(
                    t,
                    "{:<8} {:<34} {}",
                    s.setting.trim_start_matches("lambda="),
                    row(s),
                    s.fluency.map_or("-".into(), |f| format!("{f:.4}"))
                );
            }
        }
        Experiment::Final => {
            let mut speakers: Vec<&str> = Vec::new();
            for s in &eval.summaries {
                if !speakers.contains(&s.speaker.as_str()) {
                    speakers.push(&s.speaker);
                }
            }
            let _ = writeln!(t, "{:<16} {:>7} {:>7}", "speaker", "all", "hard");
            for sp in &speakers {
                let cell = |set: &str| eval.accuracy(sp, set, "").map_or("-".to_string(), pts);
                let _ = writeln!(t, "{:<16} {:>7} {:>7}", sp, cell("all"), cell("hard"));
            }
            let _ = writeln!(t);
            let _ = writeln!(t, "accuracy by number of differences");
            let _ = writeln!(
                t,
                "{:<16} {:>7} {:>7} {:>7} {:>7}",
                "speaker", "1", "2", "3", "4"
            );
            for (speaker, table) in pooled_by_difference(eval) {
                let cell = |k: usize| table.get(&k).map_or("-".to_string(), |x| pts(x.accuracy));
                let _ = writeln!(
                    t,
                    "{:<16} {:>7} {:>7} {:>7} {:>7}",
                    speaker,
                    cell(1),
                    cell(2),
                    cell(3),
                    cell(4)
                );
            }
        }
    }
    let _ = writeln!(t);
    for g in &report.gates {
        let _ = writeln!(
            t,
            "[{}] {} ({})",
            if g.passed { "pass" } else { "FAIL" },
            g.name,
            g.detail
        );
    }
    t
}
