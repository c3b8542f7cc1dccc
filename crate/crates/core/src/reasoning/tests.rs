use std::sync::{Arc, OnceLock};

use proptest::prelude::*;

use super::*;
use crate::agents::{train_listener, train_speaker, SpeakerKind, TrainConfig};
use crate::corpus::SceneObject;
use crate::features::Spaces;
use crate::netmod::ModelDims;

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

/// Two content words, so the vocabulary has five tokens.
fn scenes() -> Vec<Scene> {
    vec![
        scene("s", &["sun"], &["sun", "sun sun"]),
        scene("t", &["tree"], &["tree", "tree"]),
        scene("st", &["sun", "tree"], &["sun", "sun tree", "tree sun"]),
        scene("ts", &["tree", "sun"], &["tree", "sun"]),
    ]
}

struct Models {
    scenes: Vec<Scene>,
    s0: Speaker,
    l0: LiteralListener,
}

fn models() -> &'static Models {
    static M: OnceLock<Models> = OnceLock::new();
    M.get_or_init(|| {
        let scenes = scenes();
        let spaces = Arc::new(Spaces::build(&scenes, 1).unwrap());
        assert_eq!(spaces.vocab.len(), 5);
        let config = TrainConfig {
            dims: ModelDims {
                embed: 8,
                hidden: 8,
            },
            epochs: 15,
            max_len: 3,
            ..TrainConfig::default()
        };
        let l0 = train_listener(&scenes, spaces.clone(), &config, 1).unwrap();
        let s0 = train_speaker(&scenes, &[], spaces, &config, 2).unwrap();
        Models { scenes, s0, l0 }
    })
}

/// Every ordered pair of distinct scenes, in both presentation orders.
fn pairs(scenes: &[Scene]) -> Vec<ResolvedPair<'_>> {
    let mut out = Vec::new();
    for t in scenes {
        for d in scenes {
            if t.id != d.id {
                out.push(ResolvedPair::new(t, d, 1));
                out.push(ResolvedPair::new(t, d, 2));
            }
        }
    }
    out
}

fn cand(index: usize, tokens: &[u32], p_s0: f64, p_l0: f64) -> Candidate {
    Candidate {
        index,
        tokens: tokens.to_vec(),
        log_p_s0: p_s0.ln(),
        log_p_l0: p_l0.ln(),
    }
}

#[test]
fn half_weight_prefers_the_discriminative_candidate() {
    let cands = [cand(0, &[3], 0.04, 0.81), cand(1, &[4], 0.09, 0.09)];
    let r = select(&cands, 0.5, false).unwrap();
    assert_eq!(r.chosen, vec![3]);
    assert!((r.candidates[0].score.exp() - 0.18).abs() < 1e-12);
    assert!((r.candidates[1].score.exp() - 0.09).abs() < 1e-12);
}

#[test]
fn degenerate_weights_pick_single_model_argmaxes() {
    let cands = [
        cand(0, &[3], 0.5, 0.1),
        cand(1, &[4], 0.2, 0.9),
        cand(2, &[3, 4], 0.3, 0.6),
    ];
    assert_eq!(select(&cands, 1.0, false).unwrap().chosen, vec![3]);
    assert_eq!(select(&cands, 0.0, false).unwrap().chosen, vec![4]);
}

#[test]
fn ties_go_to_the_earliest_sample() {
    let cands = [cand(0, &[3], 0.2, 0.5), cand(1, &[4], 0.2, 0.5)];
    assert_eq!(select(&cands, 0.3, false).unwrap().chosen_at, 0);
}

#[test]
fn zero_weight_terms_cannot_produce_nan() {
    assert_eq!(combined_score(0.0, f64::NEG_INFINITY, -1.0), -1.0);
    assert_eq!(combined_score(1.0, -2.0, f64::NEG_INFINITY), -2.0);
}

#[test]
fn config_is_validated() {
    let bad = [
        ReasoningConfig {
            lambda: 1.5,
            ..ReasoningConfig::default()
        },
        ReasoningConfig {
            lambda: f64::NAN,
            ..ReasoningConfig::default()
        },
        ReasoningConfig {
            n_samples: 0,
            ..ReasoningConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(ReasoningError::Config(_))));
    }
    let d = ReasoningConfig::default();
    assert_eq!((d.lambda, d.n_samples, d.dedupe), (0.02, 100, false));
}

#[test]
fn enumeration_counts_and_order() {
    assert_eq!(enumerate_strings(&[3], 1).unwrap(), vec![vec![], vec![3]]);
    let all = enumerate_strings(&[4, 3], 3).unwrap();
    assert_eq!(all.len(), 1 + 2 + 4 + 8);
    assert_eq!(string_count(2, 3), Some(15));
    assert!(all.windows(2).all(|w| w[0] < w[1]));
    assert!(matches!(
        enumerate_strings(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11], 6),
        Err(ReasoningError::Budget { .. })
    ));
    assert_eq!(string_count(usize::MAX, 2), None);
}

#[test]
fn oracle_table_matches_the_capped_speaker() {
    let m = models();
    let pair = ResolvedPair::new(&m.scenes[2], &m.scenes[0], 2);
    let o = exhaustive_oracle(&m.s0, &m.l0, &pair, 0.3, 3).unwrap();
    let strings = enumerate_strings(&emittable_tokens(5), 3).unwrap();
    assert_eq!(o.table.len(), strings.len());
    let mut total = 0.0;
    for (row, s) in o.table.iter().zip(&strings) {
        assert_eq!(&row.tokens, s);
        assert_eq!(row.log_p_s0, m.s0.log_prob(s, pair.target, None).unwrap());
        let (a, b) = m.l0.log_probs(s, &m.scenes[0], pair.target).unwrap();
        assert_eq!(row.log_p_l0, b);
        assert!(a <= 0.0);
        total += row.log_p_s0.exp();
    }
    assert!((total - 1.0).abs() < 1e-12, "{total}");
}

#[test]
fn oracle_beyond_the_cap_assigns_zero_probability() {
    let m = models();
    let pair = ResolvedPair::new(&m.scenes[0], &m.scenes[1], 1);
    let o = exhaustive_oracle(&m.s0, &m.l0, &pair, 0.5, 4).unwrap();
    assert_eq!(o.table.len(), string_count(3, 4).unwrap());
    for row in &o.table {
        if row.tokens.len() > 3 {
            assert_eq!(row.log_p_s0, f64::NEG_INFINITY);
        } else {
            assert_eq!(
                row.log_p_s0,
                m.s0.log_prob(&row.tokens, pair.target, None).unwrap()
            );
        }
    }
    assert!(o.argmax.len() <= 3);
}

#[test]
fn oracle_dominates_sampling_and_reduces_to_the_mode() {
    let m = models();
    for (k, pair) in pairs(&m.scenes).iter().enumerate() {
        let cfg = ReasoningConfig {
            lambda: 0.3,
            n_samples: 20,
            seed: k as u64,
            ..ReasoningConfig::default()
        };
        let r = reason(&m.s0, &m.l0, pair, &cfg).unwrap();
        let o = exhaustive_oracle(&m.s0, &m.l0, pair, cfg.lambda, 3).unwrap();
        assert!(o.score >= r.chosen_candidate().score);

        let mode = exhaustive_oracle(&m.s0, &m.l0, pair, 1.0, 3).unwrap();
        let best = mode
            .table
            .iter()
            .map(|c| c.log_p_s0)
            .fold(f64::NEG_INFINITY, f64::max);
        let first = mode.table.iter().find(|c| c.log_p_s0 == best).unwrap();
        assert_eq!(mode.argmax, first.tokens);
    }
}

#[test]
fn oracle_rejects_pair_aware_speakers_and_bad_lambda() {
    let m = models();
    let pair = ResolvedPair::new(&m.scenes[0], &m.scenes[1], 1);
    assert!(exhaustive_oracle(&m.s0, &m.l0, &pair, -0.1, 2).is_err());
    assert_eq!(m.s0.kind(), SpeakerKind::Literal);
}

#[test]
fn degenerate_weights_on_trained_models() {
    let m = models();
    for (k, pair) in pairs(&m.scenes).iter().enumerate() {
        let cands = draw_candidates(&m.s0, &m.l0, pair, 30, k as u64).unwrap();
        let first_max = |f: fn(&Candidate) -> f64| {
            let best = cands.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            cands.iter().find(|c| f(c) == best).unwrap().index
        };
        let r1 = select(&cands, 1.0, false).unwrap();
        let r0 = select(&cands, 0.0, false).unwrap();
        assert_eq!(r1.chosen_candidate().index, first_max(|c| c.log_p_s0));
        assert_eq!(r0.chosen_candidate().index, first_max(|c| c.log_p_l0));
    }
}

#[test]
fn scores_decompose_and_samples_nest() {
    let m = models();
    let pair = ResolvedPair::new(&m.scenes[3], &m.scenes[1], 1);
    let cfg = ReasoningConfig {
        lambda: 0.37,
        n_samples: 40,
        seed: 5,
        dedupe: false,
    };
    let r = reason(&m.s0, &m.l0, &pair, &cfg).unwrap();
    for c in &r.candidates {
        assert_eq!(c.score, 0.37 * c.log_p_s0 + (1.0 - 0.37) * c.log_p_l0);
        assert_eq!(
            c.log_p_s0,
            m.s0.log_prob(&c.tokens, pair.target, None).unwrap()
        );
        assert!(c.score <= r.chosen_candidate().score);
    }
    let short = reason(
        &m.s0,
        &m.l0,
        &pair,
        &ReasoningConfig {
            n_samples: 10,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(short.candidates[..], r.candidates[..10]);
    assert_eq!(reason(&m.s0, &m.l0, &pair, &cfg).unwrap(), r);
}

#[test]
fn identical_scenes_leave_the_choice_to_the_speaker() {
    let m = models();
    let t = &m.scenes[2];
    let pair = ResolvedPair::new(t, t, 1);
    let cfg = ReasoningConfig {
        n_samples: 25,
        ..ReasoningConfig::default()
    };
    let r = reason(&m.s0, &m.l0, &pair, &cfg).unwrap();
    for c in &r.candidates {
        assert!((c.log_p_l0 - 0.5f64.ln()).abs() < 1e-12);
    }
    let best = r
        .candidates
        .iter()
        .map(|c| c.log_p_s0)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.chosen_candidate().log_p_s0, best);
    let caption = describe_in_context(&m.s0, &m.l0, t, t, &cfg).unwrap();
    assert_eq!(caption, r.chosen);
    assert!(caption.iter().all(|&w| w > Vocabulary::EOS && w < 5));
}

#[test]
fn chosen_score_grows_with_the_sample_count() {
    let m = models();
    let ps = pairs(&m.scenes);
    let counts = [1, 3, 10, 30];
    let mut means = vec![0.0; counts.len()];
    let mut n_pairs = 0;
    // 24 distinct pairs, each drawn with five seeds
    for rep in 0..5u64 {
        for (k, pair) in ps.iter().enumerate() {
            let cands = draw_candidates(&m.s0, &m.l0, pair, 30, rep * 1000 + k as u64).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for (j, &n) in counts.iter().enumerate() {
                let s = select(&cands[..n], 0.02, false)
                    .unwrap()
                    .chosen_candidate()
                    .score;
                assert!(s >= prev);
                prev = s;
                means[j] += s;
            }
            n_pairs += 1;
        }
    }
    assert!(n_pairs >= 100);
    for w in means.windows(2) {
        assert!(w[1] >= w[0], "{means:?}");
    }
}

#[test]
fn reasoning_speaker_plays_like_describe_in_context() {
    let m = models();
    let rs = ReasoningSpeaker {
        s0: &m.s0,
        l0: &m.l0,
        config: ReasoningConfig {
            n_samples: 15,
            ..ReasoningConfig::default()
        },
    };
    assert_eq!(rs.name(), "reasoning");
    let (t, d) = (&m.scenes[0], &m.scenes[2]);
    let cfg = ReasoningConfig {
        seed: 77,
        ..rs.config
    };
    assert_eq!(
        rs.describe(t, d, 77).unwrap(),
        describe_in_context(&m.s0, &m.l0, t, d, &cfg).unwrap()
    );
}

fn candidates_strategy() -> impl Strategy<Value = Vec<Candidate>> {
    // scores are a function of the tokens, as they are for real samples
    let table = prop::collection::vec((-5.0f64..0.0, -3.0f64..0.0), 6);
    let draws = prop::collection::vec(0usize..6, 1..40);
    (table, draws).prop_map(|(table, draws)| {
        draws
            .into_iter()
            .enumerate()
            .map(|(index, k)| Candidate {
                index,
                tokens: vec![3 + (k % 3) as u32; 1 + k / 3],
                log_p_s0: table[k].0,
                log_p_l0: table[k].1,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn dedupe_never_changes_the_choice(cands in candidates_strategy(), lambda in 0.0f64..=1.0) {
        let plain = select(&cands, lambda, false).unwrap();
        let deduped = select(&cands, lambda, true).unwrap();
        prop_assert_eq!(&plain.chosen, &deduped.chosen);
        prop_assert_eq!(plain.chosen_candidate(), deduped.chosen_candidate());
        let mut seen = std::collections::HashSet::new();
        prop_assert!(deduped.candidates.iter().all(|c| seen.insert(c.tokens.clone())));
    }

    #[test]
    fn chosen_candidate_dominates(cands in candidates_strategy(), lambda in 0.0f64..=1.0) {
        let r = select(&cands, lambda, false).unwrap();
        let best = r.chosen_candidate();
        for (i, c) in r.candidates.iter().enumerate() {
            prop_assert!(c.score <= best.score);
            if c.score == best.score {
                prop_assert!(i >= r.chosen_at);
            }
            prop_assert_eq!(c.score, combined_score(lambda, c.log_p_s0, c.log_p_l0));
        }
    }
}
