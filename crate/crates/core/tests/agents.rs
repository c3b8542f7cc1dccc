//! Desk-scale training checks on the default synthetic corpus.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pragma::agents::{train_listener, train_speaker, LiteralListener, TrainConfig};
use pragma::corpus::{
    generate_synthetic, split_corpus, CorpusSplit, GeneratorConfig, HeldOutSizes, Scene,
    SceneObject,
};
use pragma::features::Spaces;

struct Desk {
    split: CorpusSplit,
    spaces: Arc<Spaces>,
    l0: LiteralListener,
}

fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(|| {
        let scenes = generate_synthetic(&GeneratorConfig::default(), 7).unwrap();
        assert_eq!(scenes.len(), 500);
        let split = split_corpus(&scenes, HeldOutSizes::default_for(500), 7).unwrap();
        let spaces = Arc::new(Spaces::build(&split.train, 1).unwrap());
        let l0 = train_listener(&split.train, spaces.clone(), &TrainConfig::default(), 8).unwrap();
        Desk { split, spaces, l0 }
    })
}

#[test]
fn listener_generalizes_to_held_out_scenes() {
    let d = desk();
    let held: Vec<&Scene> = d.split.dev.iter().chain(&d.split.test).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut correct, mut total) = (0, 0);
    // ten distractor draws per held-out caption
    for (i, target) in held.iter().enumerate() {
        for caption in target
            .captions
            .iter()
            .flat_map(|c| std::iter::repeat_n(c, 10))
        {
            let mut j = rng.random_range(0..held.len() - 1);
            if j >= i {
                j += 1;
            }
            let (p1, p2) = d.l0.listener_prob(caption, target, held[j]).unwrap();
            correct += (p1 > p2) as usize;
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(
        acc > 0.9,
        "held-out accuracy {acc:.3} over {total} captions"
    );
}

#[test]
fn trained_listener_reads_a_simple_caption() {
    let d = desk();
    let at = |kind: &str, x: f64, y: f64| Scene {
        id: kind.into(),
        objects: vec![SceneObject {
            kind: kind.into(),
            attrs: Vec::new(),
            x,
            y,
        }],
        captions: vec![vec![kind.into()]],
    };
    let (sun, tree) = (at("sun", 0.2, 0.1), at("tree", 0.7, 0.7));
    let words = ["the", "sun", "is", "out"];
    let (p1, p2) = d.l0.listener_prob(&words, &sun, &tree).unwrap();
    assert!(p1 > 0.5, "{p1}");
    assert_eq!(d.l0.listener_prob(&words, &tree, &sun).unwrap(), (p2, p1));
}

#[test]
fn speaker_held_out_likelihood_rises_early() {
    let d = desk();
    let config = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let s0 = train_speaker(&d.split.train, &d.split.dev, d.spaces.clone(), &config, 9).unwrap();
    let h = &s0.trace().heldout;
    assert_eq!(h.len(), 4);
    for w in h.windows(2) {
        assert!(w[1] > w[0], "{h:?}");
    }
}
