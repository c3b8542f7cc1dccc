//! Template-driven synthetic corpus standing in for the Abstract Scenes data.
//!
//! Scenes come in families sharing one layout: a few core objects that every
//! member contains, plus a few optional objects that each member includes
//! with probability one half. Now and then a member has one object moved.
//! Members of a family therefore often differ by exactly one object, which
//! is what makes one-difference pairs common enough to sample.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, CorpusError, Result, Scene, SceneObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Sky,
    Ground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSpec {
    pub kind: String,
    /// Article used in captions ("the", "a", or empty for names).
    pub article: String,
    pub noun: String,
    pub attrs: Vec<String>,
    /// Verb phrases that mention no other object.
    pub acts: Vec<String>,
    pub region: Region,
    /// Relative weight of being mentioned in a caption.
    pub salience: f64,
}

/// Caption templates use `{a}`, `{b}` (noun phrases), `{a.attr}` (noun phrase
/// with attribute when the object has one), `{a.act}`, `{a.where}`, and
/// `{a.rel.b}` (spatial relation of a to b). Templates naming `{b}` are only
/// used for scenes with at least two objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub kinds: Vec<KindSpec>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_scenes: usize,
    pub family_size: usize,
    /// Optional objects per family (fewer when the scene size range is
    /// too narrow).
    pub toggles: usize,
    pub min_captions: usize,
    pub max_captions: usize,
    pub templates: Vec<String>,
}

fn kind(
    name: &str,
    article: &str,
    attrs: &[&str],
    acts: &[&str],
    region: Region,
    salience: f64,
) -> KindSpec {
    KindSpec {
        kind: name.into(),
        article: article.into(),
        noun: name.into(),
        attrs: attrs.iter().map(|s| s.to_string()).collect(),
        acts: acts.iter().map(|s| s.to_string()).collect(),
        region,
        salience,
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        use Region::*;
        let kinds = vec![
            kind("sun", "the", &[], &["is shining", "is out"], Sky, 3.0),
            kind("cloud", "a", &["dark", "white"], &["is floating"], Sky, 1.0),
            kind("airplane", "the", &[], &["is flying"], Sky, 1.2),
            kind("tree", "the", &["big", "small"], &["is green"], Ground, 1.5),
            kind("owl", "the", &[], &["is sitting"], Ground, 1.0),
            kind(
                "dog",
                "the",
                &["brown", "black"],
                &["is running", "is standing"],
                Ground,
                1.5,
            ),
            kind("cat", "the", &[], &["is sleeping"], Ground, 1.0),
            kind(
                "ball",
                "a",
                &["red", "blue"],
                &["is on the ground"],
                Ground,
                0.8,
            ),
            kind(
                "hat",
                "a",
                &["chef's", "pirate"],
                &["is on the grass"],
                Ground,
                0.7,
            ),
            kind("burger", "the", &[], &["is on the grass"], Ground, 0.7),
            kind("snake", "the", &[], &["is slithering"], Ground, 0.8),
            kind(
                "mike",
                "",
                &["happy", "sad"],
                &["is playing", "is standing"],
                Ground,
                2.5,
            ),
            kind(
                "jenny",
                "",
                &["happy", "sad"],
                &["is smiling", "is sitting"],
                Ground,
                2.5,
            ),
            kind("bear", "the", &[], &["is walking"], Ground, 1.0),
            kind(
                "balloon",
                "a",
                &["red", "yellow"],
                &["is floating"],
                Sky,
                1.0,
            ),
            kind("kite", "a", &["green", "purple"], &["is flying"], Sky, 1.0),
            kind(
                "rocket",
                "the",
                &[],
                &["is flying", "is taking off"],
                Sky,
                1.0,
            ),
            kind("bee", "a", &[], &["is buzzing"], Sky, 0.8),
            kind(
                "duck",
                "the",
                &[],
                &["is swimming", "is quacking"],
                Ground,
                1.0,
            ),
            kind("frog", "the", &[], &["is jumping"], Ground, 0.9),
            kind("tent", "the", &[], &["is open"], Ground, 0.7),
            kind("slide", "the", &[], &["is empty"], Ground, 0.6),
            kind("pizza", "the", &[], &["is on the grass"], Ground, 0.7),
            kind("fire", "the", &[], &["is burning"], Ground, 1.2),
        ];
        let templates = [
            "{a} {a.act}",
            "{a} {a.act}",
            "{a} is {a.where}",
            "there is {a.attr}",
            "{a.attr} {a.act}",
            "{a} is {a.rel.b} {b}",
            "{a} and {b}",
            "{a} is near {b}",
        ];
        GeneratorConfig {
            kinds,
            min_objects: 2,
            max_objects: 5,
            n_scenes: 500,
            family_size: 20,
            toggles: 3,
            min_captions: 2,
            max_captions: 4,
            templates: templates.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CorpusError::Infeasible(m));
        if self.kinds.len() < 5 {
            return fail(format!(
                "inventory has {} kinds, need at least 5",
                self.kinds.len()
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!(
                "scene size range {}..={} is empty or zero",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > self.kinds.len() {
            return fail(format!(
                "scenes of up to {} distinct kinds requested from {} kinds",
                self.max_objects,
                self.kinds.len()
            ));
        }
        if self.family_size == 0 || self.min_captions == 0 || self.min_captions > self.max_captions
        {
            return fail("family size and caption range must be positive".into());
        }
        let families = self.n_scenes.div_ceil(self.family_size);
        if families < self.kinds.len() {
            return fail(format!(
                "{} families of {} scenes cannot cover all {} kinds",
                families,
                self.family_size,
                self.kinds.len()
            ));
        }
        if self.max_captions > 6 {
            return fail("at most 6 captions per scene".into());
        }
        if self.templates.is_empty() {
            return fail("no caption templates".into());
        }
        if self.kinds.iter().any(|k| k.salience <= 0.0) {
            return fail("kind salience must be positive".into());
        }
        Ok(())
    }
}

/// Generate `config.n_scenes` scenes. Identical `(config, seed)` give
/// identical output; every inventory kind appears somewhere.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<Vec<Scene>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_kinds = config.kinds.len();
    let mut scenes = Vec::with_capacity(config.n_scenes);
    let mut family = 0usize;
    while scenes.len() < config.n_scenes {
        // Family f always contains kind f mod n_kinds, so the first n_kinds
        // families cover the inventory.
        let layout = family_layout(config, family % n_kinds, &mut rng);
        for member in 0..config.family_size {
            if scenes.len() == config.n_scenes {
                break;
            }
            let objects = family_member(config, &layout, &mut rng);
            let n_caps = rng.random_range(config.min_captions..=config.max_captions);
            let captions = (0..n_caps)
                .map(|_| caption(config, &objects, &mut rng))
                .collect();
            scenes.push(Scene {
                id: format!("syn-{family:04}-{member:02}"),
                objects,
                captions,
            });
        }
        family += 1;
    }
    Ok(scenes)
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn place(spec: &KindSpec, rng: &mut ChaCha8Rng) -> SceneObject {
    let x = round3(rng.random_range(0.02..0.98));
    let y = round3(match spec.region {
        Region::Sky => rng.random_range(0.02..0.30),
        Region::Ground => rng.random_range(0.45..0.98),
    });
    let attrs = if !spec.attrs.is_empty() && rng.random_bool(0.5) {
        vec![spec.attrs.choose(rng).expect("non-empty").clone()]
    } else {
        Vec::new()
    };
    SceneObject {
        kind: spec.kind.clone(),
        attrs,
        x,
        y,
    }
}

/// Placed objects of one family, split into core and optional ones.
struct Layout {
    core: Vec<(usize, SceneObject)>,
    optional: Vec<(usize, SceneObject)>,
}

fn family_layout(config: &GeneratorConfig, anchor: usize, rng: &mut ChaCha8Rng) -> Layout {
    let n_core = if config.min_objects < config.max_objects {
        rng.random_range(config.min_objects..config.max_objects)
    } else {
        config.min_objects
    };
    let n_optional = config.toggles.min(config.max_objects - n_core);
    let mut chosen = vec![anchor];
    let mut rest: Vec<usize> = (0..config.kinds.len()).filter(|&k| k != anchor).collect();
    while chosen.len() < n_core + n_optional {
        let i = rng.random_range(0..rest.len());
        chosen.push(rest.swap_remove(i));
    }
    let mut placed: Vec<(usize, SceneObject)> = chosen
        .into_iter()
        .map(|k| (k, place(&config.kinds[k], rng)))
        .collect();
    let optional = placed.split_off(n_core);
    Layout {
        core: placed,
        optional,
    }
}

fn family_member(
    config: &GeneratorConfig,
    layout: &Layout,
    rng: &mut ChaCha8Rng,
) -> Vec<SceneObject> {
    let mut chosen: Vec<&(usize, SceneObject)> = layout.core.iter().collect();
    for o in &layout.optional {
        if rng.random_bool(0.5) {
            chosen.push(o);
        }
    }
    chosen.sort_by_key(|(k, _)| *k);
    let mut objects: Vec<SceneObject> = chosen.into_iter().map(|(_, o)| o.clone()).collect();
    if rng.random_bool(0.25) {
        let i = rng.random_range(0..objects.len());
        let moved = place(spec_of(config, &objects[i].kind), rng);
        objects[i].x = moved.x;
        objects[i].y = moved.y;
    }
    objects
}

fn spec_of<'c>(config: &'c GeneratorConfig, kind: &str) -> &'c KindSpec {
    config
        .kinds
        .iter()
        .find(|k| k.kind == kind)
        .expect("objects only use inventory kinds")
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn noun_phrase(spec: &KindSpec, attr: Option<&str>) -> String {
    let mut parts = Vec::new();
    if !spec.article.is_empty() {
        parts.push(spec.article.as_str());
    }
    if let Some(a) = attr {
        parts.push(a);
    }
    parts.push(spec.noun.as_str());
    parts.join(" ")
}

fn where_phrase(obj: &SceneObject) -> &'static str {
    if obj.y < 0.33 {
        "in the sky"
    } else if obj.x < 0.33 {
        "on the left"
    } else if obj.x > 0.67 {
        "on the right"
    } else {
        "in the middle"
    }
}

fn relation(a: &SceneObject, b: &SceneObject) -> &'static str {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    if dy.abs() > dx.abs() {
        if dy < 0.0 {
            "above"
        } else {
            "below"
        }
    } else if dx < 0.0 {
        "left of"
    } else {
        "right of"
    }
}

fn caption(config: &GeneratorConfig, objects: &[SceneObject], rng: &mut ChaCha8Rng) -> Vec<String> {
    let usable: Vec<&String> = config
        .templates
        .iter()
        .filter(|t| objects.len() >= 2 || !t.contains("{b}"))
        .collect();
    let template = usable[rng.random_range(0..usable.len())];
    let weights: Vec<f64> = objects
        .iter()
        .map(|o| spec_of(config, &o.kind).salience)
        .collect();
    let ia = weighted_index(&weights, rng);
    let mut weights_b = weights.clone();
    weights_b[ia] = 0.0;
    let ib = if objects.len() >= 2 {
        weighted_index(&weights_b, rng)
    } else {
        ia
    };
    let (a, b) = (&objects[ia], &objects[ib]);
    let (sa, sb) = (spec_of(config, &a.kind), spec_of(config, &b.kind));
    let act = if sa.acts.is_empty() {
        "is here".to_string()
    } else {
        sa.acts[rng.random_range(0..sa.acts.len())].clone()
    };
    let text = template
        .replace(
            "{a.attr}",
            &noun_phrase(sa, a.attrs.first().map(String::as_str)),
        )
        .replace("{a.act}", &act)
        .replace("{a.where}", where_phrase(a))
        .replace("{a.rel.b}", relation(a, b))
        .replace("{a}", &noun_phrase(sa, None))
        .replace("{b}", &noun_phrase(sb, None));
    tokenize(&text)
}
