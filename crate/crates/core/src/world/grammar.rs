//! Denotational semantics of expressions and the oracle speaker.

use std::collections::BTreeSet;

use rand::Rng as _;

use super::scene::{located, location_of, Scene, SceneObject, SizeClass};
use super::vocab::{Expression, Predicate, Vocabulary};
use crate::rng::Rng;

fn satisfies(obj: &SceneObject, scene: &Scene, p: Predicate) -> bool {
    match p {
        Predicate::Category(c) => obj.category == c,
        Predicate::Color(c) => obj.color == c,
        Predicate::Size(s) => obj.size_class == s,
        Predicate::Location(l) => located(&obj.bbox, scene.canvas, l),
    }
}

/// Ids of every object satisfying the conjunction of the predicates named by
/// `tokens`. Function words, sentinels and unknown words assert nothing.
pub fn denote(tokens: &[usize], scene: &Scene, vocab: &Vocabulary) -> BTreeSet<usize> {
    let preds: Vec<Predicate> = tokens.iter().filter_map(|&t| vocab.predicate(t)).collect();
    scene
        .objects
        .iter()
        .filter(|o| preds.iter().all(|&p| satisfies(o, scene, p)))
        .map(|o| o.id)
        .collect()
}

pub fn denotes_uniquely(
    tokens: &[usize],
    scene: &Scene,
    vocab: &Vocabulary,
    target: usize,
) -> bool {
    let d = denote(tokens, scene, vocab);
    d.len() == 1 && d.contains(&target)
}

/// Attribute template, from least to most specific.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Template {
    pub color: bool,
    pub size: bool,
    pub location: bool,
}

impl Template {
    /// Specificity chain: category, colour + category, size + colour +
    /// category, then the same with a location phrase.
    pub fn chain(locations: bool) -> Vec<Template> {
        let mut v = vec![
            Template {
                color: false,
                size: false,
                location: false,
            },
            Template {
                color: true,
                size: false,
                location: false,
            },
            Template {
                color: true,
                size: true,
                location: false,
            },
        ];
        if locations {
            v.push(Template {
                color: true,
                size: true,
                location: true,
            });
        }
        v
    }

    /// Canonical word sequence for `obj`, without surface noise.
    pub fn words(&self, obj: &SceneObject, scene: &Scene) -> Vec<&'static str> {
        let mut w = Vec::with_capacity(4);
        if self.size {
            w.push(obj.size_class.word());
        }
        if self.color {
            w.push(obj.color.word());
        }
        w.push(obj.category.word());
        if self.location {
            w.push(location_of(&obj.bbox, scene.canvas).word());
        }
        w
    }
}

/// First template in specificity order whose denotation is exactly the
/// target, else the most specific one. The flag reports uniqueness.
pub fn choose_template(
    scene: &Scene,
    target: &SceneObject,
    vocab: &Vocabulary,
    locations: bool,
) -> (Template, bool) {
    let chain = Template::chain(locations);
    for t in &chain {
        let tokens: Vec<usize> = t.words(target, scene).iter().map(|w| vocab.id(w)).collect();
        if denotes_uniquely(&tokens, scene, vocab, target.id) {
            return (*t, true);
        }
    }
    (*chain.last().expect("non-empty chain"), false)
}

/// Probabilities of the surface variations the oracle speaker samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceNoise {
    pub determiner: f64,
    pub synonym: f64,
    pub swap_order: f64,
    pub location_prefix: f64,
}

impl Default for SurfaceNoise {
    fn default() -> Self {
        Self {
            determiner: 0.5,
            synonym: 0.3,
            swap_order: 0.2,
            location_prefix: 0.3,
        }
    }
}

impl SurfaceNoise {
    pub const NONE: SurfaceNoise = SurfaceNoise {
        determiner: 0.0,
        synonym: 0.0,
        swap_order: 0.0,
        location_prefix: 0.0,
    };
}

/// Renders a template with sampled determiner, synonym, ordering and
/// location-phrase variation. The denotation never changes.
pub fn realize(
    template: Template,
    obj: &SceneObject,
    scene: &Scene,
    vocab: &Vocabulary,
    noise: &SurfaceNoise,
    rng: &mut Rng,
) -> Expression {
    let mut words: Vec<&str> = Vec::new();
    if rng.random_bool(noise.determiner) {
        words.push("the");
    }
    let loc = location_of(&obj.bbox, scene.canvas).word();
    let loc_prefix = template.location && rng.random_bool(noise.location_prefix);
    if loc_prefix {
        words.push(loc);
    }
    let size = template.size.then(|| match obj.size_class {
        SizeClass::Big if rng.random_bool(noise.synonym) => "large",
        SizeClass::Small if rng.random_bool(noise.synonym) => "little",
        s => s.word(),
    });
    let color = template.color.then(|| obj.color.word());
    match (size, color) {
        (Some(s), Some(c)) if rng.random_bool(noise.swap_order) => words.extend([c, s]),
        (s, c) => words.extend(s.into_iter().chain(c)),
    }
    words.push(obj.category.word());
    if template.location && !loc_prefix {
        words.extend(["on", "the", loc]);
    }
    vocab.encode(&words.join(" "))
}

/// The oracle speaker: a fresh surface form of the minimal template.
pub fn oracle_expression(
    scene: &Scene,
    target: &SceneObject,
    vocab: &Vocabulary,
    locations: bool,
    noise: &SurfaceNoise,
    rng: &mut Rng,
) -> Expression {
    let (t, _) = choose_template(scene, target, vocab, locations);
    realize(t, target, scene, vocab, noise, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::world::scene::{BBox, Category, Color, Split};

    fn obj(id: usize, bbox: BBox, category: Category, color: Color) -> SceneObject {
        SceneObject {
            id,
            bbox,
            category,
            color,
            size_class: SizeClass::Small,
        }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        let mut s = Scene {
            id: 1,
            canvas: (300, 300),
            split: Split::Train,
            objects,
            refs: vec![],
        };
        s.assign_size_classes();
        s
    }

    fn canonical(s: &Scene, target: usize, locations: bool) -> String {
        let v = Vocabulary::standard();
        let t = s.object(target).unwrap();
        oracle_expression(s, t, &v, locations, &SurfaceNoise::NONE, &mut seeded(0))
            .surface()
            .to_string()
    }

    #[test]
    fn color_distinguishes_two_balls() {
        let s = scene(vec![
            obj(0, BBox::new(0, 0, 50, 50), Category::Ball, Color::Red),
            obj(1, BBox::new(200, 0, 250, 50), Category::Ball, Color::Blue),
        ]);
        assert_eq!(canonical(&s, 0, true), "red ball");
    }

    #[test]
    fn lone_object_needs_only_its_category() {
        let s = scene(vec![obj(
            0,
            BBox::new(0, 0, 50, 50),
            Category::Ball,
            Color::Red,
        )]);
        assert_eq!(canonical(&s, 0, true), "ball");
    }

    #[test]
    fn size_breaks_a_colour_tie_without_locations() {
        let s = scene(vec![
            obj(0, BBox::new(0, 0, 100, 100), Category::Ball, Color::Red),
            obj(1, BBox::new(150, 0, 170, 20), Category::Ball, Color::Red),
        ]);
        assert_eq!(canonical(&s, 0, false), "big red ball");
    }

    #[test]
    fn denotation_basics() {
        let v = Vocabulary::standard();
        let s = scene(vec![
            obj(0, BBox::new(0, 0, 50, 50), Category::Ball, Color::Red),
            obj(1, BBox::new(100, 0, 150, 50), Category::Ball, Color::Blue),
            obj(2, BBox::new(200, 0, 250, 50), Category::Dog, Color::Blue),
        ]);
        let ids = |e: &str| denote(v.encode(e).tokens(), &s, &v);
        assert_eq!(ids("ball"), BTreeSet::from([0, 1]));
        assert_eq!(ids("green ball"), BTreeSet::new());
        assert_eq!(ids("the zebra blue"), BTreeSet::from([1, 2]));
    }

    #[test]
    fn noise_preserves_denotation() {
        let v = Vocabulary::standard();
        let s = scene(vec![
            obj(0, BBox::new(0, 0, 100, 100), Category::Ball, Color::Red),
            obj(1, BBox::new(10, 10, 30, 30), Category::Ball, Color::Red),
            obj(2, BBox::new(200, 200, 290, 290), Category::Ball, Color::Red),
        ]);
        let mut rng = seeded(9);
        for target in [0, 1, 2] {
            let t = s.object(target).unwrap();
            let (tpl, unique) = choose_template(&s, t, &v, true);
            let canon: Vec<usize> = tpl.words(t, &s).iter().map(|w| v.id(w)).collect();
            for _ in 0..50 {
                let e = realize(tpl, t, &s, &v, &SurfaceNoise::default(), &mut rng);
                assert_eq!(denote(e.tokens(), &s, &v), denote(&canon, &s, &v));
                if unique {
                    assert_eq!(denote(e.tokens(), &s, &v), BTreeSet::from([target]));
                }
            }
        }
    }
}
