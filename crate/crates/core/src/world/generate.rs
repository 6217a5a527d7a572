use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::grammar::{oracle_expression, SurfaceNoise};
use super::scene::{BBox, Category, Color, RefExpr, Scene, SceneObject, SizeClass, Split};
use super::vocab::{Expression, Vocabulary, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_a_scenes: usize,
    pub test_b_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub expressions_per_object: usize,
    /// `false` forbids absolute location words in expressions.
    pub location_words: bool,
    pub num_categories: usize,
    pub num_colors: usize,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub min_box: u32,
    pub max_box: u32,
    pub max_len: usize,
    /// Probability that a train/val scene is drawn in the crowded style.
    pub crowded_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            train_scenes: 2000,
            val_scenes: 200,
            test_a_scenes: 200,
            test_b_scenes: 200,
            min_objects: 2,
            max_objects: 8,
            expressions_per_object: 3,
            location_words: true,
            num_categories: Category::ALL.len(),
            num_colors: Color::ALL.len(),
            canvas_width: 640,
            canvas_height: 480,
            min_box: 40,
            max_box: 200,
            max_len: DEFAULT_MAX_LEN,
            crowded_fraction: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_colors == 0 || self.num_colors > Color::ALL.len() {
            return bad("num_colors must be in 1..=6");
        }
        if self.num_categories == 0 || self.num_categories > Category::ALL.len() {
            return bad("num_categories must be in 1..=6");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if self.expressions_per_object == 0 {
            return bad("expressions_per_object must be positive");
        }
        if self.min_box == 0
            || self.min_box > self.max_box
            || self.max_box > self.canvas_width
            || self.max_box > self.canvas_height
        {
            return bad("box size range must be positive and fit the canvas");
        }
        if self.max_len < 7 {
            return bad("max_len must leave room for the longest template (7 words)");
        }
        if !(0.0..=1.0).contains(&self.crowded_fraction) {
            return bad("crowded_fraction must be a probability");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

/// One referring expression with the scene and object it refers to.
#[derive(Clone, Copy, Debug)]
pub struct RefRef<'a> {
    pub scene: &'a Scene,
    pub scene_index: usize,
    pub target_id: usize,
    pub tokens: &'a [usize],
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Scene)> {
        self.scenes
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.split == split)
    }

    /// Every (scene, target, expression) triple of `split`.
    pub fn refs(&self, split: Split) -> Vec<RefRef<'_>> {
        self.split(split)
            .flat_map(|(i, s)| {
                s.refs.iter().map(move |r| RefRef {
                    scene: s,
                    scene_index: i,
                    target_id: r.target_id,
                    tokens: &r.tokens,
                })
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.scenes {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    pub fn read_jsonl<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<Self> {
        let mut scenes = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
            scene.validate()?;
            for r in &scene.refs {
                Expression::new(r.tokens.clone(), vocab)?;
            }
            scenes.push(scene);
        }
        Ok(Self { scenes })
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f), vocab)
    }
}

fn sample_scene(id: usize, split: Split, cfg: &WorldConfig, rng: &mut Rng) -> Scene {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let crowded = match split {
        Split::TestA => true,
        Split::TestB => false,
        Split::Train | Split::Val => rng.random_bool(cfg.crowded_fraction),
    };
    let categories = &Category::ALL[..cfg.num_categories];
    let colors = &Color::ALL[..cfg.num_colors];
    let dominant = categories[rng.random_range(0..categories.len())];
    let (cw, ch) = (cfg.canvas_width, cfg.canvas_height);
    let mut objects: Vec<SceneObject> = (0..n)
        .map(|id| {
            let category = if crowded && rng.random_bool(0.6) {
                dominant
            } else {
                categories[rng.random_range(0..categories.len())]
            };
            let color = colors[rng.random_range(0..colors.len())];
            let w = rng.random_range(cfg.min_box..=cfg.max_box);
            let h = rng.random_range(cfg.min_box..=cfg.max_box);
            let x = rng.random_range(0..=cw - w);
            let y = rng.random_range(0..=ch - h);
            SceneObject {
                id,
                bbox: BBox::new(x as i32, y as i32, (x + w) as i32, (y + h) as i32),
                category,
                color,
                size_class: SizeClass::Small,
            }
        })
        .collect();
    if crowded && n >= 2 {
        let shared = objects
            .iter()
            .enumerate()
            .any(|(i, a)| objects[..i].iter().any(|b| b.category == a.category));
        if !shared {
            objects[1].category = objects[0].category;
        }
    }
    let mut scene = Scene {
        id,
        canvas: (cw, ch),
        split,
        objects,
        refs: Vec::new(),
    };
    scene.assign_size_classes();
    scene
}

/// Synthetic scenes with oracle-speaker expressions, deterministic in `seed`.
/// Scene ids run consecutively through train, val, testA and testB.
pub fn generate_dataset(cfg: &WorldConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let noise = SurfaceNoise::default();
    let plan = [
        (Split::Train, cfg.train_scenes),
        (Split::Val, cfg.val_scenes),
        (Split::TestA, cfg.test_a_scenes),
        (Split::TestB, cfg.test_b_scenes),
    ];
    let mut scenes = Vec::with_capacity(plan.iter().map(|p| p.1).sum());
    for (split, count) in plan {
        for _ in 0..count {
            let id = scenes.len();
            let mut r = rng::stream(seed, &format!("scene/{id}"));
            let mut scene = sample_scene(id, split, cfg, &mut r);
            let mut refs = Vec::new();
            for obj in &scene.objects {
                for _ in 0..cfg.expressions_per_object {
                    let e =
                        oracle_expression(&scene, obj, &vocab, cfg.location_words, &noise, &mut r);
                    refs.push(RefExpr {
                        target_id: obj.id,
                        tokens: e.tokens().to_vec(),
                        surface: e.surface().to_string(),
                    });
                }
            }
            scene.refs = refs;
            scenes.push(scene);
        }
    }
    Ok(Dataset { scenes })
}
