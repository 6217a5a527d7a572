use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

word_enum!(Category { Ball => "ball", Box => "box", Dog => "dog", Cat => "cat", Car => "car", Tree => "tree" });
word_enum!(Color { Red => "red", Blue => "blue", Green => "green", Yellow => "yellow", White => "white", Black => "black" });
word_enum!(SizeClass { Small => "small", Big => "big" });
word_enum!(Location { Left => "left", Right => "right", Top => "top", Bottom => "bottom", Middle => "middle" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    /// Scenes crowded with same-category objects.
    #[serde(rename = "testA")]
    TestA,
    #[serde(rename = "testB")]
    TestB,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestA, Split::TestB];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestA => "testA",
            Split::TestB => "testB",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// Pixel box `(x_tl, y_tl, x_br, y_br)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 4]", into = "[i32; 4]")]
pub struct BBox {
    pub x1: i32,
    pub y1: i32,
    pub x2: i32,
    pub y2: i32,
}

impl From<[i32; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [i32; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [i32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: i32, y1: i32, x2: i32, y2: i32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> i64 {
        i64::from(self.x2) - i64::from(self.x1)
    }

    pub fn height(&self) -> i64 {
        i64::from(self.y2) - i64::from(self.y1)
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    /// Twice the box centre, kept integral.
    pub fn center2(&self) -> (i64, i64) {
        (
            i64::from(self.x1) + i64::from(self.x2),
            i64::from(self.y1) + i64::from(self.y2),
        )
    }

    pub fn is_valid_in(&self, canvas: (u32, u32)) -> bool {
        self.x1 >= 0
            && self.y1 >= 0
            && self.x1 < self.x2
            && self.y1 < self.y2
            && i64::from(self.x2) <= i64::from(canvas.0)
            && i64::from(self.y2) <= i64::from(canvas.1)
    }
}

/// Intersection over union. A zero-area box scores 0 against anything but an
/// identical box.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (aa, ab) = (a.area(), b.area());
    if aa == 0 || ab == 0 {
        return 0.0;
    }
    let iw = (i64::from(a.x2.min(b.x2)) - i64::from(a.x1.max(b.x1))).max(0);
    let ih = (i64::from(a.y2.min(b.y2)) - i64::from(a.y1.max(b.y1))).max(0);
    let inter = iw * ih;
    inter as f64 / (aa + ab - inter) as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: Category,
    pub color: Color,
    pub size_class: SizeClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefExpr {
    pub target_id: usize,
    pub tokens: Vec<usize>,
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub canvas: (u32, u32),
    pub split: Split,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub refs: Vec<RefExpr>,
}

impl Scene {
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_index(&self, id: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    /// Recomputes every `size_class` from the median area rule.
    pub fn assign_size_classes(&mut self) {
        let mut areas: Vec<i64> = self.objects.iter().map(|o| o.bbox.area()).collect();
        areas.sort_unstable();
        let n = areas.len();
        if n == 0 {
            return;
        }
        // twice the median, kept integral
        let median2 = if n % 2 == 1 {
            2 * areas[n / 2]
        } else {
            areas[n / 2 - 1] + areas[n / 2]
        };
        for o in &mut self.objects {
            o.size_class = if 2 * o.bbox.area() >= median2 {
                SizeClass::Big
            } else {
                SizeClass::Small
            };
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return Err(Error::Dataset(format!("scene {}: empty canvas", self.id)));
        }
        if self.objects.is_empty() {
            return Err(Error::Dataset(format!("scene {}: no objects", self.id)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_valid_in(self.canvas) {
                return Err(Error::Dataset(format!(
                    "scene {}: object {} box {:?} invalid",
                    self.id, o.id, o.bbox
                )));
            }
            if self.objects[..i].iter().any(|p| p.id == o.id) {
                return Err(Error::Dataset(format!(
                    "scene {}: duplicate object id {}",
                    self.id, o.id
                )));
            }
        }
        for r in &self.refs {
            if self.object(r.target_id).is_none() {
                return Err(Error::Dataset(format!(
                    "scene {}: reference to missing object {}",
                    self.id, r.target_id
                )));
            }
        }
        Ok(())
    }
}

/// Location predicate, by thirds of the canvas on the box centre.
pub fn located(bbox: &BBox, canvas: (u32, u32), loc: Location) -> bool {
    let (cx2, cy2) = bbox.center2();
    let (w, h) = (i64::from(canvas.0), i64::from(canvas.1));
    // centre < W/3  <=>  3 * (2 * centre) < 2 * W
    let left = 3 * cx2 < 2 * w;
    let right = 3 * cx2 >= 4 * w;
    match loc {
        Location::Left => left,
        Location::Right => right,
        Location::Top => 3 * cy2 < 2 * h,
        Location::Bottom => 3 * cy2 >= 4 * h,
        Location::Middle => !left && !right,
    }
}

/// The location word the oracle speaker uses for a box.
pub fn location_of(bbox: &BBox, canvas: (u32, u32)) -> Location {
    [
        Location::Left,
        Location::Right,
        Location::Top,
        Location::Bottom,
    ]
    .into_iter()
    .find(|&l| located(bbox, canvas, l))
    .unwrap_or(Location::Middle)
}

/// Perturbs every box edge by up to `magnitude` of the box width (x edges) or
/// height (y edges), rounds to pixels and clamps to the canvas.
pub fn jitter_boxes(scene: &Scene, magnitude: f64, rng: &mut Rng) -> Scene {
    let mut out = scene.clone();
    let (cw, ch) = (scene.canvas.0 as i32, scene.canvas.1 as i32);
    for o in &mut out.objects {
        let b = o.bbox;
        let (w, h) = (b.width() as f64, b.height() as f64);
        let mut shift = |extent: f64| -> i32 {
            let u: f64 = rng.random_range(-1.0..=1.0);
            (u * magnitude * extent).round() as i32
        };
        let mut x1 = (b.x1 + shift(w)).clamp(0, cw - 1);
        let mut y1 = (b.y1 + shift(h)).clamp(0, ch - 1);
        let mut x2 = (b.x2 + shift(w)).clamp(1, cw);
        let mut y2 = (b.y2 + shift(h)).clamp(1, ch);
        if x2 <= x1 {
            (x1, x2) = (b.x1, b.x2);
        }
        if y2 <= y1 {
            (y1, y2) = (b.y1, b.y2);
        }
        o.bbox = BBox::new(x1, y1, x2, y2);
    }
    out
}

/// Settings of the stand-in appearance feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub noise_std: f64,
    pub noise_dims: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            noise_dims: 4,
        }
    }
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        Category::ALL.len() + Color::ALL.len() + 1 + self.noise_dims
    }

    /// One-hot category, one-hot colour, area relative to the canvas and
    /// `noise_dims` pure-noise channels; Gaussian noise on every entry. The
    /// noise is a fixed function of the scene and object ids, so the same
    /// object always looks the same.
    pub fn raw_feature(&self, scene: &Scene, obj: &SceneObject) -> Vec<f64> {
        let mut f = vec![0.0; self.dim()];
        f[obj.category.index()] = 1.0;
        f[Category::ALL.len() + obj.color.index()] = 1.0;
        let canvas_area = f64::from(scene.canvas.0) * f64::from(scene.canvas.1);
        f[Category::ALL.len() + Color::ALL.len()] = obj.bbox.area() as f64 / canvas_area;
        if self.noise_std > 0.0 {
            let mut r = rng::stream(scene.id as u64, &format!("appearance/{}", obj.id));
            for v in &mut f {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += self.noise_std * z;
            }
        }
        f
    }
}
