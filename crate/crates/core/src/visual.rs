//! Visual representation of a target object in its scene: appearance,
//! global context, location/size, and comparisons against nearby objects of
//! the same kind, fused by one affine layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Linear, ParamStore, Var};
use crate::error::{Error, Result};
use crate::world::{BBox, Dataset, FeatureSpec, Scene};

pub const FUSE: &str = "visual.fuse";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualConfig {
    pub features: FeatureSpec,
    pub max_comparisons: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            max_comparisons: 5,
        }
    }
}

impl VisualConfig {
    /// Length of the concatenated, pre-fusion feature.
    pub fn input_dim(&self) -> usize {
        let f = self.features.dim();
        3 * f + 5 + 5 * self.max_comparisons
    }
}

/// Unfused parts of the representation of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeature {
    pub object: Vec<f64>,
    pub context: Vec<f64>,
    pub location: [f64; 5],
    pub appearance_diff: Vec<f64>,
    pub location_diff: Vec<f64>,
    /// Number of comparison objects actually used.
    pub comparisons: usize,
}

impl VisualFeature {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.object.len() * 3 + 5 + self.location_diff.len());
        v.extend_from_slice(&self.object);
        v.extend_from_slice(&self.context);
        v.extend_from_slice(&self.location);
        v.extend_from_slice(&self.appearance_diff);
        v.extend_from_slice(&self.location_diff);
        v
    }
}

/// `[x_tl/W, y_tl/H, x_br/W, y_br/H, wh/WH]`.
pub fn location_feature(bbox: &BBox, canvas: (u32, u32)) -> Result<[f64; 5]> {
    if canvas.0 == 0 || canvas.1 == 0 {
        return Err(Error::Config(format!("canvas {canvas:?} has zero extent")));
    }
    let (w, h) = (f64::from(canvas.0), f64::from(canvas.1));
    let area = (bbox.width().max(0) * bbox.height().max(0)) as f64;
    Ok([
        f64::from(bbox.x1) / w,
        f64::from(bbox.y1) / h,
        f64::from(bbox.x2) / w,
        f64::from(bbox.y2) / h,
        area / (w * h),
    ])
}

/// Indices of up to `max` comparison objects for `target`: same-category
/// objects nearest by centre distance, or the nearest objects of any category
/// when none share it. Ties go to the smaller object id.
pub fn select_comparisons(scene: &Scene, target: usize, max: usize) -> Vec<usize> {
    let t = &scene.objects[target];
    let (tx, ty) = t.bbox.center2();
    let dist = |i: usize| {
        let (x, y) = scene.objects[i].bbox.center2();
        (x - tx).pow(2) + (y - ty).pow(2)
    };
    let others: Vec<usize> = (0..scene.objects.len()).filter(|&i| i != target).collect();
    let same: Vec<usize> = others
        .iter()
        .copied()
        .filter(|&i| scene.objects[i].category == t.category)
        .collect();
    let mut pool = if same.is_empty() { others } else { same };
    pool.sort_by_key(|&i| (dist(i), scene.objects[i].id));
    pool.truncate(max);
    pool
}

/// Mean of unit-normalised differences `(o_i - o_j) / |o_i - o_j|`; an
/// identical comparison contributes a zero vector.
pub fn appearance_diff(target: &[f64], comps: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; target.len()];
    if comps.is_empty() {
        return out;
    }
    for c in comps {
        let diff: Vec<f64> = target.iter().zip(c.iter()).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (o, d) in out.iter_mut().zip(&diff) {
                *o += d / norm;
            }
        }
    }
    let n = comps.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Per comparison `[dx_tl/w, dy_tl/h, dx_br/w, dy_br/h, w_j h_j/(w h)]` with
/// offsets taken comparison minus target, zero-padded to `max` blocks.
pub fn location_diff(target: &BBox, comps: &[BBox], max: usize) -> Result<Vec<f64>> {
    let (w, h) = (target.width() as f64, target.height() as f64);
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::Dataset(format!(
            "zero-area target box {target:?} has no relative geometry"
        )));
    }
    let mut out = vec![0.0; 5 * max];
    for (k, c) in comps.iter().take(max).enumerate() {
        let block = [
            f64::from(c.x1 - target.x1) / w,
            f64::from(c.y1 - target.y1) / h,
            f64::from(c.x2 - target.x2) / w,
            f64::from(c.y2 - target.y2) / h,
            (c.width() * c.height()) as f64 / (w * h),
        ];
        out[5 * k..5 * k + 5].copy_from_slice(&block);
    }
    Ok(out)
}

/// Features of every object in `scene`, in object order.
pub fn encode_scene(scene: &Scene, cfg: &VisualConfig) -> Result<Vec<VisualFeature>> {
    let raw: Vec<Vec<f64>> = scene
        .objects
        .iter()
        .map(|o| cfg.features.raw_feature(scene, o))
        .collect();
    let dim = cfg.features.dim();
    let mut context = vec![0.0; dim];
    for r in &raw {
        for (c, v) in context.iter_mut().zip(r) {
            *c += v;
        }
    }
    let n = raw.len().max(1) as f64;
    context.iter_mut().for_each(|c| *c /= n);

    (0..scene.objects.len())
        .map(|i| {
            let comps = select_comparisons(scene, i, cfg.max_comparisons);
            let comp_raw: Vec<&[f64]> = comps.iter().map(|&j| raw[j].as_slice()).collect();
            let comp_boxes: Vec<BBox> = comps.iter().map(|&j| scene.objects[j].bbox).collect();
            let bbox = &scene.objects[i].bbox;
            Ok(VisualFeature {
                object: raw[i].clone(),
                context: context.clone(),
                location: location_feature(bbox, scene.canvas)?,
                appearance_diff: appearance_diff(&raw[i], &comp_raw),
                location_diff: location_diff(bbox, &comp_boxes, cfg.max_comparisons)?,
                comparisons: comps.len(),
            })
        })
        .collect()
}

/// Concatenated pre-fusion features indexed by scene position, then object
/// position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureCache {
    pub scenes: Vec<Vec<Vec<f64>>>,
}

impl FeatureCache {
    pub fn build(dataset: &Dataset, cfg: &VisualConfig) -> Result<Self> {
        let scenes = dataset
            .scenes
            .iter()
            .map(|s| {
                Ok(encode_scene(s, cfg)?
                    .iter()
                    .map(VisualFeature::concat)
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { scenes })
    }

    pub fn get(&self, scene: usize, object: usize) -> &[f64] {
        &self.scenes[scene][object]
    }
}

/// The fusion layer `r = W_m [o, g, l, dv, dl] + b_m`.
pub fn fuser(cfg: &VisualConfig, output: usize) -> Linear {
    Linear::new(FUSE, cfg.input_dim(), output)
}

/// Fuses a batch of concatenated features (one row each).
pub fn fuse(g: &mut Graph, store: &ParamStore, layer: &Linear, rows: &[&[f64]]) -> Result<Var> {
    let x = g.constant(Array::from_rows(rows)?);
    layer.forward(g, store, x)
}
