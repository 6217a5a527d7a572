//! Synthetic scenes of attributed objects, a small compositional expression
//! language over them, and exact oracles for what an expression denotes.

mod generate;
mod grammar;
mod scene;
mod vocab;

pub use generate::{generate_dataset, Dataset, RefRef, WorldConfig};
pub use grammar::{
    choose_template, denote, denotes_uniquely, oracle_expression, realize, SurfaceNoise, Template,
};
pub use scene::{
    iou, jitter_boxes, located, location_of, BBox, Category, Color, FeatureSpec, Location, RefExpr,
    Scene, SceneObject, SizeClass, Split,
};
pub use vocab::{Expression, Predicate, Vocabulary, BEGIN, DEFAULT_MAX_LEN, END, UNK};
