//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod array;
pub mod gradcheck;
mod graph;
mod nn;
mod params;

pub use array::Array;
pub use graph::{Graph, Mode, Var};
pub use nn::{Linear, Lstm};
pub use params::ParamStore;
