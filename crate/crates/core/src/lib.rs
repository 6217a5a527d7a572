//! Joint training of a referring-expression speaker, a joint-embedding
//! listener and a learned-reward reinforcer, over a synthetic world whose
//! exact semantics make every reward and ambiguity judgement checkable.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod listener;
pub mod model;
pub mod optim;
pub mod reinforcer;
pub mod rng;
pub mod speaker;
pub mod trainer;
pub mod visual;
pub mod world;

pub use error::{Error, Result};
