//! Scene graph generation with predicates modelled as learned functions over
//! node embeddings and spatial masks.

pub mod autograd;
pub mod checkpoint;
pub mod datamodel;
pub mod decoder;
pub mod error;
pub mod fewshot;
pub mod interp;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seeds;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};

