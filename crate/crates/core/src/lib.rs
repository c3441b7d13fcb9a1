pub mod attention;
pub mod blocks;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod model;
pub mod params;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{ConvGeometry, CostKind, Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
