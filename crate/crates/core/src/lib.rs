//! WISE lifelong model editing on a tiny from-scratch transformer.
//!
//! Edits go into side copies of one FFN value matrix. A routing activation
//! decides per query whether the side memory or the untouched main memory
//! answers. Edits are spread over random-mask shards that are merged with
//! Ties, Linear or Sign merging.

pub mod editor;
pub mod error;
pub mod harness;
pub mod merge;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod side_memory;

pub use error::{Result, WiseError};
pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Model64 = model::TinyTransformer<f64>;
pub type Model32 = model::TinyTransformer<f32>;
pub type SideMemory64 = side_memory::SideMemory<f64>;
pub type SideMemory32 = side_memory::SideMemory<f32>;
pub type MemoryBank64 = side_memory::MemoryBank<f64>;
pub type MemoryBank32 = side_memory::MemoryBank<f32>;
pub type Editor64<'m> = editor::Editor<'m, f64>;
pub type Editor32<'m> = editor::Editor<'m, f32>;
