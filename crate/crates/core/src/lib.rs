//! An instruction-driven generalist vision model, end to end and CPU only.
//!
//! Language instructions define the task: they carry a category set that binds
//! class names to semantics-agnostic class tokens, a coordinate range for
//! discretised location tokens, and an output-format tuple that tells the
//! decoder what to produce. A language-guided image tokenizer turns the image
//! into a small set of (embedding, location) tokens, and a causal decoder with
//! an extended vocabulary emits classes, coordinates and text on top of them.
//!
//! Everything is generic over the scalar type through [`Scalar`]; training
//! runs in `f32` while numerical oracles (gradient checks, geometry) use
//! `f64`. Concrete aliases for the common instantiations live at the crate
//! root.

pub mod checkpoint;
pub mod coord;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod instruction;
pub mod matching;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tokenizer;
pub mod train;
pub mod vocab;

pub use error::Error;
pub use scalar::Scalar;

// Concrete aliases for the common instantiations, kept at the root so
// downstream code can stay monomorphic: `f32` is the training precision,
// `f64` backs the numerical oracles.
pub type TapeF32 = nn::Tape<f32>;
pub type TapeF64 = nn::Tape<f64>;
pub type ParamStoreF32 = nn::ParamStore<f32>;
pub type ParamStoreF64 = nn::ParamStore<f64>;
pub type BoundF32<'a> = nn::Bound<'a, f32>;
pub type BoundF64<'a> = nn::Bound<'a, f64>;
pub type GradientsF32 = nn::Gradients<f32>;
pub type GradientsF64 = nn::Gradients<f64>;
pub type AdamWF32 = nn::AdamW<f32>;
pub type AdamWF64 = nn::AdamW<f64>;
pub type BBoxF32 = geometry::BBox<f32>;
pub type BBoxF64 = geometry::BBox<f64>;
pub type PolygonMaskF32 = geometry::PolygonMask<f32>;
pub type PolygonMaskF64 = geometry::PolygonMask<f64>;
