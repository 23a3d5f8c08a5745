//! Structure-aware superquadric shape abstraction.
//!
//! A watertight mesh (or a precomputed signed-distance grid) is turned into a
//! small set of superquadrics that overlap little and follow the structural parts
//! of the shape. The stages are:
//!
//! 1. [`grid`]: voxelize into a truncated signed distance field.
//! 2. [`decomp`]: cut the interior into convex-ish partitions along salient slices.
//! 3. [`pipeline`]: fit one primitive per partition, regrow each against the whole
//!    shape, then fill what is left while pruning small residue.
//! 4. [`metrics`]: score an abstraction against its reference.
//!
//! Fitted primitives are removed from the target field by *carving*, which turns
//! their interior into exterior so that later primitives do not overlap them.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod abstraction;
pub mod config;
pub mod decomp;
pub mod fitter;
pub mod grid;
pub mod hull;
pub mod kdtree;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod shapes;
pub mod superquadric;

pub use abstraction::{Abstraction, LabeledSuperquadric, Normalization, Stage};
pub use config::RunConfig;
pub use grid::{TsdfGrid, UpdateHistory};
pub use mesh::TriMesh;
pub use superquadric::Superquadric;
