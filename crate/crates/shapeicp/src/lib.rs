//! Mesh-based active shape models and category-level SIM(3) pose + shape
//! estimation from a single segmented depth image.
//!
//! The crate has three layers:
//!
//! - [`geometry`], [`meshfit`], [`asm`]: meshes, the Umeyama alignment solver,
//!   template deformation losses, and PCA shape model construction.
//! - [`solver`], [`scoring`]: the alternating pose/shape optimizer with EM soft
//!   correspondences, multi-hypothesis rotation tracking, and hypothesis scoring
//!   (residual statistics, symmetry checks, depth rendering).
//! - [`app`]: depth-image ingestion, the synthetic scene generator, evaluation
//!   metrics, and file formats backing the `shapeicp` CLI.
//!
//! A narrative guide with runnable snippets lives in `book/`; its code blocks
//! are compiled as doc-tests through the [`guide`] module.

pub mod app;
pub mod asm;
pub mod geometry;
pub mod guide;
pub mod meshfit;
pub mod scoring;
pub mod solver;
