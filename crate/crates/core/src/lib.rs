//! Harmonization benchmarking for multi-site volumetric image data.
//!
//! The crate has two independent halves. [`harmonize`] removes site effects
//! from a [`VoxelDataset`] with a pluggable method (identity, global scaling,
//! ComBat, or anything registered at startup). [`report`] measures whatever
//! site effects remain: voxel-wise one-way ANOVA with Bonferroni correction,
//! eta-squared, pairwise pooled t-tests with Hedges' g, and a summary table
//! that can be compared across methods.
//!
//! Everything else is plumbing: NIfTI-1 I/O ([`nifti`]), the sample table and
//! run configuration ([`table`], [`config`]), and a deterministic synthetic
//! benchmark generator ([`synth`]).

pub mod cli;
pub mod config;
pub mod dataset;
pub mod design;
pub mod error;
pub mod harmonize;
pub mod linalg;
pub mod mask;
pub mod nifti;
pub mod report;
pub mod stats;
pub mod synth;
pub mod table;

pub use dataset::{assemble_dataset, site_means, SiteLayout, SiteMeans, VoxelDataset};
pub use design::{build_design_matrix, CovariateKind, DesignColumn, DesignMatrix, DesignSpec};
pub use error::{Error, Result};
pub use mask::{erode_mask, Mask, VolumeGeometry};
pub use nifti::{read_volume, write_volume, ElementType, Volume};
pub use table::{CovariateValue, SampleRow, SampleTable, TableSchema};
