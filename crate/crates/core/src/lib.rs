//! Multilingual AMR-to-text generation.
//!
//! The pipeline runs from PENMAN text to generated sentences:
//! [`amr`] parses graphs, [`linearize`] flattens them with depth and subgraph
//! features, [`subword`] segments both sides, [`corpus`] builds and batches
//! the multilingual dataset, [`model`] is the transformer on top of the
//! autodiff engine in [`tensor`], [`pretrain`] and [`train`] fit it,
//! [`generate`] decodes, and [`eval`] scores.

pub mod amr;
pub mod corpus;
pub mod eval;
pub mod generate;
pub mod lang;
pub mod linearize;
pub mod model;
pub mod pretrain;
pub mod subword;
pub mod tensor;
pub mod toy;
pub mod train;
