//! Core pipeline for enriching short vulnerability descriptions.
//!
//! Stages, in order: [`acquire`] pulls CVE records and scrapes `<p>` text from
//! their references, [`textprep`] cleans and length-gates it, [`augment`]
//! keeps paragraphs whose embedding ([`embed`]) is close enough to the
//! description, [`refine`] removes redundancy, and [`evalkit`] scores and
//! describes the result.

pub mod acquire;
pub mod augment;
pub mod embed;
pub mod evalkit;
pub mod model;
pub mod refine;
pub mod textprep;

pub use model::{AugmentedInstance, DatasetManifest, Paragraph, Stage, VulnRecord};
