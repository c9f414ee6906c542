//! Pipeline toolkit for geotagged event streams: quality filtering, nearest
//! landuse-parcel assignment, per-user key-location extraction, and the two
//! cross-city consistency metrics (locational bias and hourly activity
//! signatures compared by dynamic time warping).
//!
//! The crate is organized as one module per pipeline stage:
//!
//! * [`ingest`] — event parsing, duplicate removal, user-quality filters
//! * [`landuse`] — parcel maps, activity legend, nearest-parcel spatial join
//! * [`keylocations`] — per-user DBSCAN clusters with dominant landuse labels
//! * [`metrics`] — locational-bias regression and hourly signatures
//! * [`similarity`] — DTW distance matrix and UPGMA dendrogram
//! * [`synth`] — seeded synthetic cities with known ground truth
//!
//! With the default `parallel` feature the hot loops run on rayon; all of
//! them are order-preserving maps, so output is byte-identical for any
//! worker count and for the sequential fallback.

pub mod error;
pub mod exec;
pub mod geo;
pub mod index;
pub mod ingest;
pub mod keylocations;
pub mod landuse;
pub mod metrics;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
