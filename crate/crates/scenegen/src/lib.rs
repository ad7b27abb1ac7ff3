//! On-demand traffic scenario generation from temporal scene graphs.
//!
//! The pipeline: frame annotations become ontology-validated temporal scene
//! graphs; a temporal graph neural model learns to predict ego-vehicle
//! relations conditioned on a requested AV action and criticality; predicted
//! graphs compile to scenario scripts, OpenSCENARIO-subset XML, and a
//! deterministic kinematic playback that reports realized criticality.

pub mod config;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod ontology;
pub mod playback;
pub mod scenario;
pub mod synth;
pub mod xosc;
