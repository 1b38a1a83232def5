pub mod dataset;
pub mod ingest;
pub mod model;
pub mod qc;
pub mod round;
pub mod service;
pub mod synth;
