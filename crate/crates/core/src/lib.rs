pub mod corpus;
pub mod defense;
pub mod eval;
pub mod importance;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod qrcodec;
pub mod raster;
pub mod service;
pub mod stegonet;
pub mod training;
