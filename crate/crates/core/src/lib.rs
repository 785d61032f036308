//! Unified 2D/3D instance and semantic segmentation on posed RGB-D input,
//! desk-scale: synthetic scene generation, interleaved 2D/3D feature fusion,
//! query-based mask decoding, set-loss training, and evaluation.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod evalmetrics;
pub mod fusion3d;
pub mod geometry;
pub mod graph;
pub mod learn;
pub mod model;
pub mod nn;
pub mod scenedata;
pub mod tensor;
