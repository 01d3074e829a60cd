//! Cross-view monocular 3D object detection testbed.
//!
//! Two camera domains (ego-vehicle and elevated roadside) observe the same
//! kind of traffic scenes from very different geometry. This crate bundles
//! everything needed to study cross-domain training between them at desk
//! scale:
//!
//! * [`geometry`] — box algebra, rotated BEV/3D IoU, pinhole projection.
//! * [`synthdata`] — a seeded paired-view scene generator and dataset writer.
//! * [`nn`] — a small f64 reverse-mode autodiff engine the model is built on.
//! * [`encoder`] — multi-scale CNN feature encoder with a depth-bin head.
//! * [`interaction`] — per-domain transformer encoders/decoder, prediction
//!   heads, Hungarian matching and the per-pair detection loss.
//! * [`crossdomain`] — query sampling, semantic/geometry channel decoupling
//!   and the cross-domain contrastive loss.
//! * [`trainer`] — the two-branch training loop and its loss composition.
//! * [`evaluator`] — AP@40 evaluation over IoU thresholds and difficulty
//!   bands, plus BEV plotting.

pub mod config;
pub mod crossdomain;
pub mod encoder;
pub mod evaluator;
pub mod geometry;
pub mod interaction;
pub mod nn;
pub mod parallel;
pub mod synthdata;
pub mod trainer;
