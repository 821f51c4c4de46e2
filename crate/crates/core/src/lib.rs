//! Ground-plane rectification of fixed traffic cameras onto georeferenced
//! orthoimagery, plus the braking-event analytics built on top of it.
//!
//! The crate is organised along the data flow:
//!
//! * [`ortho`] fetches and georeferences orthoimagery (pixel <-> metres).
//! * [`correspond`] holds the manually clicked camera/ortho point pairs and
//!   site annotations (stop bar, median).
//! * [`homog`] estimates the camera -> ortho homography robustly and applies it.
//! * [`tracks`] turns detection records into metric trajectories.
//! * [`braking`] computes stop-bar kinematics and validated braking events.
//! * [`analytics`] aggregates events into report products.
//! * [`store`] persists trajectories and events in an append-only file store.
//! * [`pipeline`] composes the above for one video; the CLI and the HTTP
//!   service both call into it.
//! * [`synthkit`] generates scenes with known ground truth.

// Checks like `!(x > 0.0)` are written that way so NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod braking;
pub mod config;
pub mod correspond;
pub mod geom;
pub mod homog;
pub mod ortho;
pub mod pipeline;
pub mod stats;
pub mod store;
pub mod synthkit;
pub mod time;
pub mod tracks;

pub use geom::{CameraPoint, OrthoPoint, WorldPoint};
