//! U-shaped volumetric segmentation networks whose hierarchical layers are
//! either selective state-space (Mamba-style) scans or attention, plus the
//! kernels, cost model and toy training loop they need.

pub mod blocks;
pub mod cost;
pub mod counters;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod params;
pub mod scan_order;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
