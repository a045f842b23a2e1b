//! Predictive-corrective selective state-space segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense arrays and a reverse-mode tape.
//! * [`ssm`]: zero-order-hold discretisation and the selective / modulated scans.
//! * [`pcblock`]: the symmetry prior branch, the density-weighted corrective
//!   branch, their fusion, and the assembled block.
//! * [`network`]: the U-shaped network and its ablation variants.
//! * [`data`]: synthetic bilaterally symmetric phantoms and dataset files.
//! * [`metrics`]: overlap and boundary segmentation metrics.
//! * [`train`]: AdamW, cosine schedule, loss, training loop, checkpoints.
//! * [`verify`]: gradient checks, scan oracles and the empirical probes.

pub mod data;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod network;
pub mod params;
pub mod pcblock;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

#[cfg(test)]
mod testutil;
