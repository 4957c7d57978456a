//! IMU and 5G time-of-arrival fusion for MAV pose estimation.

pub mod config;
pub mod dataset;
pub mod eskf;
pub mod experiment;
pub mod geometry;
pub mod metrics;
pub mod pgo;
pub mod preintegration;
pub mod synth;
pub mod toa_sim;
