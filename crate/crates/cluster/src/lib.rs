// SPDX-License-Identifier: Apache-2.0

//! Desk-scale cluster of BarbiE instances.
//!
//! [`launch`] starts instances as separate processes over one shared store,
//! [`lb`] is the sticky load balancer in front of them and [`bench`] drives
//! the benchmark workloads through it.

pub mod bench;
pub mod launch;
pub mod lb;

pub use launch::{launch_cluster, Cluster, ClusterSpec, Instance, LaunchError};
pub use lb::{LbConfig, Routing};
