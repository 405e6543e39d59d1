// SPDX-License-Identifier: Apache-2.0

//! Trace-driven discrete-event simulator of a multi-tenant GPU cluster.

pub mod cluster;
pub mod engine;
pub mod exec;
pub mod rng;
pub mod workload;
pub mod failure;
pub mod metrics;
pub mod scheduler;
pub mod sim;
pub mod experiment;
