//! Deterministic desk-scale simulator of a key-value store built on a
//! disaggregated persistent-memory pool.
//!
//! Compute nodes (KNs) own disjoint key partitions, keep an adaptive cache of
//! full values and shortcuts, batch writes into sealed log segments, and reach
//! the shared pool only through one-sided fabric ops. Pool-side workers merge
//! sealed segments into a lock-free metadata index and collect dead segments.
//! A control node watches per-epoch statistics and reconfigures membership and
//! per-key replication without copying data at the pool. Everything runs on a
//! single-threaded discrete-event engine, so a run is a pure function of
//! configuration and seed.

pub mod checker;
pub mod cluster;
pub mod config;
pub mod control;
pub mod dac;
pub mod dpm;
pub mod fabric;
pub mod hash;
pub mod kn;
pub mod routing;
pub mod wire;
