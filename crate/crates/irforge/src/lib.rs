//! irforge: build-configuration deduplication and deploy-time specialization
//! for IR containers.
//!
//! The pipeline discovers an application's specialization points, intersects
//! them with target-system features, deduplicates translation units across
//! build configurations into a shared IR core plus per-configuration deltas,
//! and plans deploy-time lowering so that one portable artifact specializes
//! to any system at deployment.

pub mod buildscan;
pub mod catalog;
pub mod cli;
pub mod dedup;
pub mod deploy;
pub mod discover;
pub mod driver;
pub mod flags;
pub mod forge;
pub mod matcher;
pub mod preprocess;
pub mod tables;
pub mod schema;
pub mod sysprobe;
pub mod version;
