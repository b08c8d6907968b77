//! Audit toolkit for text-to-image diffusion models: forges semantically
//! non-sensitive prompts that still elicit protected visual features, and
//! detects partial reproduction via attention-guided region matching.

pub mod backend;
pub mod datamodel;
pub mod error;
pub mod fixture;
pub mod forge;
pub mod keywords;
pub mod pipeline;
pub mod pruner;
pub mod registry;
pub mod report;
pub mod tester;

pub use error::{AuditError, Result};
