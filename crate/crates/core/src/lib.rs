#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod app;
pub mod draws;
pub mod error;
pub mod gibbs;
pub mod lca;
pub mod loglinear;
pub mod metrics;
pub mod random;
pub mod scenario;
pub mod table;

pub use error::{MillsError, Result};
