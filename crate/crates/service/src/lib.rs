//! HTTP service, renderer and scheduler bench for branching simulations.

pub mod api;
pub mod bench;
pub mod error;
pub mod render;

pub use api::router;
pub use error::{ApiError, ErrorCode};
