pub mod pipeline;
pub mod query;
pub mod solver;
pub mod store;
pub mod strata;
