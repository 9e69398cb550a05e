//! HTTP service and command-line front end for `imagetalk-core`.

pub mod api;
pub mod backends;
pub mod cli;

pub use api::{router, serve, AppState};
pub use backends::BackendArgs;
