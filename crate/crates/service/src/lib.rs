//! Chat service over the persona dialogue models: session management, an
//! HTTP JSON API for the browser client, and the `persona` command line.

pub mod api;
pub mod cli;
pub mod error;
pub mod session;

pub use error::ServiceError;
