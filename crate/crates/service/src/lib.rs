//! Service front end for powderbo: the HTTP session API and the helpers
//! shared by the `powderbo` command-line tool.

pub mod api;

pub use api::{router, AppState};
