//! Pipeline commands and the annotation service behind the `echoqa` binary.

pub mod commands;
pub mod server;
pub mod store;
