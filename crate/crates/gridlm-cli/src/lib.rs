//! Library surface of the `gridlm` binary: the command implementations and
//! manifest plumbing, exposed so integration tests can drive commands
//! in-process and inspect their outputs.

pub mod commands;
pub mod manifest;
