//! File formats, the external codec client, report emission and the
//! command-line front end around [`dinvmark_core`].

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use dinvmark_core as core;
pub use error::{Error, Result};
