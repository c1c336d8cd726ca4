//! Building blocks of the `lrvi` command-line tool.

pub mod bench;
pub mod cluster;
pub mod format;
pub mod obs;
pub mod pipeline;
pub mod synthetic;
