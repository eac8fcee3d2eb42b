//! Command-line front end for `madec`: config parsing, run directories and
//! the subcommands behind the `madec` binary.

pub mod commands;
pub mod config;
pub mod exit;
pub mod output;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book {}
