//! Command-line front end for training and evaluating composition models.

pub mod command;
pub mod config;
pub mod run;
pub mod selftest;

pub use command::{parse_command, Command, ParseError, Verb};
pub use run::run;
