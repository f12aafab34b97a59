use std::process::ExitCode;

use composeae_cli::{parse_command, run, ParseError};
use serde_json::json;

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<composeae::Error>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<ParseError>() {
            return match e {
                ParseError::UnknownKey(_) => "config",
                _ => "usage",
            };
        }
        if cause.downcast_ref::<composeae_cli::config::UnknownKey>().is_some() {
            return "config";
        }
    }
    "error"
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cmd = match parse_command(std::env::args_os().skip(1)) {
        Ok(cmd) => cmd,
        Err(ParseError::Info(text)) => {
            print!("{text}");
            return ExitCode::SUCCESS;
        }
        Err(e @ ParseError::Usage(_)) => return fail("usage", &e.to_string(), 2),
        Err(e @ ParseError::UnknownKey(_)) => return fail("config", &e.to_string(), 2),
    };
    match run(&cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), &format!("{e:#}"), 1),
    }
}
