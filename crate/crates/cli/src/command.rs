use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::config::{validate_key, UnknownKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Verb {
    Synth,
    Train,
    Eval,
    Gradcheck,
    Selftest,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Synth => "synth",
            Verb::Train => "train",
            Verb::Eval => "eval",
            Verb::Gradcheck => "gradcheck",
            Verb::Selftest => "selftest",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    pub verb: Verb,
    pub config_path: Option<PathBuf>,
    /// `(dotted key, raw value)` in command-line order.
    pub overrides: Vec<(String, String)>,
    pub output_dir: PathBuf,
}

#[derive(Parser, Debug)]
#[command(name = "composeae", version, about = "Compose image and text features by complex rotation")]
struct Args {
    verb: Verb,
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set weights.lambda_sym=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory receiving every output file.
    #[arg(long = "out", value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    /// Bad arguments; the message carries clap's usage text.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    UnknownKey(#[from] UnknownKey),
    /// `--help` or `--version`; the message is the text to print.
    #[error("{0}")]
    Info(String),
}

/// Parses arguments that follow the program name.
pub fn parse_command<I, T>(args: I) -> Result<Command, ParseError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv = std::iter::once(OsString::from("composeae")).chain(args.into_iter().map(Into::into));
    let parsed = Args::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            ParseError::Info(e.render().to_string())
        }
        _ => ParseError::Usage(e.render().to_string().trim_end().to_string()),
    })?;
    let mut overrides = Vec::with_capacity(parsed.set.len());
    for item in parsed.set {
        let Some((key, value)) = item.split_once('=') else {
            return Err(ParseError::Usage(format!("--set expects KEY=VALUE, got {item:?}")));
        };
        validate_key(key)?;
        overrides.push((key.to_string(), value.to_string()));
    }
    Ok(Command { verb: parsed.verb, config_path: parsed.config, overrides, output_dir: parsed.out })
}
