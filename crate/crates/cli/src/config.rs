//! Flat `key=value` config files. Keys are long flag names of the selected
//! subcommand or of the global flags. Command-line flags win; unknown keys
//! are errors.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command, CommandFactory, FromArgMatches};

use crate::args::Cli;

const RESERVED: &[&str] = &["config", "help", "version"];

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Config(String),
}

impl From<clap::Error> for ParseFailure {
    fn from(e: clap::Error) -> Self {
        ParseFailure::Clap(e)
    }
}

pub fn parse(argv: Vec<OsString>) -> Result<Cli, ParseFailure> {
    let mut cmd = Cli::command();
    cmd.build();
    let matches = cmd.clone().try_get_matches_from(&argv)?;
    let Some(path) = matches.get_one::<std::path::PathBuf>("config").cloned() else {
        return Ok(Cli::from_arg_matches(&matches)?);
    };

    let (leaf, leaf_matches) = leaf(&cmd, &matches);
    let extra = config_args(&path, leaf, leaf_matches)?;
    if extra.is_empty() {
        return Ok(Cli::from_arg_matches(&matches)?);
    }
    let mut argv = argv;
    argv.extend(extra.into_iter().map(OsString::from));
    let matches = cmd.try_get_matches_from(&argv)?;
    Ok(Cli::from_arg_matches(&matches)?)
}

fn leaf<'a>(mut cmd: &'a Command, mut m: &'a ArgMatches) -> (&'a Command, &'a ArgMatches) {
    while let Some((name, sub)) = m.subcommand() {
        match cmd.find_subcommand(name) {
            Some(c) => {
                cmd = c;
                m = sub;
            }
            None => break,
        }
    }
    (cmd, m)
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// Flags to append after the user's arguments, skipping every key the user
/// already set on the command line.
fn config_args(path: &Path, cmd: &Command, m: &ArgMatches) -> Result<Vec<String>, ParseFailure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ParseFailure::Config(format!("cannot read config {}: {e}", path.display())))?;
    let fail = |line: usize, msg: String| ParseFailure::Config(format!("{}:{line}: {msg}", path.display()));
    let find = |long: &str| cmd.get_arguments().find(|a| a.get_long() == Some(long));
    let on_command_line =
        |long: &str| find(long).is_some_and(|a| m.value_source(a.get_id().as_str()) == Some(ValueSource::CommandLine));

    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(i + 1, format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let arg = find(key)
            .filter(|_| !RESERVED.contains(&key))
            .ok_or_else(|| fail(i + 1, format!("unknown key {key:?} for `{}`", cmd.get_name())))?;

        let negation = format!("no-{key}");
        let partner = key.strip_prefix("no-").map(str::to_string).unwrap_or(negation.clone());
        if on_command_line(key) || on_command_line(&partner) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match parse_bool(value) {
                Some(true) => out.push(format!("--{key}")),
                Some(false) if find(&negation).is_some() => out.push(format!("--{negation}")),
                Some(false) => {}
                None => return Err(fail(i + 1, format!("{key} expects true or false, got {value:?}"))),
            },
            _ => out.push(format!("--{key}={value}")),
        }
    }
    Ok(out)
}
