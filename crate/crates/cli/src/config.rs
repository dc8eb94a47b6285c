//! `--config FILE` support. Top-level keys of the TOML file become global
//! flags and the table named after the subcommand becomes its flags. They are
//! spliced in ahead of the explicit arguments, and since every argument
//! overrides earlier occurrences of itself, explicit flags win.
//!
//! ```toml
//! seed = 7
//! threads = 4
//!
//! [train-srm]
//! epochs = 20
//! hidden = [128, 64]
//! ```

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches};

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Config(String),
}

fn command<C: CommandFactory>() -> clap::Command {
    let mut cmd = C::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

fn to_flags(table: &toml::Table, context: &str) -> Result<Vec<OsString>, ParseFailure> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &toml::Value| -> Result<String, ParseFailure> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(f.to_string()),
                other => Err(ParseFailure::Config(format!("{context}: unsupported value for `{key}`: {other}"))),
            }
        };
        match value {
            toml::Value::Table(_) => continue,
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
                out.push(flag.into());
                out.push(parts.join(",").into());
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}

/// Parses `args`, layering in the `--config` file when one is given.
pub fn parse_with_config<C: CommandFactory + FromArgMatches>(args: Vec<OsString>) -> Result<C, ParseFailure> {
    let matches = command::<C>().try_get_matches_from(&args).map_err(ParseFailure::Clap)?;
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return C::from_arg_matches(&matches).map_err(ParseFailure::Clap);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ParseFailure::Config(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| ParseFailure::Config(format!("invalid config {}: {e}", path.display())))?;
    let context = path.display().to_string();
    let global = to_flags(&table, &context)?;
    let sub_name = matches.subcommand_name().map(str::to_string);
    let sub = match sub_name.as_deref().and_then(|n| table.get(n)) {
        Some(toml::Value::Table(t)) => to_flags(t, &context)?,
        _ => Vec::new(),
    };
    let sub_pos = sub_name
        .as_deref()
        .and_then(|n| args.iter().skip(1).position(|a| a == n).map(|p| p + 2))
        .unwrap_or(args.len());
    let mut merged: Vec<OsString> = Vec::with_capacity(args.len() + global.len() + sub.len());
    merged.push(args[0].clone());
    merged.extend(global);
    merged.extend(args[1..sub_pos].iter().cloned());
    merged.extend(sub);
    merged.extend(args[sub_pos..].iter().cloned());
    let matches = command::<C>().try_get_matches_from(merged).map_err(ParseFailure::Clap)?;
    C::from_arg_matches(&matches).map_err(ParseFailure::Clap)
}
