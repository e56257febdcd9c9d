//! Flag tables, `key = value` config files and their merge.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Value,
    /// `--flag` alone means `true`; `--flag false` is also accepted.
    Switch,
    /// Test hook, absent from `--help`.
    Hidden,
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub kind: Kind,
}

pub const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        kind: Kind::Value,
    }
}

pub const fn switch(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
        kind: Kind::Switch,
    }
}

pub const fn hidden(name: &'static str, default: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help: "",
        kind: Kind::Hidden,
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn add_args(mut cmd: Command, keys: &[Key]) -> Command {
    for k in keys {
        let help = match k.default {
            Some(d) if !d.is_empty() => format!("{} [default: {d}]", k.help),
            _ => k.help.to_string(),
        };
        let mut arg = Arg::new(k.name)
            .long(flag_name(k.name))
            .help(help)
            .action(ArgAction::Set);
        arg = match k.kind {
            Kind::Value => arg.value_name(k.name.to_uppercase()),
            Kind::Switch => arg
                .num_args(0..=1)
                .default_missing_value("true")
                .value_name("BOOL"),
            Kind::Hidden => arg.num_args(0..=1).default_missing_value("true").hide(true),
        };
        cmd = cmd.arg(arg);
    }
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; flags on the command line take precedence"),
    )
}

/// Parses `key = value` lines. `#` starts a comment; keys may use `-` or `_`.
pub fn parse_config_file(
    text: &str,
    origin: &str,
    keys: &[Key],
) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{origin}:{}: expected `key = value`, got {line:?}",
                i + 1
            )));
        };
        let k = k.trim().replace('-', "_");
        if !keys.iter().any(|key| key.name == k) {
            return Err(CliError::Usage(format!(
                "{origin}:{}: unknown key {k:?}",
                i + 1
            )));
        }
        out.insert(k, v.trim().trim_matches('"').to_string());
    }
    Ok(out)
}

/// Resolved values in table order: defaults < config file < flags.
#[derive(Debug, Clone)]
pub struct Settings {
    values: Vec<(&'static str, Option<String>)>,
}

impl Settings {
    pub fn resolve(keys: &[Key], matches: &ArgMatches) -> Result<Settings, CliError> {
        let file = match matches.get_one::<String>("config") {
            Some(path) => {
                let text = std::fs::read_to_string(Path::new(path))
                    .map_err(|e| CliError::Usage(format!("cannot read config file {path}: {e}")))?;
                parse_config_file(&text, path, keys)?
            }
            None => BTreeMap::new(),
        };
        let values = keys
            .iter()
            .map(|k| {
                let v = matches
                    .get_one::<String>(k.name)
                    .cloned()
                    .or_else(|| file.get(k.name).cloned())
                    .or_else(|| k.default.map(str::to_string));
                (k.name, v)
            })
            .collect();
        Ok(Settings { values })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .unwrap_or_else(|| panic!("no setting named {key}"))
            .1
            .as_deref()
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        match self.optional(key)? {
            Some(v) => Ok(v),
            None => Err(CliError::Usage(format!(
                "missing required --{}",
                flag_name(key)
            ))),
        }
    }

    /// `None` when unset, empty, or `none`.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.raw(key) {
            None | Some("") | Some("none") => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                CliError::Usage(format!("invalid value {v:?} for --{}", flag_name(key)))
            }),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        match self.raw(key) {
            None | Some("") | Some("none") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        CliError::Usage(format!(
                            "invalid list entry {p:?} for --{}",
                            flag_name(key)
                        ))
                    })
                })
                .collect(),
        }
    }

    /// One line of `key=value` pairs for every set key.
    pub fn echo(&self) -> String {
        self.values
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}")))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
