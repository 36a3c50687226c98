//! Optional TOML config file merged into the argument list.
//!
//! Top-level keys apply to every subcommand that has a flag of that name;
//! keys in a `[subcommand]` table apply to that subcommand only and win over
//! top-level ones. Flags given on the command line win over both.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};
use toml::{Table, Value};

use crate::UsageError;

/// Finds `--config PATH` or `--config=PATH` in raw arguments.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

pub fn load(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    text.parse::<Table>()
        .map_err(|e| UsageError(format!("{}: {}", path.display(), e.message())).into())
}

fn user_gave(args: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let with_value = format!("--{long}=");
    args.iter()
        .map(|a| a.to_string_lossy())
        .take_while(|a| a != "--")
        .any(|a| a == flag || a.starts_with(&with_value))
}

fn scalar(key: &str, v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        _ => bail!(UsageError(format!("config key `{key}` must be a scalar or a list of scalars"))),
    })
}

/// Returns `args` with config-file settings inserted after the subcommand.
/// `command` must be built so that global flags are visible on subcommands.
pub fn merge(command: &Command, args: Vec<OsString>, config: &Table) -> Result<Vec<OsString>> {
    let sub_pos = args
        .iter()
        .skip(1)
        .position(|a| command.find_subcommand(a.to_string_lossy().as_ref()).is_some())
        .map(|p| p + 1);
    let Some(sub_pos) = sub_pos else {
        return Ok(args);
    };
    let sub = command
        .find_subcommand(args[sub_pos].to_string_lossy().as_ref())
        .expect("found above");

    let known_anywhere = |key: &str| {
        command.get_arguments().any(|a| a.get_long() == Some(key))
            || command
                .get_subcommands()
                .any(|s| s.get_arguments().any(|a| a.get_long() == Some(key)))
    };

    let mut settings: BTreeMap<String, &Value> = BTreeMap::new();
    for (k, v) in config {
        if !v.is_table() {
            settings.insert(k.replace('_', "-"), v);
        }
    }
    for (k, v) in config {
        match v {
            Value::Table(t) if k == sub.get_name() => {
                for (k, v) in t {
                    settings.insert(k.replace('_', "-"), v);
                }
            }
            Value::Table(_) if command.find_subcommand(k).is_some() => {}
            Value::Table(_) => bail!(UsageError(format!("config section `[{k}]` is not a subcommand"))),
            _ => {}
        }
    }

    let user_args = &args[sub_pos + 1..];
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in settings {
        if key == "config" {
            continue;
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            if known_anywhere(&key) {
                continue;
            }
            bail!(UsageError(format!("unknown config key `{key}`")));
        };
        if user_gave(user_args, &key) || user_gave(&args[1..sub_pos], &key) {
            continue;
        }
        let values: Vec<&Value> = match value {
            Value::Array(items) => items.iter().collect(),
            v => vec![v],
        };
        for v in values {
            if matches!(arg.get_action(), ArgAction::SetTrue) {
                match v {
                    Value::Boolean(true) => injected.push(format!("--{key}").into()),
                    Value::Boolean(false) => {}
                    _ => bail!(UsageError(format!("config key `{key}` must be true or false"))),
                }
            } else {
                injected.push(format!("--{key}").into());
                injected.push(scalar(&key, v)?.into());
            }
        }
    }

    let mut out = args[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(user_args);
    Ok(out)
}
