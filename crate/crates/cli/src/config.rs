//! Config files. Each TOML section names a subcommand (`[evaluate]`,
//! `[serve.coordinator]`) and each key names one of its flags without the
//! leading dashes:
//!
//! ```toml
//! [evaluate]
//! synthetic = true
//! kind = "ls"
//! alpha-label = 0.6
//! metrics = ["accuracy", "f1-macro"]
//! ```
//!
//! Section keys become flags inserted right after the subcommand. A key is
//! skipped when the same flag is on the command line or its environment
//! variable is set, so flags beat environment beats file beats default.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use flam_core::federation::{ENV_COORDINATOR_ADDR, ENV_PHASE_TIMEOUT_MS, ENV_REGISTRATION_TIMEOUT_MS};
use toml::{Table, Value};

use crate::error::CliError;

const SUBCOMMANDS: [&str; 5] = ["partition", "generate", "evaluate", "sweep", "serve"];
const SERVE_ROLES: [&str; 2] = ["coordinator", "participant"];

fn env_for(flag: &str) -> Option<&'static str> {
    match flag {
        "addr" => Some(ENV_COORDINATOR_ADDR),
        "phase-timeout-ms" => Some(ENV_PHASE_TIMEOUT_MS),
        "registration-timeout-ms" | "connect-timeout-ms" => Some(ENV_REGISTRATION_TIMEOUT_MS),
        _ => None,
    }
}

/// Returns `argv` with the config file's flags spliced in, or unchanged when
/// no `--config` is given.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(path) = config_path(&args) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io {
        path: path.clone(),
        source: e,
    })?;
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("{}: {e}", path.display())))?;

    let Some((insert_at, section)) = locate_section(&args, &table)? else {
        return Ok(argv);
    };
    let given: Vec<&str> = args[insert_at..]
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();

    let mut extra = Vec::new();
    for (key, value) in section {
        let flag = key.replace('_', "-");
        if given.contains(&flag.as_str()) || env_for(&flag).is_some_and(|v| std::env::var_os(v).is_some()) {
            continue;
        }
        match value {
            Value::Boolean(true) => extra.push(format!("--{flag}")),
            Value::Boolean(false) => {}
            Value::Table(_) => {
                return Err(CliError::Usage(format!(
                    "{}: `{key}` is a table, expected a flag value",
                    path.display()
                )))
            }
            Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",");
                extra.push(format!("--{flag}={joined}"));
            }
            other => extra.push(format!("--{flag}={}", scalar(&other)?)),
        }
    }
    let mut out = argv;
    out.splice(insert_at..insert_at, extra.into_iter().map(OsString::from));
    Ok(out)
}

fn scalar(v: &Value) -> Result<String, CliError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        other => Err(CliError::Usage(format!("unsupported config value `{other}`"))),
    }
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Index just past the subcommand tokens, and the matching config section.
fn locate_section(args: &[String], table: &Table) -> Result<Option<(usize, Table)>, CliError> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].as_str();
        if a == "--config" {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&a) {
            break;
        }
        i += 1;
    }
    let Some(name) = args.get(i) else {
        return Ok(None);
    };
    let section = table.get(name.as_str());
    if name != "serve" {
        return match section {
            None => Ok(Some((i + 1, Table::new()))),
            Some(Value::Table(t)) => Ok(Some((i + 1, t.clone()))),
            Some(_) => Err(CliError::Usage(format!("config section `{name}` must be a table"))),
        };
    }
    let Some(role) = args.get(i + 1).filter(|r| SERVE_ROLES.contains(&r.as_str())) else {
        return Ok(None);
    };
    let nested = section
        .and_then(|s| s.get(role.as_str()))
        .and_then(Value::as_table)
        .cloned()
        .unwrap_or_default();
    Ok(Some((i + 2, nested)))
}
