//! Run configuration: defaults, then a JSON file, then explicit flags.

use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => panic!("argument structs serialize to JSON objects"),
    }
}

/// Merges `file` (keys mirror flag names, `-` or `_`) over the clap
/// defaults in `args`, then re-applies every flag given on the command line.
pub fn resolve<A: Serialize + DeserializeOwned>(
    args: &A,
    matches: &ArgMatches,
    file: Option<&Path>,
) -> Result<A, CliError> {
    let flags = object(serde_json::to_value(args).expect("arguments serialize"));
    let mut merged = flags.clone();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: invalid JSON: {e}", path.display())))?;
        let Value::Object(doc) = doc else {
            return Err(CliError::Config(format!("{}: config must be a JSON object", path.display())));
        };
        for (k, v) in doc {
            let key = k.replace('-', "_");
            if !merged.contains_key(&key) {
                return Err(CliError::Config(format!("{}: unknown key {k:?}", path.display())));
            }
            merged.insert(key, v);
        }
    }
    for (k, v) in flags {
        let given = matches.ids().any(|id| id.as_str() == k) && matches.value_source(&k) == Some(ValueSource::CommandLine);
        if given {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(format!("config: {e}")))
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}
