//! `--config FILE` support: a JSON object whose keys are flag names. Its
//! values are spliced in right after the subcommand, ahead of the explicit
//! flags, so anything on the command line takes precedence.

use std::fs;

use serde_json::Value;

use crate::Failure;

const SUBCOMMANDS: [&str; 5] = ["gen-data", "train", "eval", "baseline", "diagnose"];

fn take_config(argv: &mut Vec<String>) -> Result<Option<String>, Failure> {
    let mut found = None;
    let mut k = 1;
    while k < argv.len() {
        if argv[k] == "--config" {
            if k + 1 >= argv.len() {
                return Err(Failure::Usage("--config needs a file".into()));
            }
            found = Some(argv.remove(k + 1));
            argv.remove(k);
        } else if let Some(path) = argv[k].strip_prefix("--config=") {
            found = Some(path.to_string());
            argv.remove(k);
        } else {
            k += 1;
        }
    }
    Ok(found)
}

fn flag_tokens(key: &str, value: &Value) -> Result<Vec<String>, Failure> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &Value| match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(Failure::Usage(format!(
            "config key {key:?}: unsupported value {v}"
        ))),
    };
    Ok(match value {
        Value::Bool(true) => vec![flag],
        Value::Bool(false) | Value::Null => vec![],
        Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
            vec![flag, parts.join(",")]
        }
        v => vec![flag, scalar(v)?],
    })
}

/// Rewrites `argv` with the contents of any `--config` file expanded.
pub fn expand(mut argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let Some(path) = take_config(&mut argv)? else {
        return Ok(argv);
    };
    let text =
        fs::read_to_string(&path).map_err(|e| Failure::Io(format!("--config {path}: {e}")))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("--config {path}: {e}")))?;
    let Value::Object(map) = value else {
        return Err(Failure::Usage(format!(
            "--config {path}: expected a JSON object"
        )));
    };
    let mut tokens = Vec::new();
    for (key, v) in &map {
        tokens.extend(flag_tokens(key, v)?);
    }
    let at = argv
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map(|k| k + 1)
        .ok_or_else(|| Failure::Usage("--config must accompany a subcommand".into()))?;
    argv.splice(at..at, tokens);
    Ok(argv)
}
