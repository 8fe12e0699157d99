//! `--config` support: a JSON object whose keys are long flag names.
//!
//! Top-level scalar keys apply to whichever subcommand runs; an object under a
//! subcommand's name applies only to that subcommand. Flags given on the
//! command line win over the file.

use std::collections::HashSet;
use std::ffi::OsString;

use anyhow::{bail, Context};
use serde_json::{Map, Value};

const SUBCOMMANDS: [&str; 6] = ["synth-data", "build-hypergraph", "train", "sample", "evaluate", "verify-symmetry"];
const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--seed", "--config", "--out-dir"];

fn flag_name(arg: &str) -> Option<String> {
    let body = arg.strip_prefix("--")?;
    Some(body.split_once('=').map_or(body, |(n, _)| n).to_string())
}

/// Returns `argv` with the config file's entries spliced in after the subcommand.
pub fn merge_config_file(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config_path = None;
    let mut subcommand = None;
    let mut given = HashSet::new();
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if let Some(name) = flag_name(a) {
            if name == "config" {
                config_path = match a.split_once('=') {
                    Some((_, v)) => Some(v.to_string()),
                    None => args.get(i + 1).cloned(),
                };
            }
            given.insert(name);
            if GLOBAL_VALUE_FLAGS.contains(&a.as_str()) {
                i += 1;
            }
        } else if subcommand.is_none() && SUBCOMMANDS.contains(&a.as_str()) {
            subcommand = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(at)) = (config_path, subcommand) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let root: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {path}"))?;
    let Value::Object(root) = root else {
        bail!("config {path} must be a JSON object");
    };
    let mut extra = Vec::new();
    let push_entries = |map: &Map<String, Value>, extra: &mut Vec<String>| -> anyhow::Result<()> {
        for (key, value) in map {
            let flag = key.replace('_', "-");
            if value.is_object() {
                continue;
            }
            if flag == "config" {
                bail!("config files cannot name another config file");
            }
            if given.contains(&flag) {
                continue;
            }
            match value {
                Value::Null | Value::Bool(false) => {}
                Value::Bool(true) => extra.push(format!("--{flag}")),
                Value::Number(n) => extra.extend([format!("--{flag}"), n.to_string()]),
                Value::String(s) => extra.extend([format!("--{flag}"), s.clone()]),
                Value::Array(items) => {
                    let parts: Vec<String> = items
                        .iter()
                        .map(|v| match v {
                            Value::String(s) => s.clone(),
                            other => other.to_string(),
                        })
                        .collect();
                    extra.extend([format!("--{flag}"), parts.join(",")]);
                }
                Value::Object(_) => unreachable!(),
            }
        }
        Ok(())
    };
    push_entries(&root, &mut extra)?;
    for (key, value) in &root {
        match value {
            Value::Object(section) if key == &args[at] => push_entries(section, &mut extra)?,
            Value::Object(_) if SUBCOMMANDS.contains(&key.as_str()) => {}
            Value::Object(_) => bail!("config section {key:?} is not a subcommand"),
            _ => {}
        }
    }
    let mut out = argv;
    out.splice(at + 1..at + 1, extra.into_iter().map(OsString::from));
    Ok(out)
}
