//! Plain-text `key = value` config files, merged under command-line flags.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// One `key value` pair (or bare `key` for `true`) per non-comment line.
/// Keys are long flag names without dashes; `false` drops a switch.
pub fn parse(text: &str) -> Result<Vec<(String, Option<String>)>> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => match line.split_once(char::is_whitespace) {
                Some((k, v)) => (k.trim(), v.trim()),
                None => (line, "true"),
            },
        };
        if key.is_empty() || key.starts_with('-') || key == "config" {
            bail!("line {}: invalid key '{key}'", n + 1);
        }
        match value {
            "true" => entries.push((key.to_string(), None)),
            "false" => {}
            v => entries.push((key.to_string(), Some(v.trim_matches('"').to_string()))),
        }
    }
    Ok(entries)
}

fn given(args: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    let with_value = format!("--{key}=");
    args.iter()
        .map(|a| a.to_string_lossy())
        .any(|a| a == flag || a.starts_with(&with_value))
}

fn config_path(args: &[OsString]) -> Option<OsString> {
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

/// Inserts the config file's flags right after the subcommand name, skipping
/// any flag the command line already gives.
pub fn expand(args: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    let extra = parse(&text).with_context(|| format!("in config file {}", path.display()))?;
    let Some(pos) = args.iter().position(|a| subcommands.iter().any(|s| a == s)) else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    for (key, value) in extra.into_iter().filter(|(k, _)| !given(&args, k)) {
        out.push(format!("--{key}").into());
        out.extend(value.map(OsString::from));
    }
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
