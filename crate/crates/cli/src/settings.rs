//! Turns a config argument plus `--set` overrides into a validated
//! [`ScenarioConfig`].

use std::path::Path;

use agentinfer_sim::config::ScenarioConfig;
use agentinfer_sim::presets;
use toml::{Table, Value};

use crate::CliError;

/// Reads `spec` as a file path, falling back to a bundled preset name.
pub fn load_source(spec: &str) -> Result<String, CliError> {
    let path = Path::new(spec);
    if path.is_file() {
        return std::fs::read_to_string(path).map_err(|e| CliError::io(spec, e));
    }
    presets::source(spec).map(str::to_string).ok_or_else(|| {
        let names: Vec<&str> = presets::PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::config(
            "<config>",
            format!("`{spec}` is neither a readable file nor a preset ({})", names.join(", ")),
        )
    })
}

/// Parses the right-hand side of an override as a TOML value; bare words
/// become strings.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` assignment to `table`.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty path segment"));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(parts[..=depth].join("."), "is a value, not a section"))?;
    }
    node.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Recursively copies `over` onto `base`; tables merge, anything else
/// replaces.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Layers `text` over the defaults, applies `overrides` in order, then
/// deserializes and validates.
pub fn resolve_text(text: &str, overrides: &[String]) -> Result<ScenarioConfig, CliError> {
    let file: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::config("<config>", e.message().to_string()))?;
    let mut table = match Value::try_from(ScenarioConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("defaults serialize to a table"),
    };
    merge(&mut table, file);
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(if path == "." { "<config>".into() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

pub fn resolve(spec: &str, overrides: &[String]) -> Result<ScenarioConfig, CliError> {
    resolve_text(&load_source(spec)?, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_and_replace_keys() {
        let cfg = resolve_text(
            "[pool]\nN = 100\n",
            &["pool.N=2000".into(), "sched.policy=sjf".into(), "workload.short_prompt_tokens=[1000, 2000]".into()],
        )
        .unwrap();
        assert_eq!(cfg.pool.n, 2000);
        assert_eq!(cfg.sched.policy.name(), "sjf");
        assert_eq!(cfg.workload.short_prompt_tokens, [1000, 2000]);
    }

    #[test]
    fn partial_tool_entries_keep_other_fields() {
        let cfg = resolve_text("[latency.tools.web_search]\njitter = 0.0\n", &[]).unwrap();
        let t = cfg.latency.tool("web_search");
        assert_eq!((t.mean, t.jitter), (3.27, 0.0));
    }

    #[test]
    fn errors_name_the_field() {
        let e = resolve_text("", &["pool.N=0".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("pool.N"), "{e}");
        let e = resolve_text("", &["pool.N=lots".into()]).unwrap_err();
        assert!(e.to_string().contains("pool.N"), "{e}");
        let e = resolve_text("", &["pool.size=3".into()]).unwrap_err();
        assert!(e.to_string().contains("size"), "{e}");
        let e = resolve_text("", &["pool.N.x=3".into()]).unwrap_err();
        assert!(e.to_string().contains("pool.N"), "{e}");
    }

    #[test]
    fn unknown_sources_are_config_errors() {
        assert_eq!(load_source("no/such/thing.toml").unwrap_err().exit_code(), 2);
        assert!(load_source("sched_compare").is_ok());
    }
}
