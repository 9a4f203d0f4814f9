//! Flat listing of every config key with its default, for `--help`.

use agentinfer_sim::config::ScenarioConfig;
use toml::Value;

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// `(dotted key, default)` pairs in section order.
pub fn config_keys() -> Vec<(String, String)> {
    let value = Value::try_from(ScenarioConfig::default()).expect("defaults serialize");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    out
}

pub fn help_text() -> String {
    let keys = config_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (override with --set key=value):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:width$}  {v}\n"));
    }
    s
}
