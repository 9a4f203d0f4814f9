//! Bundled scenario configs.

use crate::config::ScenarioConfig;

/// (name, TOML source) of every bundled preset.
pub const PRESETS: [(&str, &str); 7] = [
    ("default", include_str!("../presets/default.toml")),
    ("sched_compare", include_str!("../presets/sched_compare.toml")),
    ("sam_async", include_str!("../presets/sam_async.toml")),
    ("compress", include_str!("../presets/compress.toml")),
    ("collab", include_str!("../presets/collab.toml")),
    ("composition", include_str!("../presets/composition.toml")),
    ("ote_sweep", include_str!("../presets/ote_sweep.toml")),
];

pub fn source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Parses a bundled preset.
pub fn load(name: &str) -> Result<ScenarioConfig, String> {
    let src = source(name).ok_or_else(|| format!("no preset named {name}"))?;
    toml::from_str(src).map_err(|e| format!("preset {name}: {e}"))
}
