//! Shipped environments and scenario configurations.
//!
//! `medium_like` is an office-sized room with a window on the left wall and
//! a whiteboard on the right; `large_like` is a hall whose right wall starts
//! 0.9 m above the floor, beside the array. Both are stand-ins built for
//! the analysis, not surveys of any real building.

use std::path::Path;

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::geometry::EnvironmentModel;

const ENVIRONMENTS: &[(&str, &str)] = &[
    ("medium_like", include_str!("../scenes/medium_like.json")),
    ("large_like", include_str!("../scenes/large_like.json")),
];

const SCENARIOS: &[(&str, &str)] = &[
    ("compact", include_str!("../scenes/compact.scenario.json")),
    ("medium_like", include_str!("../scenes/medium_like.scenario.json")),
    ("large_like", include_str!("../scenes/large_like.scenario.json")),
];

pub fn environment_names() -> impl Iterator<Item = &'static str> {
    ENVIRONMENTS.iter().map(|(n, _)| *n)
}

pub fn scenario_names() -> impl Iterator<Item = &'static str> {
    SCENARIOS.iter().map(|(n, _)| *n)
}

pub fn environment(name: &str) -> Result<EnvironmentModel> {
    let (_, text) = ENVIRONMENTS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no built-in scene `{name}`")))?;
    crate::io::environment_from_json(text, Path::new(&format!("builtin:{name}")))
}

/// Built-in scenario; its environment resolves to the built-in scene.
pub fn scenario(name: &str) -> Result<ScenarioConfig> {
    let (_, text) = SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no built-in scenario `{name}`")))?;
    let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let env = v["environment"].as_str().unwrap_or_default().trim_end_matches(".json").to_string();
    v["environment"] = format!("builtin:{env}").into();
    ScenarioConfig::from_json(&v.to_string(), Path::new(&format!("builtin:{name}")))
}
