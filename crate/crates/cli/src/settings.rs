//! Settings file: one table per subcommand, keys named after the long
//! flags with dashes as underscores. Flags and `PRIVSTREAM_*` variables
//! override the file.

use std::path::{Path, PathBuf};

use privstream::sim::SimConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: Option<u64>,
    pub optimize: OptimizeSettings,
    pub bench_secagg: BenchSettings,
    pub run: RunSettings,
    pub plan: PlanSettings,
    /// Directory of the settings file; relative paths resolve against it.
    #[serde(skip)]
    pub base: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSettings {
    pub parties: Option<u64>,
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    pub prf_bits: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub parties: Option<u64>,
    pub rounds: Option<u64>,
    pub protocol: Option<String>,
    pub dropout: Option<f64>,
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    pub prf: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub scenario: Option<String>,
    /// Schema YAML for the custom scenario.
    pub schema: Option<PathBuf>,
    /// Query YAML files for the custom scenario.
    pub queries: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub allow_failures: Option<bool>,
    /// Simulation fields; missing ones keep the scenario's values.
    pub sim: Option<toml::Table>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSettings {
    pub schema: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub streams: Option<u64>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings, CliError> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut s: Settings = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        s.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

/// Overlays the `[run.sim]` table on `base`.
pub fn overlay_sim(base: &SimConfig, table: &toml::Table) -> Result<SimConfig, CliError> {
    let mut merged = toml::Table::try_from(base).map_err(|e| CliError::Usage(e.to_string()))?;
    for (k, v) in table {
        match (merged.get_mut(k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => {
                dst.extend(src.iter().map(|(k, v)| (k.clone(), v.clone())));
            }
            _ => {
                merged.insert(k.clone(), v.clone());
            }
        }
    }
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e| CliError::Usage(format!("[run.sim]: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tables() {
        let s: Settings = toml::from_str(
            r#"
            seed = 3
            [optimize]
            parties = 100
            [run]
            scenario = "custom"
            queries = ["q.yaml"]
            [run.sim]
            producers = 4
            transport = { drop_prob = 0.1 }
            "#,
        )
        .unwrap();
        assert_eq!(s.seed, Some(3));
        assert_eq!(s.optimize.parties, Some(100));
        let sim = overlay_sim(&SimConfig::default(), s.run.sim.as_ref().unwrap()).unwrap();
        assert_eq!(sim.producers, 4);
        assert_eq!(sim.transport.drop_prob, 0.1);
        assert_eq!(sim.transport.latency_max_ms, SimConfig::default().transport.latency_max_ms);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(toml::from_str::<Settings>("[optimize]\nparty = 1").is_err());
        let t: toml::Table = toml::from_str("producer = 1").unwrap();
        assert!(overlay_sim(&SimConfig::default(), &t).is_err());
    }
}
