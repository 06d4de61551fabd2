//! TOML defaults file. Every key is optional; command-line flags win.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rankaudit::sim::SimConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub format: Option<String>,
    pub threads: Option<usize>,
    pub attribute: Option<String>,
    pub labels: Option<Vec<String>>,
    pub unknown_label: Option<String>,
    pub ks: Option<Vec<usize>>,
    pub page: Option<usize>,
    pub max_missing_rate: Option<f64>,
    pub min_pool: Option<usize>,
    pub baseline: Option<PathBuf>,
    pub name_tables: Option<Vec<PathBuf>>,
    pub name_key: Option<String>,
    pub null_value: Option<f64>,
    pub pairs: Option<String>,
    /// Simulator defaults. `seed` here is ignored: `--seed` is always required.
    pub simulate: Option<SimConfig>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Relative paths in the file are relative to the file itself.
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(b) = cfg.baseline.take() {
            cfg.baseline = Some(base.join(b));
        }
        if let Some(ts) = cfg.name_tables.take() {
            cfg.name_tables = Some(ts.into_iter().map(|t| base.join(t)).collect());
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_simulate_table_keeps_defaults() {
        let cfg: Config = toml::from_str("format = \"json\"\n[simulate]\nn_queries = 7\ndays = 2\n").unwrap();
        let sim = cfg.simulate.unwrap();
        assert_eq!((sim.n_queries, sim.days), (7, 2));
        assert_eq!(sim.pool_size, SimConfig::default().pool_size);
        assert_eq!(cfg.format.as_deref(), Some("json"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("colour = 1").is_err());
    }

    #[test]
    fn paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audit.toml");
        std::fs::write(&p, "baseline = \"b.csv\"\nname_tables = [\"t.csv\"]\n").unwrap();
        let cfg = Config::load(&p).unwrap();
        assert_eq!(cfg.baseline.unwrap(), dir.path().join("b.csv"));
        assert_eq!(cfg.name_tables.unwrap(), vec![dir.path().join("t.csv")]);
    }
}
