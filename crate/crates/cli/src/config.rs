//! Flat `key=value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use pgprec::dataset::SynthConfig;
use pgprec::trainer::TrainConfig;

use crate::CliError;

const KEYS: &[&str] = &[
    "aggregation",
    "batch_size",
    "cold_threshold",
    "d",
    "density",
    "eval_k",
    "lambda1",
    "lambda2",
    "latent_dim",
    "lr",
    "m_hard",
    "m_soft",
    "max_epochs",
    "monitor",
    "n_layers",
    "n_source_items",
    "n_target_items",
    "n_users",
    "patience",
    "relations_per_item",
    "rho",
    "seed",
    "sharpness",
    "tau",
    "tost_margin",
    "tune_scope",
];

/// Resolved settings: defaults, then the config file, then flag overrides.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn parse_line(line: &str, origin: &str) -> Result<Option<(String, String)>, CliError> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("{origin}: expected key=value, got {line:?}")))?;
    let k = k.trim();
    if !KEYS.contains(&k) {
        return Err(CliError::Usage(format!("{origin}: unknown key {k:?}")));
    }
    Ok(Some((k.to_string(), v.trim().to_string())))
}

impl Settings {
    pub fn from_text(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = parse_line(line, origin)? {
                values.insert(k, v);
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_text(&text, &p.display().to_string())
            }
        }
    }

    /// Applies `key=value` overrides; later entries win.
    pub fn apply(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            if let Some((k, v)) = parse_line(o, "--set")? {
                self.values.insert(k, v);
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid value {v:?} for {key}"))),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed", 0)
    }

    pub fn cold_threshold(&self) -> Result<usize, CliError> {
        self.get("cold_threshold", 5)
    }

    pub fn tost_margin(&self) -> Result<f64, CliError> {
        let m: f64 = self.get("tost_margin", 0.05)?;
        if !(m.is_finite() && m >= 0.0) {
            return Err(CliError::Usage(format!(
                "tost_margin {m} must be non-negative"
            )));
        }
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr: self.get("lr", d.lr)?,
            lambda1: self.get("lambda1", d.lambda1)?,
            lambda2: self.get("lambda2", d.lambda2)?,
            tau: self.get("tau", d.tau)?,
            rho: self.get("rho", d.rho)?,
            d: self.get("d", d.d)?,
            n_layers: self.get("n_layers", d.n_layers)?,
            batch_size: self.get("batch_size", d.batch_size)?,
            patience: self.get("patience", d.patience)?,
            max_epochs: self.get("max_epochs", d.max_epochs)?,
            seed: self.seed()?,
            m_hard: self.get("m_hard", d.m_hard)?,
            m_soft: self.get("m_soft", d.m_soft)?,
            tune_scope: self.parsed("tune_scope", d.tune_scope)?,
            aggregation: self.parsed("aggregation", d.aggregation)?,
            monitor: self.parsed("monitor", d.monitor)?,
            eval_k: self.get("eval_k", d.eval_k)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn parsed<T: FromStr<Err = pgprec::Error>>(
        &self,
        key: &str,
        default: T,
    ) -> Result<T, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => Ok(v.parse()?),
        }
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            n_users: self.get("n_users", d.n_users)?,
            n_source_items: self.get("n_source_items", d.n_source_items)?,
            n_target_items: self.get("n_target_items", d.n_target_items)?,
            latent_dim: self.get("latent_dim", d.latent_dim)?,
            density: self.get("density", d.density)?,
            seed: self.seed()?,
            relations_per_item: self.get("relations_per_item", d.relations_per_item)?,
            sharpness: self.get("sharpness", d.sharpness)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every explicitly set key, for the run manifest.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::from_text("# comment\nlr = 0.01\nd=16\n\n", "cfg").unwrap();
        s.apply(&["d=32".into()]).unwrap();
        let t = s.train().unwrap();
        assert_eq!((t.lr, t.d), (0.01, 32));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            Settings::from_text("colour=red", "cfg"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            Settings::from_text("no equals", "cfg"),
            Err(CliError::Usage(_))
        ));
        let s = Settings::from_text("d=abc", "cfg").unwrap();
        assert!(matches!(s.train(), Err(CliError::Usage(_))));
        let s = Settings::from_text("density=0", "cfg").unwrap();
        assert_eq!(s.synth().unwrap_err().exit_code(), 2);
    }
}
