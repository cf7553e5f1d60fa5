//! Codec configuration and the `key = value` settings file.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_grid::GridConfig;
use crate::primitives::DEFAULT_K;
use crate::rd_optimizer::TrainConfig;
use crate::temporal::TemporalConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Coupled primitives per anchor.
    pub k: usize,
    /// Shared spatial grid (prediction contexts and entropy priors).
    pub grid: GridConfig,
    /// Residue grids of the streaming pipeline.
    pub temporal_grid: GridConfig,
    /// Lattice spacing of coded anchor locations, world units.
    pub location_step: f64,
    /// Uniform step of coded grid table entries.
    pub grid_step: f64,
    /// Uniform step of coded temporal residue grid entries.
    pub residue_step: f64,
    /// Initial (embedding, residual, covariance) quantization steps.
    pub init_steps: [f64; 3],
    /// Initial scale of every entropy-model Gaussian.
    pub init_entropy_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            grid: GridConfig::default(),
            temporal_grid: GridConfig::temporal_default(),
            location_step: 1e-3,
            grid_step: 1.0 / 128.0,
            residue_step: 1.0 / 128.0,
            init_steps: [0.02, 0.02, 0.01],
            init_entropy_scale: 0.3,
        }
    }
}

/// Parses `value` for `key`, naming both in the error.
pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse::<V>().map_err(|e| Error::parse(format!("config key '{key}'"), format!("'{value}': {e}")))
}

fn set_grid(g: &mut GridConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "levels" => g.levels = parse_value(key, value)?,
        "base_resolution" => g.base_resolution = parse_value(key, value)?,
        "growth" => g.growth = parse_value(key, value)?,
        "log2_table_size" => g.log2_table_size = parse_value(key, value)?,
        "feature_dim" => g.feature_dim = parse_value(key, value)?,
        "primes" => {
            let p: Vec<u32> = value.split(',').map(|t| parse_value(key, t.trim())).collect::<Result<_>>()?;
            if p.len() != 3 {
                return Err(Error::parse(format!("config key '{key}'"), "expected three comma-separated primes"));
            }
            g.primes = [p[0], p[1], p[2]];
        }
        _ => return Ok(false),
    }
    Ok(true)
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        self.grid.validate()?;
        self.temporal_grid.validate()?;
        for (name, v) in [("location_step", self.location_step), ("grid_step", self.grid_step), ("residue_step", self.residue_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.init_steps.iter().any(|s| !(*s > 0.0)) || !(self.init_entropy_scale > 0.0) {
            return Err(Error::InvalidArgument("initial steps and scales must be positive".into()));
        }
        Ok(())
    }

    /// Applies one setting; `Ok(false)` if the key is not a codec key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if let Some(k) = key.strip_prefix("grid.") {
            return set_grid(&mut self.grid, k, value);
        }
        if let Some(k) = key.strip_prefix("temporal_grid.") {
            return set_grid(&mut self.temporal_grid, k, value);
        }
        match key {
            "k" => self.k = parse_value(key, value)?,
            "location_step" => self.location_step = parse_value(key, value)?,
            "grid_step" => self.grid_step = parse_value(key, value)?,
            "residue_step" => self.residue_step = parse_value(key, value)?,
            "init_step.embedding" => self.init_steps[0] = parse_value(key, value)?,
            "init_step.residual" => self.init_steps[1] = parse_value(key, value)?,
            "init_step.covariance" => self.init_steps[2] = parse_value(key, value)?,
            "init_entropy_scale" => self.init_entropy_scale = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Splits a settings file into `(key, value)` pairs. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::parse("config", format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse("config", format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Everything a settings file can configure.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub temporal: TemporalConfig,
}

impl Settings {
    /// Defaults overridden by the given text; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in parse_kv(text)? {
            s.set(&k, &v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { context, message } => Error::parse(format!("{}: {context}", path.display()), message),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.codec.set(key, value)? || self.train.set(key, value)? || self.temporal.set(key, value)? {
            Ok(())
        } else {
            Err(Error::parse("config", format!("unknown key '{key}'")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.train.validate()?;
        self.temporal.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let s = Settings::default();
        s.validate().unwrap();
        assert_eq!(s.codec.k, 10);
        assert_eq!(s.codec.grid.output_dim(), 16);
    }

    #[test]
    fn kv_overrides_and_comments() {
        let s = Settings::from_text("# comment\nk = 4\n\ngrid.levels=2\nlocation_step = 0.002\ngrid.primes = 1, 3, 5\n").unwrap();
        assert_eq!(s.codec.k, 4);
        assert_eq!(s.codec.grid.levels, 2);
        assert_eq!(s.codec.location_step, 0.002);
        assert_eq!(s.codec.grid.primes, [1, 3, 5]);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(Settings::from_text("bogus = 1\n").is_err());
        assert!(Settings::from_text("k\n").is_err());
        assert!(Settings::from_text("k = many\n").is_err());
        assert!(Settings::from_text("k = 0\n").is_err());
        assert!(Settings::from_text("grid.primes = 1,2\n").is_err());
    }
}
