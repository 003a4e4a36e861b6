//! Engine configuration and its flat `key=value` text format.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Source-frame offsets used when chaining flow into a target frame.
///
/// `anchor` stands for the unbounded offset: the pass's anchor frame (the
/// first frame for a forward pass) always contributes when it is visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalSchedule {
    pub anchor: bool,
    pub offsets: Vec<usize>,
}

impl IntervalSchedule {
    pub fn new(anchor: bool, offsets: Vec<usize>) -> Self {
        Self { anchor, offsets }
    }

    /// Number of slots, counting the anchor as one.
    pub fn len(&self) -> usize {
        self.offsets.len() + usize::from(self.anchor)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_offset(&self) -> usize {
        self.offsets.iter().copied().max().unwrap_or(0)
    }

    pub(crate) fn check(&self) -> Result<(), ConfigError> {
        if self.is_empty() {
            return Err(ConfigError::Invalid("intervals empty".into()));
        }
        if self.offsets.contains(&0) {
            return Err(ConfigError::Invalid("intervals must be positive".into()));
        }
        if self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::Invalid(
                "intervals not strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

impl Default for IntervalSchedule {
    fn default() -> Self {
        Self::new(true, vec![1, 2, 4, 8, 16, 32])
    }
}

impl fmt::Display for IntervalSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::with_capacity(self.len());
        if self.anchor {
            parts.push("inf".into());
        }
        parts.extend(self.offsets.iter().map(|k| k.to_string()));
        f.write_str(&parts.join(","))
    }
}

impl FromStr for IntervalSchedule {
    type Err = String;

    /// Parses `inf,1,2,4`. The anchor marker may only appear first. Ordering of
    /// the finite offsets is checked by validation, not here.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut anchor = false;
        let mut offsets = Vec::new();
        for (idx, tok) in s.split(',').map(str::trim).enumerate() {
            if tok.eq_ignore_ascii_case("inf") {
                if idx != 0 {
                    return Err("anchor marker 'inf' must come first".into());
                }
                anchor = true;
            } else {
                let k = tok
                    .parse::<usize>()
                    .map_err(|_| format!("bad interval '{tok}'"))?;
                offsets.push(k);
            }
        }
        Ok(Self { anchor, offsets })
    }
}

/// All tunable parameters of the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub intervals: IntervalSchedule,
    /// Constant pairwise correlation between chained predictions.
    pub correlation_p: f64,
    /// Flow samples are valid only where visibility confidence exceeds this.
    pub flow_validity_rho: f64,
    /// Keypoints need a confidence strictly above this.
    pub keypoint_confidence_rho: f64,
    pub geo_sim_keypoint: f64,
    pub geo_sim_flow: f64,
    pub outlier_dist_px: f64,
    pub keypoint_sigma: f64,
    pub sigma_floor: f64,
    pub sigma_cap: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            intervals: IntervalSchedule::default(),
            correlation_p: 0.5,
            flow_validity_rho: 0.1,
            keypoint_confidence_rho: 0.7,
            geo_sim_keypoint: 0.5,
            geo_sim_flow: 0.3,
            outlier_dist_px: 10.0,
            keypoint_sigma: 1.0,
            sigma_floor: 1e-3,
            sigma_cap: 1e3,
        }
    }
}

/// Field names in file order, with a short description for `--help` output.
pub const FIELDS: &[(&str, &str)] = &[
    ("intervals", "source-frame offsets, 'inf' = anchor frame"),
    (
        "correlation_p",
        "constant correlation between chained predictions",
    ),
    (
        "flow_validity_rho",
        "minimum visibility confidence of a flow sample",
    ),
    (
        "keypoint_confidence_rho",
        "minimum keypoint confidence (strict)",
    ),
    (
        "geo_sim_keypoint",
        "minimum feature similarity for keypoints",
    ),
    (
        "geo_sim_flow",
        "minimum feature similarity for flow predictions",
    ),
    (
        "outlier_dist_px",
        "max distance to the most trusted prediction",
    ),
    (
        "keypoint_sigma",
        "standard deviation of a keypoint observation, px",
    ),
    ("sigma_floor", "lower clamp on flow uncertainty, px"),
    ("sigma_cap", "upper clamp on flow and track uncertainty, px"),
];

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} out of [{lo},{hi}]")))
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive")))
    }
}

impl EngineConfig {
    /// Returns the config unchanged when every invariant holds, otherwise the
    /// first violation in field order.
    pub fn validate(self) -> Result<Self, ConfigError> {
        self.intervals.check()?;
        in_range("correlation_p", self.correlation_p, 0.0, 1.0)?;
        in_range("flow_validity_rho", self.flow_validity_rho, 0.0, 1.0)?;
        in_range(
            "keypoint_confidence_rho",
            self.keypoint_confidence_rho,
            -1.0,
            1.0,
        )?;
        in_range("geo_sim_keypoint", self.geo_sim_keypoint, -1.0, 1.0)?;
        in_range("geo_sim_flow", self.geo_sim_flow, -1.0, 1.0)?;
        positive("outlier_dist_px", self.outlier_dist_px)?;
        positive("keypoint_sigma", self.keypoint_sigma)?;
        positive("sigma_floor", self.sigma_floor)?;
        positive("sigma_cap", self.sigma_cap)?;
        if self.sigma_floor >= self.sigma_cap {
            return Err(ConfigError::Invalid(
                "sigma_floor must be below sigma_cap".into(),
            ));
        }
        Ok(self)
    }

    /// Clamps a raw uncertainty value into `[sigma_floor, sigma_cap]`.
    pub fn clamp_sigma(&self, sigma: f64) -> f64 {
        sigma.clamp(self.sigma_floor, self.sigma_cap)
    }

    /// Applies a single `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num(v: &str) -> Result<f64, String> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad number '{}'", v.trim()))
        }
        match key {
            "intervals" => self.intervals = value.parse()?,
            "correlation_p" => self.correlation_p = num(value)?,
            "flow_validity_rho" => self.flow_validity_rho = num(value)?,
            "keypoint_confidence_rho" => self.keypoint_confidence_rho = num(value)?,
            "geo_sim_keypoint" => self.geo_sim_keypoint = num(value)?,
            "geo_sim_flow" => self.geo_sim_flow = num(value)?,
            "outlier_dist_px" => self.outlier_dist_px = num(value)?,
            "keypoint_sigma" => self.keypoint_sigma = num(value)?,
            "sigma_floor" => self.sigma_floor = num(value)?,
            "sigma_cap" => self.sigma_cap = num(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Value of a field rendered in the file dialect.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "intervals" => self.intervals.to_string(),
            "correlation_p" => self.correlation_p.to_string(),
            "flow_validity_rho" => self.flow_validity_rho.to_string(),
            "keypoint_confidence_rho" => self.keypoint_confidence_rho.to_string(),
            "geo_sim_keypoint" => self.geo_sim_keypoint.to_string(),
            "geo_sim_flow" => self.geo_sim_flow.to_string(),
            "outlier_dist_px" => self.outlier_dist_px.to_string(),
            "keypoint_sigma" => self.keypoint_sigma.to_string(),
            "sigma_floor" => self.sigma_floor.to_string(),
            "sigma_cap" => self.sigma_cap.to_string(),
            _ => return None,
        })
    }

    /// Parses the text dialect on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored. The result is not validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (key, value, line) in key_values(text)? {
            if cfg.get(key).is_none() {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value)
                .map_err(|message| ConfigError::Parse { line, message })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Renders every field. Floats use the shortest representation that parses
    /// back to the same bits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in FIELDS {
            let _ = writeln!(out, "{key}={}", self.get(key).unwrap_or_default());
        }
        out
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments. Returns
/// 1-based line numbers alongside each pair.
pub(crate) fn key_values(text: &str) -> Result<Vec<(&str, &str, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: idx + 1,
            message: format!("expected key=value, got '{line}'"),
        })?;
        out.push((k.trim(), v.trim(), idx + 1));
    }
    Ok(out)
}
