//! Run configuration: defaults, then a `key = value` file with dotted keys,
//! then command-line overrides.
//!
//! ```text
//! # comment
//! seed = 3
//! train.epochs = 5
//! tta.rho = 0.25
//! model.encoder.layers = [1, 2]
//! model.templates_file = attrs.txt
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::DataGenConfig;
use crate::error::{PilotError, Result};
use crate::model::ModelConfig;
use crate::objective::ScoringConfig;
use crate::prompts::AttributeTemplates;
use crate::trainer::TrainConfig;
use crate::tta::TtaConfig;

pub const SEED_ENV: &str = "PILOT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub scoring: ScoringConfig,
    pub data: DataGenConfig,
    /// Permutations for the MMD test in `analyze`.
    pub mmd_permutations: usize,
}

impl RunConfig {
    /// Defaults with every component seed taken from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self {
            seed,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tta: TtaConfig::default(),
            scoring: ScoringConfig::default(),
            data: DataGenConfig::default(),
            mmd_permutations: 1000,
        };
        c.set_seed(seed);
        c
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.tta.seed = seed;
        self.data.seed = seed;
    }

    /// Default seed: `PILOT_SEED` when set, else 0.
    pub fn default_seed() -> Result<u64> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| PilotError::config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    /// Applies assignments in order. A `seed` assignment is applied first and
    /// re-seeds every component; the remaining keys may then override
    /// individual seeds.
    pub fn apply(&mut self, assignments: &[(String, String)]) -> Result<()> {
        for (_, v) in assignments.iter().filter(|(k, _)| k == "seed") {
            let s = v
                .parse()
                .map_err(|_| PilotError::config(format!("seed '{v}' is not an unsigned integer")))?;
            self.set_seed(s);
        }
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        for (key, raw) in assignments.iter().filter(|(k, _)| k != "seed") {
            if key == "model.templates_file" {
                let t = AttributeTemplates::load(Path::new(raw))?;
                tree["model"]["templates"] = serde_json::to_value(t).expect("templates serialize");
                continue;
            }
            if key.starts_with("train.scoring") || key.starts_with("tta.scoring") {
                return Err(PilotError::config(format!("'{key}': scoring is set once, under 'scoring.'")));
            }
            set_path(&mut tree, key, raw)?;
        }
        *self = serde_json::from_value(tree).map_err(|e| PilotError::config(format!("invalid configuration: {e}")))?;
        // one scoring block for every stage
        self.train.scoring = self.scoring;
        self.tta.scoring = self.scoring;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tta.validate()?;
        self.scoring.validate()?;
        self.data.validate()?;
        let enc = &self.model.encoder;
        if (self.data.height, self.data.width) != (enc.image_h, enc.image_w) {
            return Err(PilotError::config(format!(
                "data images are {}x{} but the encoder expects {}x{}",
                self.data.height, self.data.width, enc.image_h, enc.image_w
            )));
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::with_seed(Self::default_seed()?);
        let mut all = match file {
            Some(p) => parse_assignments(&fs::read_to_string(p).map_err(|e| PilotError::io(p, e))?, p)?,
            None => Vec::new(),
        };
        // a flag seed outranks a file seed, so drop the file's
        if overrides.iter().any(|(k, _)| k == "seed") {
            all.retain(|(k, _)| k != "seed");
        }
        all.extend_from_slice(overrides);
        cfg.apply(&all)?;
        Ok(cfg)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_assignments(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PilotError::format(origin, format!("line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(PilotError::format(origin, format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim_matches('"').to_string()));
    }
    Ok(out)
}

/// `key=value` from a command-line `--set`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| PilotError::config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn set_path(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || PilotError::config(format!("unknown configuration key '{key}'"));
    let mut node = tree;
    for part in key.split('.') {
        node = node.as_object_mut().and_then(|m| m.get_mut(part)).ok_or_else(unknown)?;
    }
    let bad = |what: &str| PilotError::config(format!("'{key}' expects {what}, got '{raw}'"));
    *node = match node {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(_) => {
            let v: Value = serde_json::from_str(raw).map_err(|_| bad("a number"))?;
            if !v.is_number() {
                return Err(bad("a number"));
            }
            v
        }
        Value::Object(_) => return Err(bad("a sub-key, not a value")),
        // lists and optional values: JSON syntax, `none` for absent
        _ if raw.eq_ignore_ascii_case("none") => Value::Null,
        _ => serde_json::from_str(raw).map_err(|_| bad("a JSON value"))?,
    };
    Ok(())
}
