//! Experiment configuration documents.
//!
//! Configs are TOML with one section per component. Unknown keys are
//! rejected. Any key can be overridden from the environment with
//! `BCE3S_<SECTION>__<KEY>=<value>` (top-level keys: `BCE3S_<KEY>`), where
//! the value is parsed as a TOML literal and falls back to a string.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LongTailSpec, SplitThresholds};
use crate::error::{Error, Result};
use crate::grads::GradCheckSettings;
use crate::losses::{Family, LossConfig};
use crate::train::{validate_loss_for_training, ModelConfig, TrainConfig};

pub const ENV_PREFIX: &str = "BCE3S_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: LongTailSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub split: SplitThresholds,
    pub ablation: AblationGrid,
    pub gradcheck: GradCheckConfig,
    pub etf_sim: EtfSimConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            data: LongTailSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            split: SplitThresholds::default(),
            ablation: AblationGrid::default(),
            gradcheck: GradCheckConfig::default(),
            etf_sim: EtfSimConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        validate_loss_for_training(&self.loss)?;
        if self.split.few == 0 || self.split.many <= self.split.few {
            return Err(Error::config("split thresholds need many > few > 0"));
        }
        if self.model.identity_encoder && self.model.feature_dim != self.data.input_dim {
            return Err(Error::config("identity encoder needs model.feature_dim == data.input_dim"));
        }
        self.ablation.validate()?;
        self.etf_sim.validate()
    }

    /// Parses TOML text, applies `overrides` (key path, raw value) and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(Vec<String>, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid TOML: {e}")))?;
        for (path, raw) in overrides {
            set_path(&mut table, path, parse_literal(raw))?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Loads a file (or the defaults when `path` is `None`) and applies the
    /// process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, &env_overrides(std::env::vars()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Extracts `BCE3S_A__B=v` pairs as (`["a", "b"]`, `v`), sorted by key.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(Vec<String>, String)> {
    let mut out: Vec<_> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
            (!path.iter().any(String::is_empty)).then_some((path, v))
        })
        .collect();
    out.sort();
    out
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for key in parents {
        let entry = cur
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path `{}`: `{key}` is not a section", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// One ablation row: the family of each enabled loss component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub sc: Family,
    #[serde(default)]
    pub ss: Option<Family>,
    #[serde(default)]
    pub cc: Option<Family>,
}

impl AblationVariant {
    pub fn new(sc: Family, ss: Option<Family>, cc: Option<Family>) -> Self {
        AblationVariant { sc, ss, cc }
    }

    /// File-safe name such as `bce_sc-bce_ss-bce_cc`.
    pub fn name(&self) -> String {
        let mut parts = vec![format!("{}_sc", self.sc)];
        if let Some(f) = self.ss {
            parts.push(format!("{f}_ss"));
        }
        if let Some(f) = self.cc {
            parts.push(format!("{f}_cc"));
        }
        parts.join("-")
    }

    /// The loss configuration for this row, with disabled terms zeroed.
    pub fn loss_config(&self, base: &LossConfig, lambda_ss: f64, lambda_cc: f64) -> LossConfig {
        LossConfig {
            family: self.sc,
            contrastive_family: self.ss,
            uniform_family: self.cc,
            lambda_ss: if self.ss.is_some() { lambda_ss } else { 0.0 },
            lambda_cc: if self.cc.is_some() { lambda_cc } else { 0.0 },
            ..base.clone()
        }
    }
}

/// The fourteen sc/ss/cc family combinations of the standard ablation table,
/// in table order.
pub fn full_ablation_table() -> Vec<AblationVariant> {
    use Family::{Bce, Ce};
    vec![
        AblationVariant::new(Ce, None, None),
        AblationVariant::new(Bce, None, None),
        AblationVariant::new(Ce, Some(Ce), None),
        AblationVariant::new(Ce, Some(Bce), None),
        AblationVariant::new(Bce, Some(Ce), None),
        AblationVariant::new(Bce, Some(Bce), None),
        AblationVariant::new(Ce, None, Some(Ce)),
        AblationVariant::new(Ce, None, Some(Bce)),
        AblationVariant::new(Bce, None, Some(Ce)),
        AblationVariant::new(Bce, None, Some(Bce)),
        AblationVariant::new(Ce, Some(Ce), Some(Ce)),
        AblationVariant::new(Ce, Some(Bce), Some(Bce)),
        AblationVariant::new(Bce, Some(Ce), Some(Ce)),
        AblationVariant::new(Bce, Some(Bce), Some(Bce)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationPreset {
    /// All fourteen rows.
    Full,
    /// CE joint, BCE joint and BCE3S.
    Core,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    /// Used when `variants` is empty.
    pub preset: AblationPreset,
    pub variants: Vec<AblationVariant>,
    /// Weights applied to the contrastive and uniform terms when enabled.
    pub lambda_ss: f64,
    pub lambda_cc: f64,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            seeds: vec![1, 2, 3],
            preset: AblationPreset::Core,
            variants: Vec::new(),
            lambda_ss: 1.0,
            lambda_cc: 1.0,
        }
    }
}

impl AblationGrid {
    pub fn resolved_variants(&self) -> Vec<AblationVariant> {
        if !self.variants.is_empty() {
            return self.variants.clone();
        }
        match self.preset {
            AblationPreset::Full => full_ablation_table(),
            AblationPreset::Core => vec![
                AblationVariant::new(Family::Ce, None, None),
                AblationVariant::new(Family::Bce, None, None),
                AblationVariant::new(Family::Bce, Some(Family::Bce), Some(Family::Bce)),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("ablation.seeds must not be empty"));
        }
        let mut seen = BTreeSet::new();
        for v in self.resolved_variants() {
            if !seen.insert(v.name()) {
                return Err(Error::config(format!("ablation variant `{}` listed twice", v.name())));
            }
        }
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !ok(self.lambda_ss) || !ok(self.lambda_cc) {
            return Err(Error::config("ablation.lambda_ss and ablation.lambda_cc must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Number of seeds, starting at 0.
    pub seeds: u64,
    pub tol: f64,
    pub step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let s = GradCheckSettings::default();
        GradCheckConfig {
            seeds: s.seeds.len() as u64,
            tol: s.tol,
            step: s.step,
        }
    }
}

impl GradCheckConfig {
    pub fn settings(&self) -> GradCheckSettings {
        GradCheckSettings {
            seeds: (0..self.seeds).collect(),
            tol: self.tol,
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtfSimConfig {
    pub classes: usize,
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    /// Number of random initializations.
    pub inits: usize,
    pub seed: u64,
    /// Add the constant positive term to the uniform loss.
    pub include_positive: bool,
}

impl Default for EtfSimConfig {
    fn default() -> Self {
        EtfSimConfig {
            classes: 4,
            dim: 8,
            steps: 5000,
            lr: 0.1,
            inits: 10,
            seed: 42,
            include_positive: false,
        }
    }
}

impl EtfSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 1 {
            return Err(Error::config("etf_sim needs classes >= 2 and dim >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("etf_sim.lr must be positive"));
        }
        if self.inits < 1 {
            return Err(Error::config("etf_sim.inits must be at least 1"));
        }
        Ok(())
    }
}
