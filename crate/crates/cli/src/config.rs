//! Run configuration: command-line flags layered over an optional TOML file
//! layered over built-in defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::Args;
use coprune::{Detector, GroupQuota, Normalization, PlanConfig, SignedMode, SpatialConvention};
use serde::de::{DeserializeOwned, IntoDeserializer};
use serde::{Deserialize, Serialize};

/// A problem with how the tool was invoked, as opposed to with its inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parse a snake_case enum value through its serde representation.
fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    T::deserialize(s.into_deserializer()).map_err(|e: serde::de::value::Error| e.to_string())
}

/// Every setting; `None` means "not given at this layer".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture manifest (TOML)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Weight container (COPW)
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Plan file produced by `plan`
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Output file, or output directory for `apply`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global pruning ratio in [0, 1)
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Number of most similar peers averaged per filter [default: 3]
    #[arg(long)]
    pub k: Option<usize>,
    /// correlation | cosine | dot_product [default: correlation]
    #[arg(long, value_parser = parse_enum::<Detector>)]
    pub detector: Option<Detector>,
    /// max | l1 | l2 [default: max]
    #[arg(long, value_parser = parse_enum::<Normalization>)]
    pub normalization: Option<Normalization>,
    /// abs | relu | square [default: abs]
    #[arg(long, value_parser = parse_enum::<SignedMode>)]
    pub signed_mode: Option<SignedMode>,
    /// Weight of the FLOP regularizer [default: 0]
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Weight of the parameter regularizer [default: 0]
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    /// output | input [default: output]
    #[arg(long, value_parser = parse_enum::<SpatialConvention>)]
    pub spatial_convention: Option<SpatialConvention>,
    /// width | unit [default: width]
    #[arg(long, value_parser = parse_enum::<GroupQuota>)]
    pub group_quota: Option<GroupQuota>,
    /// Seed for `synth` weight generation [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),*) => {
        RunConfig { $($field: $top.$field.or($base.$field)),* }
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("config file {}: {}", path.display(), e.message())))
    }

    /// `top` wins wherever it sets a value.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        let base = self;
        overlay!(base, top; manifest, weights, plan, out, ratio, k, detector, normalization,
            signed_mode, beta, gamma, spatial_convention, group_quota, seed)
    }

    /// Fill every unset tunable with its default.
    pub fn with_defaults(self) -> RunConfig {
        let d = PlanConfig::default();
        let defaults = RunConfig {
            k: Some(d.k),
            detector: Some(d.detector),
            normalization: Some(d.normalization),
            signed_mode: Some(d.signed_mode),
            beta: Some(d.beta),
            gamma: Some(d.gamma),
            spatial_convention: Some(d.spatial_convention),
            group_quota: Some(d.group_quota),
            seed: Some(0),
            ..RunConfig::default()
        };
        defaults.overlay(self)
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, flag: &str) -> anyhow::Result<&'a T> {
        value.as_ref().ok_or_else(|| usage(format!("missing --{flag} (flag or config file)")))
    }

    pub fn plan_config(&self) -> anyhow::Result<PlanConfig> {
        let get = |v: Option<f64>| v.unwrap_or(0.0);
        let cfg = PlanConfig {
            ratio: get(self.ratio),
            k: self.k.unwrap_or(3),
            detector: self.detector.unwrap_or_default(),
            normalization: self.normalization.unwrap_or_default(),
            signed_mode: self.signed_mode.unwrap_or_default(),
            beta: get(self.beta),
            gamma: get(self.gamma),
            spatial_convention: self.spatial_convention.unwrap_or_default(),
            group_quota: self.group_quota.unwrap_or_default(),
        };
        if !(0.0..1.0).contains(&cfg.ratio) {
            return Err(usage(format!("--ratio must lie in [0, 1), got {}", cfg.ratio)));
        }
        if cfg.k == 0 {
            return Err(usage("--k must be at least 1"));
        }
        for (name, v) in [("beta", cfg.beta), ("gamma", cfg.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(usage(format!("--{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(cfg)
    }

    /// The effective configuration as `# key = value` comment lines.
    pub fn echo(&self, command: &str) -> String {
        let body = toml::to_string(self).expect("config serialization cannot fail");
        let mut out = format!("# coprune {command}\n");
        for line in body.lines().filter(|l| !l.is_empty()) {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}
