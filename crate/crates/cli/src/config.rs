//! Experiment configuration files.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "seed": 42,
//!   "system": { "preset": "sys_a" },
//!   "noise": { "J": 8, "b": [1.0, 0.25], "dist": "standard_normal", "basis": "trig" },
//!   "mix": { "k_max": 30 }
//! }
//! ```
//!
//! Every block except `schema_version` and `seed` is optional. Unknown keys
//! are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use qsphere_core::control::GlobalSteerConfig;
use qsphere_core::dynamics::PropagatorConfig;
use qsphere_core::galerkin::{self, PolynomialPotential};
use qsphere_core::linalg::{self, Pair};
use qsphere_core::noise::NoiseModel;
use qsphere_core::system::SystemSpecDoc;
use qsphere_core::{Cvec, SystemSpec};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SysA,
    SysB,
}

/// Where the system comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemRef {
    Preset(Preset),
    Inline(SystemSpecDoc),
    /// JSON file holding a system document, relative to the config file.
    Path(PathBuf),
    Galerkin(GalerkinBlock),
}

impl Default for SystemRef {
    fn default() -> Self {
        SystemRef::Preset(Preset::SysA)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalerkinBlock {
    pub potential: String,
    pub n: usize,
    pub sigma: f64,
    pub epsilon: f64,
}

impl Default for GalerkinBlock {
    fn default() -> Self {
        Self { potential: "x^2".into(), n: 3, sigma: 2.0, epsilon: 0.0 }
    }
}

impl GalerkinBlock {
    pub fn potential(&self) -> Result<PolynomialPotential, CliError> {
        self.potential
            .parse()
            .map_err(|e| CliError::Config(format!("bad potential '{}': {e}", self.potential)))
    }

    pub fn build(&self) -> Result<galerkin::GalerkinSystem, CliError> {
        Ok(galerkin::build(&self.potential()?, self.n, self.sigma, self.epsilon)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateBlock {
    pub steps: usize,
    pub z0: Option<Vec<Pair>>,
}

impl Default for SimulateBlock {
    fn default() -> Self {
        Self { steps: 10, z0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixBlock {
    pub k_max: usize,
    pub ensemble: usize,
    pub cells: usize,
    pub partition_samples: usize,
    /// Point masses of the two initial laws; `e_1` and `e_2` by default.
    pub law_a: Option<Vec<Pair>>,
    pub law_b: Option<Vec<Pair>>,
}

impl Default for MixBlock {
    fn default() -> Self {
        Self { k_max: 30, ensemble: 20_000, cells: 64, partition_samples: 10_000, law_a: None, law_b: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HittimeBlock {
    pub delta: f64,
    pub alpha: f64,
    pub k_max: usize,
    pub chains: usize,
    /// Start of every chain; `e_2` by default.
    pub z0: Option<Vec<Pair>>,
}

impl Default for HittimeBlock {
    fn default() -> Self {
        Self { delta: 0.3, alpha: 0.05, k_max: 500, chains: 5000, z0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerBlock {
    /// Endpoints; drawn uniformly from the seed when absent.
    pub z1: Option<Vec<Pair>>,
    pub z2: Option<Vec<Pair>>,
    pub delta: f64,
    pub tol: f64,
    pub steering: GlobalSteerConfig,
}

impl Default for SteerBlock {
    fn default() -> Self {
        Self { z1: None, z2: None, delta: 0.03, tol: 1e-6, steering: GlobalSteerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupleBlock {
    pub delta0: f64,
    pub runs: usize,
    pub max_steps: usize,
    pub kernel_samples: usize,
    pub cells: usize,
    pub partition_samples: usize,
}

impl Default for CoupleBlock {
    fn default() -> Self {
        Self { delta0: 0.2, runs: 500, max_steps: 200, kernel_samples: 10_000, cells: 64, partition_samples: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelBlock {
    /// Source state; `e_1` by default.
    pub z: Option<Vec<Pair>>,
    pub samples: usize,
    pub cells: usize,
    pub partition_samples: usize,
}

impl Default for KernelBlock {
    fn default() -> Self {
        Self { z: None, samples: 10_000, cells: 64, partition_samples: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub system: SystemRef,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub propagator: PropagatorConfig,
    #[serde(default)]
    pub simulate: SimulateBlock,
    #[serde(default)]
    pub mix: MixBlock,
    #[serde(default)]
    pub hittime: HittimeBlock,
    #[serde(default)]
    pub steer: SteerBlock,
    #[serde(default)]
    pub couple: CoupleBlock,
    #[serde(default)]
    pub kernel: KernelBlock,
    #[serde(default)]
    pub galerkin: GalerkinBlock,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse a config document; `seed` replaces the file's seed when given.
    pub fn from_str_with_seed(text: &str, seed: Option<u64>) -> Result<Self, CliError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not JSON: {e}")))?;
        let obj = v.as_object_mut().ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        if let Some(s) = seed {
            obj.insert("seed".into(), Value::from(s));
        }
        if !obj.contains_key("seed") {
            return Err(CliError::Config("config has no seed; set \"seed\" or pass --seed".into()));
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.propagator.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let mut cfg = Self::from_str_with_seed(&text, seed)?;
                cfg.base_dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok(cfg)
            }
            None => Self::from_str_with_seed(&format!("{{\"schema_version\": {SCHEMA_VERSION}}}"), seed),
        }
    }

    pub fn system(&self) -> Result<SystemSpec, CliError> {
        match &self.system {
            SystemRef::Preset(Preset::SysA) => Ok(qsphere_core::sys_a()),
            SystemRef::Preset(Preset::SysB) => Ok(qsphere_core::sys_b()),
            SystemRef::Inline(doc) => Ok(SystemSpec::from_doc(doc)?),
            SystemRef::Path(p) => {
                let path = self.base_dir.join(p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{} is not JSON: {e}", path.display())))?;
                // a `galerkin` artifact carries the system under `result`
                let doc = v.get("result").cloned().unwrap_or(v);
                let doc: SystemSpecDoc = serde_json::from_value(doc)
                    .map_err(|e| CliError::Config(format!("invalid system in {}: {e}", path.display())))?;
                Ok(SystemSpec::from_doc(&doc)?)
            }
            SystemRef::Galerkin(g) => Ok(g.build()?.spec),
        }
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON form.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex(&Sha256::digest(canonical_json(&v).as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Compact JSON with object keys in lexicographic order.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// A state given as `[[re, im], ...]`, checked against the system dimension
/// and the unit sphere.
pub fn state(pairs: &[Pair], n: usize, what: &str) -> Result<Cvec, CliError> {
    if pairs.len() != n {
        return Err(CliError::Config(format!("{what} has {} entries, the system has n = {n}", pairs.len())));
    }
    let z = linalg::from_pair_vec(pairs);
    if !linalg::is_on_sphere(&z) {
        return Err(CliError::Config(format!("{what} is not a unit vector (norm {:.6})", linalg::norm(&z))));
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let c = ExperimentConfig::from_str_with_seed(r#"{"schema_version": 1, "seed": 7}"#, None).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.system, SystemRef::Preset(Preset::SysA));
        assert_eq!(c.mix.cells, 64);
        let o = ExperimentConfig::from_str_with_seed(r#"{"schema_version": 1, "seed": 7}"#, Some(9)).unwrap();
        assert_eq!(o.seed, 9);
        assert_ne!(c.hash(), o.hash());
    }

    #[test]
    fn rejections() {
        for bad in [
            r#"{"schema_version": 1}"#,
            r#"{"schema_version": 2, "seed": 1}"#,
            r#"{"schema_version": 1, "seed": 1, "extra": 0}"#,
            r#"{"schema_version": 1, "seed": 1, "mix": {"kmax": 3}}"#,
            r#"{"schema_version": 1, "seed": 1, "system": {"preset": "sys_c"}}"#,
            r#"{"schema_version": 1, "seed": 1, "propagator": {"substeps_per_unit": 4}}"#,
            r#"[1, 2]"#,
        ] {
            assert!(matches!(ExperimentConfig::from_str_with_seed(bad, None), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn canonical_form_sorts_keys() {
        let v: Value = serde_json::from_str(r#"{"b": [1, {"d": 2, "c": 3}], "a": null}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":null,"b":[1,{"c":3,"d":2}]}"#);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = ExperimentConfig::from_str_with_seed(r#"{"seed": 3, "schema_version": 1, "mix": {"cells": 8, "k_max": 12}}"#, None);
        let b = ExperimentConfig::from_str_with_seed(r#"{"mix": {"k_max": 12, "cells": 8}, "schema_version": 1, "seed": 3}"#, None);
        assert_eq!(a.unwrap().hash(), b.unwrap().hash());
    }

    #[test]
    fn galerkin_system_ref() {
        let c = ExperimentConfig::from_str_with_seed(
            r#"{"schema_version": 1, "seed": 1, "system": {"galerkin": {"potential": "x^2", "n": 4}}}"#,
            None,
        )
        .unwrap();
        assert_eq!(c.system().unwrap().dim(), 4);
    }
}
