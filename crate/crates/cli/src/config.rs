use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use t2moco_core::baselines::{HrqrWeights, OrbaConfig};
use t2moco_core::detector::DetectorConfig;
use t2moco_core::encoding::CgOptions;
use t2moco_core::phantom::PhantomSpec;
use t2moco_core::simulate::SimulationConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uncorrected,
    Phimo,
    Orba,
    Hrqr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Uncorrected, Method::Phimo, Method::Orba, Method::Hrqr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Uncorrected => "uncorrected",
            Method::Phimo => "phimo",
            Method::Orba => "orba",
            Method::Hrqr => "hrqr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub methods: Vec<Method>,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig { methods: Method::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub subject: String,
    pub max_gradient_ut_per_m: f64,
    pub n_thresholds: usize,
    /// Display window of the T2* images, ms.
    pub window_ms: [f64; 2],
    pub images: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            subject: "phantom".into(),
            max_gradient_ut_per_m: 100.0,
            n_thresholds: 101,
            window_ms: [0.0, 200.0],
            images: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub work_dir: PathBuf,
    pub threads: Option<usize>,
    pub phantom: PhantomSpec,
    pub simulation: SimulationConfig,
    pub detector: DetectorConfig,
    pub cg: CgOptions,
    pub orba: OrbaConfig,
    pub hrqr: HrqrWeights,
    pub reconstruct: ReconstructConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            work_dir: PathBuf::from("t2moco-run"),
            threads: None,
            phantom: PhantomSpec::default(),
            simulation: SimulationConfig::default(),
            detector: DetectorConfig::default(),
            cg: CgOptions::default(),
            orba: OrbaConfig::default(),
            hrqr: HrqrWeights::default(),
            reconstruct: ReconstructConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{assignment}` has an empty key segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{}` is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}

/// Defaults, then the config file, then `key=value` overrides, validated
/// against the schema.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !file.is_object() {
            bail!("config {} must be a JSON object", path.display());
        }
        merge(&mut root, file);
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Some(seed) = seed {
        for key in ["phantom.seed", "simulation.seed", "orba.seed"] {
            apply_override(&mut root, &format!("{key}={seed}"))?;
        }
    }
    let config: RunConfig = serde_json::from_value(root).context("invalid configuration")?;
    config.phantom.validate()?;
    config.simulation.validate()?;
    config.detector.validate()?;
    config.orba.validate()?;
    if config.reconstruct.methods.is_empty() {
        bail!("reconstruct.methods must name at least one method");
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let c = load(None, &["detector.grouping=per_slice".into(), "phantom.n_slices=4".into()], Some(7)).unwrap();
        assert_eq!(c.detector.grouping, t2moco_core::detector::Grouping::PerSlice);
        assert_eq!(c.phantom.n_slices, 4);
        assert_eq!((c.phantom.seed, c.simulation.seed, c.orba.seed), (7, 7, 7));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load(None, &["detector.learning_rat=0.1".into()], None).is_err());
        assert!(load(None, &["nosuch=1".into()], None).is_err());
        assert!(load(None, &["reconstruct.methods=[\"magic\"]".into()], None).is_err());
        assert!(load(None, &["detector".into()], None).is_err());
    }

    #[test]
    fn tagged_curve_source_can_be_switched() {
        let c = load(None, &["simulation.curve={\"kind\":\"still\"}".into()], None).unwrap();
        assert_eq!(c.simulation.curve, t2moco_core::simulate::CurveSource::Still);
    }
}
