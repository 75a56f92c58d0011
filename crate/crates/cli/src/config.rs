//! Run configuration: one JSON document in which every key is optional and
//! unknown keys are rejected, plus `--set dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use pat_core::baseline::LsqrOptions;
use pat_core::data::PhantomSpec;
use pat_core::inn::ArchSpec;
use pat_core::unroll::TrainConfig;
use pat_core::wave::{make_subsampled_geometry, GridSpec, NoiseSpec, ReceiverGeometry, SimGrid, SubsampleScheme};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub subsample_factor: usize,
    pub scheme: SubsampleScheme,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { subsample_factor: 4, scheme: SubsampleScheme::Total }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { snr_db: 10.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_samples: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub n_stages: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { n_stages: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { dataset: "dataset".into(), checkpoints: "checkpoints".into(), output: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Added (wrapping) to the phantom, noise and training seeds.
    pub seed: u64,
    pub grid: GridSpec,
    pub geometry: GeometryConfig,
    pub noise: NoiseConfig,
    pub phantom: PhantomSpec,
    pub data: DataConfig,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub plan: PlanConfig,
    pub lsqr: LsqrOptions,
    pub paths: PathsConfig,
}


/// Validated physical objects derived from a config.
pub struct Resolved {
    pub grid: SimGrid,
    pub geometry: ReceiverGeometry,
}

impl RunConfig {
    /// Reads `path` (missing keys take their defaults), applies overrides in
    /// order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, Resolved), CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                // parsing the text directly keeps line/column positions in errors
                serde_json::from_str::<RunConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if !overrides.is_empty() {
            let mut value = serde_json::to_value(&cfg).expect("config serializes");
            for o in overrides {
                apply_override(&mut value, o)?;
            }
            cfg = serde_json::from_value(value)
                .map_err(|e| CliError::Config(format!("after --set {}: {e}", overrides.join(" --set "))))?;
        }
        let resolved = cfg.validate()?;
        Ok((cfg, resolved))
    }

    pub fn validate(&self) -> Result<Resolved, CliError> {
        let field = |name: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{name}: {e}"));
        let grid = SimGrid::new(self.grid.clone()).map_err(|e| field("grid", &e))?;
        let geometry = make_subsampled_geometry(&grid, self.geometry.subsample_factor, self.geometry.scheme)
            .map_err(|e| field("geometry.subsample_factor", &e))?;
        if !self.noise.snr_db.is_finite() {
            return Err(field("noise.snr_db", &"must be finite"));
        }
        self.phantom.validate().map_err(|e| field("phantom", &e))?;
        self.arch.validate().map_err(|e| field("arch", &e))?;
        // a squeeze halves every axis longer than one cell; the kernel must still fit
        if self.arch.squeeze_after.is_some() {
            for (axis, n) in [("nx", grid.nx()), ("ny", grid.ny()), ("nz", grid.nz())] {
                if n > 1 && (n % 2 != 0 || n / 2 < self.arch.kernel) {
                    return Err(field(&format!("grid.{axis}"), &format!("{n} cannot be squeezed by 2 for kernel {}", self.arch.kernel)));
                }
            }
        }
        self.train.validate().map_err(|e| field("train", &e))?;
        if self.plan.n_stages == 0 {
            return Err(field("plan.n_stages", &"must be positive"));
        }
        if self.lsqr.max_iters == 0 {
            return Err(field("lsqr.max_iters", &"must be positive"));
        }
        if !(self.lsqr.atol >= 0.0 && self.lsqr.btol >= 0.0) {
            return Err(field("lsqr", &"tolerances must be nonnegative"));
        }
        Ok(Resolved { grid, geometry })
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        self.phantom.with_seed(self.phantom.seed.wrapping_add(self.seed))
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec { snr_db: self.noise.snr_db, seed: self.noise.seed.wrapping_add(self.seed) }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.train.seed.wrapping_add(self.seed), ..self.train.clone() }
    }
}

/// `a.b.c=value`; the value is parsed as JSON when possible, otherwise taken
/// as a string. Missing intermediate objects are created.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` must look like key.path=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is non-empty")
}
