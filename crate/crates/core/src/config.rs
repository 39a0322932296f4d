//! Experiment configuration: a TOML file describing model, hardware,
//! policy, predictor, migration and trace source, resolved into an
//! [`Experiment`] that can run, compare and sweep.
//!
//! Every section is optional except `[trace]`, which must name exactly one
//! of `path` or `[trace.generator]`. Unknown keys are rejected.
//!
//! ```toml
//! output_dir = "out"
//!
//! [model]
//! preset = "deepseek-v2"
//!
//! [hardware]
//! num_dimms = 16
//! cpu_flops_scale = 1.0
//!
//! [policy]
//! name = "tri-domain"
//!
//! [trace.generator]
//! batch = 512
//! steps = 16
//! seed = 7
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, Profiles};
use crate::exec::Exec;
use crate::model::{derive_expert_bytes, derive_expert_flops, validate_config, HardwareSpec, ModelError, ModelSpec};
use crate::placement::PlacementPolicy;
use crate::predictor::DEFAULT_ALPHA;
use crate::scheduler::{Policy, RefineConfig};
use crate::sim::{compare, simulate, CompareReport, MigrationConfig, SimConfig, SimError, SimOutput, SweepAxis, SweepRow};
use crate::trace::{generate_trace_with, load_trace, ActivationTrace, ClassifyThresholds, SkewProfile, TraceError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("unknown model preset {0:?} (expected deepseek-v2, qwen3-235b-a22b or glm-4.5-air)")]
    UnknownPreset(String),
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("{0}")]
    Conflict(String),
    #[error("profile {path}: {source}")]
    Profile { path: PathBuf, source: CostError },
    #[error("trace {path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub num_layers: Option<usize>,
    pub num_routed_experts: Option<usize>,
    pub num_shared_experts: Option<usize>,
    pub top_k: Option<usize>,
    pub hidden_dim: Option<u64>,
    pub intermediate_dim: Option<u64>,
    pub bytes_per_param: Option<u64>,
    pub expert_weight_bytes: Option<u64>,
    pub flops_per_token_per_expert: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSection {
    pub gpu_peak_flops: Option<f64>,
    pub gpu_hbm_bandwidth: Option<f64>,
    pub gpu_hbm_expert_budget: Option<u64>,
    pub pcie_bandwidth: Option<f64>,
    pub cpu_peak_flops: Option<f64>,
    pub host_total_bandwidth: Option<f64>,
    pub num_dimms: Option<usize>,
    /// Defaults to `host_total_bandwidth / num_dimms`.
    pub per_dimm_host_bandwidth: Option<f64>,
    pub ndp_peak_flops_per_dimm: Option<f64>,
    pub per_dimm_internal_bandwidth: Option<f64>,
    pub dimm_link_bandwidth: Option<f64>,
    pub dimm_link_max_parallel: Option<usize>,
    /// Multiplies CPU peak and the CPU compute profile.
    pub cpu_flops_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesSection {
    /// `device_class,token_count,achieved_flops` rows, relative to the config file.
    pub csv: Option<PathBuf>,
    pub gpu_floor_s: Option<f64>,
    pub cpu_floor_s: Option<f64>,
    pub ndp_floor_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub name: Policy,
    pub placement: PlacementPolicy,
    pub profile_steps: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { name: Policy::TriDomain, placement: PlacementPolicy::Auto, profile_steps: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub alpha: f64,
    pub hot_min_tokens: f64,
    pub cold_max_tokens: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let t = ClassifyThresholds::default();
        Self { alpha: DEFAULT_ALPHA, hot_min_tokens: t.hot_min_tokens, cold_max_tokens: t.cold_max_tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub non_expert_s: f64,
    pub non_expert_per_token_s: f64,
    pub prefill_per_request_s: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            non_expert_s: d.non_expert_s,
            non_expert_per_token_s: d.non_expert_per_token_s,
            prefill_per_request_s: d.prefill_per_request_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub batch: usize,
    pub steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    #[serde(default = "default_locality")]
    pub locality: f64,
    #[serde(default = "default_rerank")]
    pub rerank_fraction: f64,
}

fn default_seed() -> u64 {
    0
}
fn default_zipf() -> f64 {
    SkewProfile::DEEPSEEK_BATCH_512.zipf_exponent
}
fn default_locality() -> f64 {
    SkewProfile::DEEPSEEK_BATCH_512.locality
}
fn default_rerank() -> f64 {
    SkewProfile::DEEPSEEK_BATCH_512.rerank_fraction
}

impl GeneratorSection {
    pub fn skew(&self) -> SkewProfile {
        SkewProfile {
            zipf_exponent: self.zipf_exponent,
            locality: self.locality,
            rerank_fraction: self.rerank_fraction,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub path: Option<PathBuf>,
    pub generator: Option<GeneratorSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub hardware: HardwareSection,
    #[serde(default)]
    pub profiles: ProfilesSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub predictor: PredictorSection,
    #[serde(default)]
    pub migration: MigrationConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub trace: TraceSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Toml { path: origin.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::NotFound(path.to_path_buf()),
            _ => ConfigError::Io { path: path.to_path_buf(), source: e },
        })?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn model(&self) -> Result<ModelSpec, ConfigError> {
        let s = &self.model;
        let preset = s.preset.as_deref().unwrap_or("deepseek-v2");
        let mut m = ModelSpec::preset(preset).ok_or_else(|| ConfigError::UnknownPreset(preset.to_string()))?;
        if let Some(v) = &s.name {
            m.name = v.clone();
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = s.$f { m.$f = v; })* };
        }
        set!(num_layers, num_routed_experts, num_shared_experts, top_k, hidden_dim, intermediate_dim, bytes_per_param);
        m.expert_weight_bytes = s.expert_weight_bytes.unwrap_or_else(|| derive_expert_bytes(&m));
        m.flops_per_token_per_expert = s.flops_per_token_per_expert.unwrap_or_else(|| derive_expert_flops(&m));
        Ok(m)
    }

    fn hardware(&self, model: &ModelSpec) -> HardwareSpec {
        let s = &self.hardware;
        let mut hw = HardwareSpec::reference_for(model);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = s.$f { hw.$f = v; })* };
        }
        set!(
            gpu_peak_flops,
            gpu_hbm_bandwidth,
            gpu_hbm_expert_budget,
            pcie_bandwidth,
            cpu_peak_flops,
            host_total_bandwidth,
            num_dimms,
            ndp_peak_flops_per_dimm,
            per_dimm_internal_bandwidth,
            dimm_link_bandwidth,
            dimm_link_max_parallel
        );
        hw.per_dimm_host_bandwidth =
            s.per_dimm_host_bandwidth.unwrap_or(hw.host_total_bandwidth / hw.num_dimms.max(1) as f64);
        hw
    }

    /// Validates and resolves the config. Relative paths are taken from `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<Experiment, ConfigError> {
        let model = self.model()?;
        let hardware = self.hardware(&model);
        let mut errs = Vec::new();
        if let Err(ModelError::InvalidConfig(v)) = validate_config(&model, &hardware, &[]) {
            errs.extend(v);
        }
        let scale = self.hardware.cpu_flops_scale.unwrap_or(1.0);
        if !(scale > 0.0 && scale.is_finite()) {
            errs.push(format!("hardware.cpu_flops_scale must be positive, got {scale}"));
        }
        let p = &self.predictor;
        if !(p.alpha > 0.0 && p.alpha <= 1.0) {
            errs.push(format!("predictor.alpha must lie in (0, 1], got {}", p.alpha));
        }
        if p.cold_max_tokens < 0.0 || p.hot_min_tokens <= p.cold_max_tokens {
            errs.push("predictor thresholds need 0 <= cold_max_tokens < hot_min_tokens".to_string());
        }
        let m = &self.migration;
        if !(m.window_s >= 0.0) || !(m.skew_threshold >= 1.0) {
            errs.push("migration.window_s must be >= 0 and migration.skew_threshold >= 1".to_string());
        }
        let trace = match (&self.trace.path, &self.trace.generator) {
            (Some(p), None) => TraceSource::File(base_dir.join(p)),
            (None, Some(g)) => {
                if g.batch == 0 || g.steps == 0 {
                    errs.push("trace.generator batch and steps must be >= 1".to_string());
                }
                if let Err(e) = g.skew().validate() {
                    errs.push(format!("trace.generator: {e}"));
                }
                TraceSource::Generated(g.clone())
            }
            (Some(_), Some(_)) => {
                return Err(ConfigError::Conflict("trace: give either path or generator, not both".into()))
            }
            (None, None) => return Err(ConfigError::Conflict("trace: no source (set path or [trace.generator])".into())),
        };
        if !errs.is_empty() {
            return Err(ModelError::InvalidConfig(errs).into());
        }

        let mut profiles = match &self.profiles.csv {
            Some(rel) => {
                let path = base_dir.join(rel);
                let file = fs::File::open(&path).map_err(|e| ConfigError::Io { path: path.clone(), source: e })?;
                Profiles::from_csv(file, &hardware).map_err(|source| ConfigError::Profile { path, source })?
            }
            None => Profiles::analytic(&hardware),
        };
        if let Some(v) = self.profiles.gpu_floor_s {
            profiles.gpu_floor_s = v;
        }
        if let Some(v) = self.profiles.cpu_floor_s {
            profiles.cpu_floor_s = v;
        }
        if let Some(v) = self.profiles.ndp_floor_s {
            profiles.ndp_floor_s = v;
        }

        let sim = SimConfig {
            policy: self.policy.name,
            placement: self.policy.placement,
            profile_steps: self.policy.profile_steps,
            refine: self.refine,
            alpha: p.alpha,
            thresholds: ClassifyThresholds { hot_min_tokens: p.hot_min_tokens, cold_max_tokens: p.cold_max_tokens },
            migration: self.migration,
            non_expert_s: self.sim.non_expert_s,
            non_expert_per_token_s: self.sim.non_expert_per_token_s,
            prefill_per_request_s: self.sim.prefill_per_request_s,
        };
        Ok(Experiment {
            model,
            hardware,
            per_dimm_host_bandwidth: self.hardware.per_dimm_host_bandwidth,
            cpu_flops_scale: scale,
            profiles,
            sim,
            trace,
            output_dir: base_dir.join(&self.output_dir),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    File(PathBuf),
    Generated(GeneratorSection),
}

/// A validated, fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelSpec,
    /// Hardware before `cpu_flops_scale` is applied.
    pub hardware: HardwareSpec,
    pub per_dimm_host_bandwidth: Option<f64>,
    pub cpu_flops_scale: f64,
    /// Profiles before `cpu_flops_scale` is applied.
    pub profiles: Profiles,
    pub sim: SimConfig,
    pub trace: TraceSource,
    pub output_dir: PathBuf,
}

impl Experiment {
    /// Hardware and profiles with the CPU scale applied.
    pub fn effective(&self) -> (HardwareSpec, Profiles) {
        let mut hw = self.hardware.clone();
        hw.cpu_peak_flops *= self.cpu_flops_scale;
        let mut profiles = self.profiles.clone();
        profiles.cpu = profiles.cpu.scaled(self.cpu_flops_scale);
        (hw, profiles)
    }

    pub fn with_num_dimms(&self, n: usize) -> Self {
        let mut e = self.clone();
        e.hardware.num_dimms = n;
        e.hardware.per_dimm_host_bandwidth =
            self.per_dimm_host_bandwidth.unwrap_or(e.hardware.host_total_bandwidth / n.max(1) as f64);
        e
    }

    pub fn with_cpu_flops_scale(&self, scale: f64) -> Self {
        Self { cpu_flops_scale: scale, ..self.clone() }
    }

    pub fn with_batch(&self, batch: usize) -> Result<Self, ConfigError> {
        match &self.trace {
            TraceSource::Generated(g) => {
                let mut e = self.clone();
                e.trace = TraceSource::Generated(GeneratorSection { batch, ..g.clone() });
                Ok(e)
            }
            TraceSource::File(p) => Err(ConfigError::Conflict(format!(
                "batch sweep needs a generated trace, config reads {}",
                p.display()
            ))),
        }
    }

    pub fn load_trace(&self, exec: Exec) -> Result<ActivationTrace, ConfigError> {
        match &self.trace {
            TraceSource::File(path) => load_trace(path).map_err(|source| ConfigError::Trace { path: path.clone(), source }),
            TraceSource::Generated(g) => Ok(generate_trace_with(exec, &self.model, g.batch, g.steps, &g.skew(), g.seed)),
        }
    }

    pub fn simulate(&self, trace: &ActivationTrace, exec: Exec) -> Result<SimOutput, ConfigError> {
        let (hw, profiles) = self.effective();
        Ok(simulate(trace, &self.model, &hw, &profiles, &self.sim, exec)?)
    }

    pub fn compare(&self, trace: &ActivationTrace, exec: Exec) -> Result<CompareReport, ConfigError> {
        let (hw, profiles) = self.effective();
        Ok(compare(trace, &self.model, &hw, &profiles, &self.sim, exec)?)
    }

    /// One run per (value, policy). All points share the trace seed; the
    /// batch axis regenerates the trace at each batch size.
    pub fn sweep(
        &self,
        axis: SweepAxis,
        values: &[f64],
        policies: &[Policy],
        exec: Exec,
    ) -> Result<Vec<SweepRow>, ConfigError> {
        let mut points = Vec::new();
        for &v in values {
            let integral = || -> Result<usize, ConfigError> {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(ConfigError::Conflict(format!("{axis} values must be positive integers, got {v}")))
                }
            };
            let e = match axis {
                SweepAxis::NumDimms => self.with_num_dimms(integral()?),
                SweepAxis::CpuFlopsScale => {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(ConfigError::Conflict(format!("cpu_flops_scale values must be positive, got {v}")));
                    }
                    self.with_cpu_flops_scale(v)
                }
                SweepAxis::Batch => self.with_batch(integral()?)?,
            };
            for &p in policies {
                let mut e = e.clone();
                e.sim.policy = p;
                points.push((v, e));
            }
        }
        let shared = match axis {
            SweepAxis::Batch => None,
            _ => Some(self.load_trace(exec)?),
        };
        exec.map(&points, |(v, e)| {
            let own;
            let trace = match &shared {
                Some(t) => t,
                None => {
                    own = e.load_trace(exec)?;
                    &own
                }
            };
            let report = e.simulate(trace, exec)?.report;
            Ok(SweepRow { axis, value: *v, report })
        })
        .into_iter()
        .collect()
    }
}
