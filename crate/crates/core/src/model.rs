//! Domain types shared by every other module: model shape, hardware
//! parameters, expert layouts and the devices experts can run on.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Structural parameters of an MoE model. No weights, only sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Number of MoE layers (dense layers are not modeled).
    pub num_layers: usize,
    pub num_routed_experts: usize,
    pub num_shared_experts: usize,
    pub top_k: usize,
    pub hidden_dim: u64,
    pub intermediate_dim: u64,
    pub bytes_per_param: u64,
    /// Weight bytes of one routed expert (gate, up and down projections).
    pub expert_weight_bytes: u64,
    pub flops_per_token_per_expert: f64,
}

impl ModelSpec {
    /// Builds a model whose expert bytes and FLOPs are derived from the dims.
    #[allow(clippy::too_many_arguments)]
    pub fn from_dims(
        name: impl Into<String>,
        num_layers: usize,
        num_routed_experts: usize,
        num_shared_experts: usize,
        top_k: usize,
        hidden_dim: u64,
        intermediate_dim: u64,
        bytes_per_param: u64,
    ) -> Self {
        let mut m = Self {
            name: name.into(),
            num_layers,
            num_routed_experts,
            num_shared_experts,
            top_k,
            hidden_dim,
            intermediate_dim,
            bytes_per_param,
            expert_weight_bytes: 0,
            flops_per_token_per_expert: 0.0,
        };
        m.expert_weight_bytes = derive_expert_bytes(&m);
        m.flops_per_token_per_expert = derive_expert_flops(&m);
        m
    }

    /// DeepSeek-V2: 59 MoE layers (the first of 60 is dense), 160 routed
    /// experts, 2 shared, top-6, hidden 5120, expert intermediate 1536.
    pub fn deepseek_v2() -> Self {
        Self::from_dims("deepseek-v2", 59, 160, 2, 6, 5120, 1536, 2)
    }

    /// Qwen3-235B-A22B: 94 MoE layers, 128 routed experts, top-8.
    pub fn qwen3_235b() -> Self {
        Self::from_dims("qwen3-235b-a22b", 94, 128, 0, 8, 4096, 1536, 2)
    }

    /// GLM-4.5-Air: 45 MoE layers (first layer dense), 128 routed, 1 shared, top-8.
    pub fn glm45_air() -> Self {
        Self::from_dims("glm-4.5-air", 45, 128, 1, 8, 4096, 1408, 2)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "deepseek-v2" => Some(Self::deepseek_v2()),
            "qwen3-235b-a22b" => Some(Self::qwen3_235b()),
            "glm-4.5-air" => Some(Self::glm45_air()),
            _ => None,
        }
    }

    /// Tokens routed per layer per decode step for a batch.
    pub fn routed_tokens(&self, batch: usize) -> u64 {
        (batch * self.top_k) as u64
    }

    /// Total routed-expert weight bytes across all layers.
    pub fn total_routed_bytes(&self) -> u64 {
        self.expert_weight_bytes * (self.num_routed_experts * self.num_layers) as u64
    }
}

/// `3 × hidden × intermediate × bytes_per_param`.
pub fn derive_expert_bytes(model: &ModelSpec) -> u64 {
    3 * model.hidden_dim * model.intermediate_dim * model.bytes_per_param
}

/// Two FLOPs per multiply-accumulate over the three projections.
pub fn derive_expert_flops(model: &ModelSpec) -> f64 {
    2.0 * 3.0 * model.hidden_dim as f64 * model.intermediate_dim as f64
}

/// Throughput, bandwidth and capacity of the three compute domains and the
/// links between them. Rates are in FLOP/s and bytes/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub gpu_peak_flops: f64,
    pub gpu_hbm_bandwidth: f64,
    /// HBM bytes available for routed experts of one layer.
    pub gpu_hbm_expert_budget: u64,
    pub pcie_bandwidth: f64,
    pub cpu_peak_flops: f64,
    pub host_total_bandwidth: f64,
    pub num_dimms: usize,
    pub per_dimm_host_bandwidth: f64,
    pub ndp_peak_flops_per_dimm: f64,
    pub per_dimm_internal_bandwidth: f64,
    pub dimm_link_bandwidth: f64,
    pub dimm_link_max_parallel: usize,
}

impl HardwareSpec {
    /// H100 PCIe + Xeon with AMX + 16 NDP DIMMs with DIMM-Link. The HBM expert
    /// budget holds eight experts of `model`.
    pub fn reference_for(model: &ModelSpec) -> Self {
        let num_dimms = 16;
        let host_total_bandwidth = 307.2e9;
        Self {
            gpu_peak_flops: 819.6e12,
            gpu_hbm_bandwidth: 2.04e12,
            gpu_hbm_expert_budget: 8 * model.expert_weight_bytes,
            pcie_bandwidth: 64e9,
            cpu_peak_flops: 90.1e12,
            host_total_bandwidth,
            num_dimms,
            per_dimm_host_bandwidth: host_total_bandwidth / num_dimms as f64,
            ndp_peak_flops_per_dimm: 256e9,
            per_dimm_internal_bandwidth: 153.6e9,
            dimm_link_bandwidth: 25e9,
            dimm_link_max_parallel: 4,
        }
    }

    /// Number of experts of `bytes` each that fit the HBM budget.
    pub fn hbm_expert_capacity(&self, bytes: u64) -> usize {
        if bytes == 0 {
            return usize::MAX;
        }
        (self.gpu_hbm_expert_budget / bytes) as usize
    }
}

/// Where an expert's weights live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    GpuResident,
    /// Spread evenly over every DIMM; host reads see aggregate bandwidth.
    Striped,
    /// Entirely on one DIMM; required for near-data execution.
    Localized(usize),
}

impl Layout {
    pub fn is_host(self) -> bool {
        !matches!(self, Layout::GpuResident)
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::GpuResident => f.write_str("gpu-resident"),
            Layout::Striped => f.write_str("striped"),
            Layout::Localized(d) => write!(f, "localized({d})"),
        }
    }
}

/// A compute unit an expert can be assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Gpu,
    Cpu,
    Ndp(usize),
}

impl Device {
    /// Fixed tie-break order: NDP units first (lower DIMM first), then CPU, then GPU.
    pub fn tie_rank(self) -> (u8, usize) {
        match self {
            Device::Ndp(d) => (0, d),
            Device::Cpu => (1, 0),
            Device::Gpu => (2, 0),
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Device::Gpu => f.write_str("gpu"),
            Device::Cpu => f.write_str("cpu"),
            Device::Ndp(d) => write!(f, "ndp{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertId {
    pub layer: usize,
    pub index: usize,
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}E{}", self.layer, self.index)
    }
}

/// Placement and predictor view of one routed expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertState {
    pub expert_id: ExpertId,
    pub layout: Layout,
    pub ema_load: f64,
    pub last_observed_load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLoad {
    pub expert_id: ExpertId,
    pub tokens: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
}

/// Checks every model, hardware and placement invariant and reports all
/// violations at once.
pub fn validate_config(
    model: &ModelSpec,
    hw: &HardwareSpec,
    placement: &[ExpertState],
) -> Result<(), ModelError> {
    let mut errs = Vec::new();

    if model.num_layers == 0 {
        errs.push("model.num_layers must be >= 1".to_string());
    }
    if model.num_routed_experts == 0 {
        errs.push("model.num_routed_experts must be >= 1".to_string());
    }
    if model.top_k == 0 || model.top_k > model.num_routed_experts {
        errs.push(format!(
            "model.top_k = {} must be in 1..={}",
            model.top_k, model.num_routed_experts
        ));
    }
    if model.expert_weight_bytes == 0 {
        errs.push("model.expert_weight_bytes must be positive".to_string());
    }
    if !(model.flops_per_token_per_expert > 0.0) || !model.flops_per_token_per_expert.is_finite() {
        errs.push("model.flops_per_token_per_expert must be positive".to_string());
    }

    let rates = [
        ("gpu_peak_flops", hw.gpu_peak_flops),
        ("gpu_hbm_bandwidth", hw.gpu_hbm_bandwidth),
        ("pcie_bandwidth", hw.pcie_bandwidth),
        ("cpu_peak_flops", hw.cpu_peak_flops),
        ("host_total_bandwidth", hw.host_total_bandwidth),
        ("per_dimm_host_bandwidth", hw.per_dimm_host_bandwidth),
        ("ndp_peak_flops_per_dimm", hw.ndp_peak_flops_per_dimm),
        ("per_dimm_internal_bandwidth", hw.per_dimm_internal_bandwidth),
        ("dimm_link_bandwidth", hw.dimm_link_bandwidth),
    ];
    for (name, v) in rates {
        if !(v > 0.0) || !v.is_finite() {
            errs.push(format!("hardware.{name} must be positive and finite, got {v}"));
        }
    }
    if hw.num_dimms == 0 {
        errs.push("hardware.num_dimms must be >= 1".to_string());
    }
    if hw.dimm_link_max_parallel == 0 {
        errs.push("hardware.dimm_link_max_parallel must be >= 1".to_string());
    }
    if hw.per_dimm_host_bandwidth > hw.host_total_bandwidth {
        errs.push(format!(
            "hardware.per_dimm_host_bandwidth ({}) exceeds host_total_bandwidth ({})",
            hw.per_dimm_host_bandwidth, hw.host_total_bandwidth
        ));
    }

    let mut seen = std::collections::HashSet::new();
    for st in placement {
        let id = st.expert_id;
        if id.layer >= model.num_layers || id.index >= model.num_routed_experts {
            errs.push(format!("placement: expert {id} out of range"));
        }
        if !seen.insert(id) {
            errs.push(format!("placement: expert {id} has more than one layout"));
        }
        if let Layout::Localized(d) = st.layout {
            if d >= hw.num_dimms {
                errs.push(format!(
                    "placement: expert {id} localized on dimm {d} but num_dimms = {}",
                    hw.num_dimms
                ));
            }
        }
        if !(st.ema_load >= 0.0) {
            errs.push(format!("placement: expert {id} has negative ema_load"));
        }
        if !(st.last_observed_load >= 0.0) {
            errs.push(format!("placement: expert {id} has negative last_observed_load"));
        }
    }

    if errs.is_empty() {
        Ok(())
    } else {
        Err(ModelError::InvalidConfig(errs))
    }
}
