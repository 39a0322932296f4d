//! Trace-driven decode simulation.
//!
//! Each MoE layer keeps its own placement and predictor, so layers are
//! simulated independently (in parallel under [`Exec::Parallel`]) and then
//! merged step by step in layer order. Per layer and step:
//!
//! 1. apply migrations admitted at the end of the previous step;
//! 2. schedule the step's loads and take the makespan;
//! 3. latency = makespan + non-expert GPU time + any migration overflow;
//! 4. update the predictor and plan the next round of migrations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostModel, Profiles};
use crate::exec::Exec;
use crate::migration::{
    apply_migrations, plan_migrations, ApplyStatus, MigrationRecord, MigrationTask, OverflowMode, PlanConfig,
    DEFAULT_SKEW_THRESHOLD, DEFAULT_WINDOW_S,
};
use crate::model::{Device, HardwareSpec, ModelSpec};
use crate::placement::{initial_placement, mean_loads, PlacementPolicy};
use crate::predictor::{LayerPredictor, PredictorError, DEFAULT_ALPHA};
use crate::scheduler::{schedule_layer, MakespanModel, Policy, RefineConfig, SchedError, SchedulerOptions};
use crate::trace::{classify_stats, ActivationTrace, ClassStats, ClassifyThresholds};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trace has {trace} experts per layer but the model has {model}")]
    MismatchedTraceModel { trace: usize, model: usize },
    #[error("trace has {trace} layers but the model has {model}")]
    MismatchedLayers { trace: usize, model: usize },
    #[error("trace top_k {trace} differs from model top_k {model}")]
    MismatchedTopK { trace: usize, model: usize },
    #[error("trace has no steps")]
    EmptyTrace,
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationConfig {
    pub enabled: bool,
    /// Overlap window per layer (seconds).
    pub window_s: f64,
    pub skew_threshold: f64,
    pub overflow: OverflowMode,
    pub prefetch: bool,
    pub relayout: bool,
    pub rebalance: bool,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window_s: DEFAULT_WINDOW_S,
            skew_threshold: DEFAULT_SKEW_THRESHOLD,
            overflow: OverflowMode::Defer,
            prefetch: true,
            relayout: true,
            rebalance: true,
        }
    }
}

impl MigrationConfig {
    fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            budget_s: self.window_s,
            skew_threshold: self.skew_threshold,
            overflow: self.overflow,
            prefetch: self.prefetch,
            relayout: self.relayout,
            rebalance: self.rebalance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub policy: Policy,
    pub placement: PlacementPolicy,
    /// Leading trace steps averaged to build the initial placement.
    pub profile_steps: usize,
    pub refine: RefineConfig,
    pub alpha: f64,
    pub thresholds: ClassifyThresholds,
    pub migration: MigrationConfig,
    /// Attention, dense MLP and shared experts per layer (seconds).
    pub non_expert_s: f64,
    pub non_expert_per_token_s: f64,
    /// Added once per request in the batch; zero means decode only.
    pub prefill_per_request_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policy: Policy::TriDomain,
            placement: PlacementPolicy::Auto,
            profile_steps: 4,
            refine: RefineConfig::default(),
            alpha: DEFAULT_ALPHA,
            thresholds: ClassifyThresholds::default(),
            migration: MigrationConfig::default(),
            non_expert_s: 0.68e-3,
            non_expert_per_token_s: 0.0,
            prefill_per_request_s: 0.0,
        }
    }
}

impl SimConfig {
    pub fn with_policy(&self, policy: Policy) -> Self {
        Self { policy, ..self.clone() }
    }

    pub fn resolved_placement(&self) -> PlacementPolicy {
        match (self.placement, self.policy) {
            (PlacementPolicy::Auto, Policy::GpuOnly | Policy::GpuCpu) => PlacementPolicy::AllStriped,
            (PlacementPolicy::Auto, Policy::TriDomain | Policy::GpuNdp) => PlacementPolicy::ClassAware,
            (p, _) => p,
        }
    }

    fn scheduler_options(&self) -> SchedulerOptions {
        SchedulerOptions {
            refine: self.refine,
            hot_min_tokens: self.thresholds.hot_min_tokens.ceil() as u32,
        }
    }

    fn migrates(&self) -> bool {
        self.migration.enabled && self.policy.uses_migration()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStepReport {
    pub layer: usize,
    pub makespan: MakespanModel,
    pub greedy_makespan_s: f64,
    pub refine_moves: usize,
    pub latency_s: f64,
    pub migrations_applied: usize,
    pub migration_overhead_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_index: usize,
    pub layers: Vec<LayerStepReport>,
    pub latency_s: f64,
    pub migrations_applied: usize,
    pub migration_overhead_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceTimes {
    pub gpu: f64,
    pub cpu: f64,
    /// Mean over DIMMs.
    pub ndp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: Policy,
    pub placement: PlacementPolicy,
    pub batch_size: usize,
    pub steps: usize,
    pub total_decode_time_s: f64,
    /// Sum of MoE makespans over all layers and steps.
    pub moe_time_s: f64,
    /// Same, using the greedy assignment before refinement.
    pub greedy_moe_time_s: f64,
    pub non_expert_time_s: f64,
    pub prefill_time_s: f64,
    pub migration_overhead_s: f64,
    pub migration_overhead_fraction: f64,
    pub migrations_applied: usize,
    pub migrations_stale: usize,
    pub migration_time_s: f64,
    pub refine_moves: usize,
    pub tokens_generated: u64,
    pub throughput_tokens_per_s: f64,
    pub busy_s: DeviceTimes,
    pub utilization: DeviceTimes,
    pub class_shares: ClassStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub report: RunReport,
    pub steps: Vec<StepReport>,
    pub migration_log: Vec<MigrationRecord>,
}

struct LayerRun {
    steps: Vec<LayerStepReport>,
    busy: [f64; 3],
    log: Vec<MigrationRecord>,
}

fn check_inputs(trace: &ActivationTrace, model: &ModelSpec) -> Result<(), SimError> {
    if trace.num_experts != model.num_routed_experts {
        return Err(SimError::MismatchedTraceModel { trace: trace.num_experts, model: model.num_routed_experts });
    }
    if trace.top_k != model.top_k {
        return Err(SimError::MismatchedTopK { trace: trace.top_k, model: model.top_k });
    }
    if trace.steps.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    if trace.num_layers() != model.num_layers {
        return Err(SimError::MismatchedLayers { trace: trace.num_layers(), model: model.num_layers });
    }
    Ok(())
}

fn simulate_layer(layer: usize, trace: &ActivationTrace, cm: &CostModel, cfg: &SimConfig) -> Result<LayerRun, SimError> {
    let n = trace.num_experts;
    let profile: Vec<&[u32]> = trace.steps.iter().take(cfg.profile_steps.max(1)).map(|s| &s.layers[layer][..]).collect();
    let mean = mean_loads(&profile, n);
    let mut placement = initial_placement(cfg.resolved_placement(), &mean, cfg.thresholds.cold_max_tokens, cm);
    let mut predictor = LayerPredictor::new(cfg.alpha, n)?;
    let opts = cfg.scheduler_options();
    let plan_cfg = cfg.migration.plan_config();
    let non_expert = cfg.non_expert_s + cfg.non_expert_per_token_s * trace.batch_size as f64;

    let mut pending: Vec<MigrationTask> = Vec::new();
    let mut steps = Vec::with_capacity(trace.steps.len());
    let mut busy = [0.0; 3];
    let mut log = Vec::new();

    for step in &trace.steps {
        let records = apply_migrations(step.step_index, &pending, &mut placement);
        let applied = records.iter().filter(|r| r.status == ApplyStatus::Applied).count();
        log.extend(records);

        let loads = &step.layers[layer];
        let sched = schedule_layer(cfg.policy, loads, &placement.layouts, cm, &opts)?;
        for p in &sched.assignment.placed {
            match p.device {
                Device::Gpu => busy[0] += p.cost.compute_s,
                Device::Cpu => busy[1] += p.cost.compute_s,
                Device::Ndp(_) => busy[2] += p.cost.compute_s,
            }
        }
        busy[0] += non_expert;

        predictor.update(loads);
        let mut overhead = 0.0;
        pending.clear();
        if cfg.migrates() {
            let emas: Vec<f64> = predictor.emas().collect();
            let plan = plan_migrations(layer, &placement, &emas, &cfg.thresholds, cm, &plan_cfg);
            if cfg.migration.overflow == OverflowMode::Charge {
                overhead = (plan.accepted_time() - cfg.migration.window_s).max(0.0);
            }
            pending = plan.accepted;
        }

        steps.push(LayerStepReport {
            layer,
            latency_s: sched.makespan.makespan + non_expert + overhead,
            greedy_makespan_s: sched.greedy_makespan,
            refine_moves: sched.refine_log.len(),
            makespan: sched.makespan,
            migrations_applied: applied,
            migration_overhead_s: overhead,
        });
    }
    Ok(LayerRun { steps, busy, log })
}

/// Runs one policy over a whole trace.
pub fn simulate(
    trace: &ActivationTrace,
    model: &ModelSpec,
    hw: &HardwareSpec,
    profiles: &Profiles,
    cfg: &SimConfig,
    exec: Exec,
) -> Result<SimOutput, SimError> {
    check_inputs(trace, model)?;
    let cm = CostModel::new(model, hw, profiles);
    let runs = exec
        .map_range(trace.num_layers(), |l| simulate_layer(l, trace, &cm, cfg))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let mut steps = Vec::with_capacity(trace.steps.len());
    let (mut moe, mut greedy, mut overhead, mut refine_moves, mut applied) = (0.0, 0.0, 0.0, 0, 0);
    let mut total = 0.0;
    for (t, step) in trace.steps.iter().enumerate() {
        let layers: Vec<LayerStepReport> = runs.iter().map(|r| r.steps[t].clone()).collect();
        let latency: f64 = layers.iter().map(|l| l.latency_s).sum();
        let step_overhead: f64 = layers.iter().map(|l| l.migration_overhead_s).sum();
        let step_applied: usize = layers.iter().map(|l| l.migrations_applied).sum();
        for l in &layers {
            moe += l.makespan.makespan;
            greedy += l.greedy_makespan_s;
            refine_moves += l.refine_moves;
        }
        total += latency;
        overhead += step_overhead;
        applied += step_applied;
        steps.push(StepReport {
            step_index: step.step_index,
            layers,
            latency_s: latency,
            migrations_applied: step_applied,
            migration_overhead_s: step_overhead,
        });
    }

    let mut busy = [0.0; 3];
    for r in &runs {
        for (b, x) in busy.iter_mut().zip(r.busy) {
            *b += x;
        }
    }
    busy[2] /= hw.num_dimms as f64;

    let mut migration_log: Vec<MigrationRecord> = runs.into_iter().flat_map(|r| r.log).collect();
    migration_log.sort_by_key(|r| (r.step, r.task.expert_id));
    let stale = migration_log.iter().filter(|r| r.status != ApplyStatus::Applied).count();
    let migration_time: f64 = migration_log
        .iter()
        .filter(|r| r.status == ApplyStatus::Applied)
        .map(|r| r.task.est_time_s)
        .sum();

    let prefill = cfg.prefill_per_request_s * trace.batch_size as f64;
    let decode = total;
    let total = decode + prefill;
    let tokens = (trace.batch_size * trace.steps.len()) as u64;
    let non_expert = decode - moe - overhead;
    let util = |b: f64| if total > 0.0 { (b / total).clamp(0.0, 1.0) } else { 0.0 };
    let report = RunReport {
        policy: cfg.policy,
        placement: cfg.resolved_placement(),
        batch_size: trace.batch_size,
        steps: trace.steps.len(),
        total_decode_time_s: total,
        moe_time_s: moe,
        greedy_moe_time_s: greedy,
        non_expert_time_s: non_expert,
        prefill_time_s: prefill,
        migration_overhead_s: overhead,
        migration_overhead_fraction: if total > 0.0 { overhead / total } else { 0.0 },
        migrations_applied: applied,
        migrations_stale: stale,
        migration_time_s: migration_time,
        refine_moves,
        tokens_generated: tokens,
        throughput_tokens_per_s: if total > 0.0 { tokens as f64 / total } else { 0.0 },
        busy_s: DeviceTimes { gpu: busy[0], cpu: busy[1], ndp: busy[2] },
        utilization: DeviceTimes { gpu: util(busy[0]), cpu: util(busy[1]), ndp: util(busy[2]) },
        class_shares: classify_stats(trace, &cfg.thresholds),
    };
    Ok(SimOutput { report, steps, migration_log })
}

/// Compute utilization per domain: busy compute time over total time.
pub fn utilization(report: &RunReport) -> DeviceTimes {
    report.utilization
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub baseline: Policy,
    /// Baseline MoE time over tri-domain MoE time.
    pub moe_speedup: f64,
    /// Baseline total decode time over tri-domain total decode time.
    pub decode_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub runs: Vec<RunReport>,
    pub speedups: Vec<Speedup>,
}

impl CompareReport {
    pub fn run(&self, policy: Policy) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.policy == policy)
    }

    /// Baseline with the lowest MoE time.
    pub fn best_baseline(&self) -> Option<&RunReport> {
        self.runs
            .iter()
            .filter(|r| r.policy != Policy::TriDomain)
            .min_by(|a, b| a.moe_time_s.total_cmp(&b.moe_time_s))
    }
}

/// Runs all four policies on the same trace. Each policy gets `cfg` with only
/// the policy name changed.
pub fn compare(
    trace: &ActivationTrace,
    model: &ModelSpec,
    hw: &HardwareSpec,
    profiles: &Profiles,
    cfg: &SimConfig,
    exec: Exec,
) -> Result<CompareReport, SimError> {
    let runs = exec
        .map(&Policy::ALL, |&p| simulate(trace, model, hw, profiles, &cfg.with_policy(p), exec).map(|o| o.report))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let tri = runs[0].clone();
    let speedups = runs[1..]
        .iter()
        .map(|r| Speedup {
            baseline: r.policy,
            moe_speedup: r.moe_time_s / tri.moe_time_s,
            decode_speedup: r.total_decode_time_s / tri.total_decode_time_s,
        })
        .collect();
    Ok(CompareReport { runs, speedups })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumDimms,
    CpuFlopsScale,
    Batch,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::NumDimms => "num_dimms",
            SweepAxis::CpuFlopsScale => "cpu_flops_scale",
            SweepAxis::Batch => "batch",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "num_dimms" => Ok(SweepAxis::NumDimms),
            "cpu_flops_scale" => Ok(SweepAxis::CpuFlopsScale),
            "batch" => Ok(SweepAxis::Batch),
            _ => Err(format!("unknown sweep axis {s:?} (expected num_dimms, cpu_flops_scale or batch)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub report: RunReport,
}

/// Writes sweep rows as CSV with SI units.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "axis",
        "value",
        "policy",
        "total_decode_time_s",
        "moe_time_s",
        "throughput_tokens_per_s",
        "gpu_util",
        "cpu_util",
        "ndp_util",
        "migration_overhead_fraction",
    ])?;
    for r in rows {
        let p = &r.report;
        out.write_record([
            r.axis.to_string(),
            r.value.to_string(),
            p.policy.to_string(),
            p.total_decode_time_s.to_string(),
            p.moe_time_s.to_string(),
            p.throughput_tokens_per_s.to_string(),
            p.utilization.gpu.to_string(),
            p.utilization.cpu.to_string(),
            p.utilization.ndp.to_string(),
            p.migration_overhead_fraction.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
