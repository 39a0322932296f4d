//! Per-layer expert→device assignment.
//!
//! The tri-domain policy runs a greedy pass (each expert to its cheapest
//! eligible device in isolation) followed by bottleneck correction: take the
//! slowest device, try moving its most expensive expert elsewhere, keep the
//! move that lowers the global makespan most, repeat until nothing improves.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostBreakdown, CostError, CostModel};
use crate::model::{Device, Layout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("expert {expert} with layout {layout} has no eligible device")]
    NoEligibleDevice { expert: usize, layout: Layout },
    #[error("unknown policy {0:?} (expected tri-domain, gpu-only, gpu-cpu or gpu-ndp)")]
    UnknownPolicy(String),
    #[error("loads cover {loads} experts but layouts cover {layouts}")]
    LengthMismatch { loads: usize, layouts: usize },
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Greedy placement over GPU, CPU and NDP plus bottleneck refinement.
    TriDomain,
    /// Everything on the GPU, fetching non-resident weights over PCIe with
    /// transfer/compute overlap.
    GpuOnly,
    /// Resident and hot experts on the GPU, everything else on the CPU.
    GpuCpu,
    /// Localized experts on their NDP unless fetching to the GPU is cheaper.
    GpuNdp,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::TriDomain, Policy::GpuOnly, Policy::GpuCpu, Policy::GpuNdp];
    pub const BASELINES: [Policy; 3] = [Policy::GpuOnly, Policy::GpuCpu, Policy::GpuNdp];

    pub fn name(self) -> &'static str {
        match self {
            Policy::TriDomain => "tri-domain",
            Policy::GpuOnly => "gpu-only",
            Policy::GpuCpu => "gpu-cpu",
            Policy::GpuNdp => "gpu-ndp",
        }
    }

    pub fn uses_migration(self) -> bool {
        self == Policy::TriDomain
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = SchedError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SchedError::UnknownPolicy(s.to_string()))
    }
}

/// Which off-GPU domains a policy may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainMask {
    pub cpu: bool,
    pub ndp: bool,
}

impl DomainMask {
    pub const ALL: DomainMask = DomainMask { cpu: true, ndp: true };
}

/// Devices that may run an expert with `layout`, in tie-break order.
pub fn eligible_devices(layout: Layout, mask: DomainMask) -> Vec<Device> {
    let mut out = Vec::with_capacity(3);
    match layout {
        Layout::GpuResident => {}
        Layout::Striped => {
            if mask.cpu {
                out.push(Device::Cpu);
            }
        }
        Layout::Localized(d) => {
            if mask.ndp {
                out.push(Device::Ndp(d));
            }
            if mask.cpu {
                out.push(Device::Cpu);
            }
        }
    }
    out.push(Device::Gpu);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placed {
    pub expert: usize,
    pub tokens: u32,
    pub layout: Layout,
    pub device: Device,
    pub cost: CostBreakdown,
}

/// Device choice for every expert of one layer that received tokens,
/// ordered by expert index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub placed: Vec<Placed>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.placed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placed.is_empty()
    }

    pub fn device_of(&self, expert: usize) -> Option<Device> {
        self.placed
            .binary_search_by_key(&expert, |p| p.expert)
            .ok()
            .map(|i| self.placed[i].device)
    }

    pub fn on(&self, device: Device) -> impl Iterator<Item = &Placed> {
        self.placed.iter().filter(move |p| p.device == device)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MakespanModel {
    pub t_gpu_total: f64,
    pub t_cpu_total: f64,
    pub t_dimm: Vec<f64>,
    pub makespan: f64,
}

impl MakespanModel {
    fn from_parts(t_gpu_total: f64, t_cpu_total: f64, t_dimm: Vec<f64>) -> Self {
        let makespan = t_dimm.iter().fold(t_gpu_total.max(t_cpu_total), |m, &x| m.max(x));
        Self { t_gpu_total, t_cpu_total, t_dimm, makespan }
    }

    pub fn zero(num_dimms: usize) -> Self {
        Self::from_parts(0.0, 0.0, vec![0.0; num_dimms])
    }

    pub fn max_dimm(&self) -> f64 {
        self.t_dimm.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-domain sums of assigned costs plus DIMM contention from host reads.
pub fn evaluate_makespan(assignment: &Assignment, cm: &CostModel) -> MakespanModel {
    let mut gpu = 0.0;
    let mut cpu = 0.0;
    let mut dimm = vec![0.0; cm.hw.num_dimms];
    for p in &assignment.placed {
        match p.device {
            Device::Gpu => gpu += p.cost.total_s,
            Device::Cpu => cpu += p.cost.total_s,
            Device::Ndp(d) => dimm[d] += p.cost.total_s,
        }
        cm.add_contention(p.device, p.layout, 1.0, &mut dimm);
    }
    MakespanModel::from_parts(gpu, cpu, dimm)
}

fn check_lengths(loads: &[u32], layouts: &[Layout]) -> Result<(), SchedError> {
    if loads.len() != layouts.len() {
        return Err(SchedError::LengthMismatch { loads: loads.len(), layouts: layouts.len() });
    }
    Ok(())
}

/// Each loaded expert goes to the eligible device with the lowest standalone
/// cost; ties resolve NDP, then CPU, then GPU.
pub fn greedy_initial_assignment(
    loads: &[u32],
    layouts: &[Layout],
    cm: &CostModel,
    mask: DomainMask,
) -> Result<Assignment, SchedError> {
    check_lengths(loads, layouts)?;
    let mut placed = Vec::new();
    for (expert, (&tokens, &layout)) in loads.iter().zip(layouts).enumerate() {
        if tokens == 0 {
            continue;
        }
        let mut best: Option<CostBreakdown> = None;
        for dev in eligible_devices(layout, mask) {
            let c = cm.cost_on(dev, tokens, layout)?;
            if best.is_none_or(|b| c.total_s < b.total_s) {
                best = Some(c);
            }
        }
        let cost = best.ok_or(SchedError::NoEligibleDevice { expert, layout })?;
        placed.push(Placed { expert, tokens, layout, device: cost.device, cost });
    }
    Ok(Assignment { placed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub enabled: bool,
    /// Defaults to four times the number of loaded experts.
    pub max_iters: Option<usize>,
    /// Try up to three candidates on the bottleneck device instead of only
    /// the most expensive one.
    pub multi_candidate: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { enabled: true, max_iters: None, multi_candidate: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub iteration: usize,
    pub bottleneck: Device,
    pub candidate: usize,
    pub destination: Device,
    pub old_makespan: f64,
    pub new_makespan: f64,
}

/// Running per-device totals, updated in place as experts move.
#[derive(Debug, Clone)]
pub struct DomainTotals {
    gpu: f64,
    cpu: f64,
    ndp: Vec<f64>,
    contention: Vec<f64>,
}

impl DomainTotals {
    pub fn of(assignment: &Assignment, cm: &CostModel) -> Self {
        let n = cm.hw.num_dimms;
        let mut t = DomainTotals { gpu: 0.0, cpu: 0.0, ndp: vec![0.0; n], contention: vec![0.0; n] };
        for p in &assignment.placed {
            t.add(p, cm, 1.0);
        }
        t
    }

    pub fn add(&mut self, p: &Placed, cm: &CostModel, sign: f64) {
        match p.device {
            Device::Gpu => self.gpu += sign * p.cost.total_s,
            Device::Cpu => self.cpu += sign * p.cost.total_s,
            Device::Ndp(d) => self.ndp[d] += sign * p.cost.total_s,
        }
        cm.add_contention(p.device, p.layout, sign, &mut self.contention);
    }

    pub fn device_total(&self, dev: Device) -> f64 {
        match dev {
            Device::Gpu => self.gpu,
            Device::Cpu => self.cpu,
            Device::Ndp(d) => self.ndp[d] + self.contention[d],
        }
    }

    pub fn makespan(&self) -> f64 {
        (0..self.ndp.len()).fold(self.gpu.max(self.cpu), |m, d| m.max(self.ndp[d] + self.contention[d]))
    }

    /// Slowest device; ties resolve GPU, CPU, then lower DIMM.
    pub fn bottleneck(&self) -> Device {
        let mut best = (Device::Gpu, self.gpu);
        if self.cpu > best.1 {
            best = (Device::Cpu, self.cpu);
        }
        for d in 0..self.ndp.len() {
            let v = self.ndp[d] + self.contention[d];
            if v > best.1 {
                best = (Device::Ndp(d), v);
            }
        }
        best.0
    }
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

struct Move {
    slot: usize,
    placed: Placed,
    new_makespan: f64,
    delta: f64,
}

fn better(a: &Move, b: &Move) -> bool {
    if !nearly_equal(a.new_makespan, b.new_makespan) {
        return a.new_makespan < b.new_makespan;
    }
    if !nearly_equal(a.delta, b.delta) {
        return a.delta < b.delta;
    }
    a.placed.device.tie_rank() < b.placed.device.tie_rank()
}

fn best_move(
    totals: &mut DomainTotals,
    assignment: &Assignment,
    slot: usize,
    cm: &CostModel,
    mask: DomainMask,
) -> Result<Option<Move>, SchedError> {
    let cur = assignment.placed[slot];
    let mut best: Option<Move> = None;
    totals.add(&cur, cm, -1.0);
    for dev in eligible_devices(cur.layout, mask) {
        if dev == cur.device {
            continue;
        }
        let cost = cm.cost_on(dev, cur.tokens, cur.layout)?;
        let cand = Placed { device: dev, cost, ..cur };
        let before = totals.device_total(dev);
        totals.add(&cand, cm, 1.0);
        let mv = Move {
            slot,
            placed: cand,
            new_makespan: totals.makespan(),
            delta: totals.device_total(dev) - before,
        };
        totals.add(&cand, cm, -1.0);
        if best.as_ref().is_none_or(|b| better(&mv, b)) {
            best = Some(mv);
        }
    }
    totals.add(&cur, cm, 1.0);
    Ok(best)
}

/// Iterative bottleneck correction. Only strict makespan reductions are
/// accepted, so the result never exceeds the initial makespan.
pub fn refine_assignment(
    initial: Assignment,
    cm: &CostModel,
    mask: DomainMask,
    cfg: &RefineConfig,
) -> Result<(Assignment, Vec<RefineStep>), SchedError> {
    let mut assignment = initial;
    let mut log = Vec::new();
    let max_iters = cfg.max_iters.unwrap_or(4 * assignment.len());
    let mut totals = DomainTotals::of(&assignment, cm);
    let candidates = if cfg.multi_candidate { 3 } else { 1 };

    for iteration in 0..max_iters {
        let current = totals.makespan();
        let bottleneck = totals.bottleneck();
        let mut on_device: Vec<usize> = (0..assignment.len())
            .filter(|&i| assignment.placed[i].device == bottleneck)
            .collect();
        // Highest cost first; lower expert index breaks ties.
        on_device.sort_by(|&a, &b| {
            let (pa, pb) = (&assignment.placed[a], &assignment.placed[b]);
            pb.cost.total_s.total_cmp(&pa.cost.total_s).then(pa.expert.cmp(&pb.expert))
        });

        let mut chosen = None;
        for &slot in on_device.iter().take(candidates) {
            if let Some(mv) = best_move(&mut totals, &assignment, slot, cm, mask)? {
                if mv.new_makespan < current && !nearly_equal(mv.new_makespan, current) {
                    chosen = Some(mv);
                    break;
                }
            }
        }
        let Some(mv) = chosen else { break };

        let old = assignment.placed[mv.slot];
        totals.add(&old, cm, -1.0);
        totals.add(&mv.placed, cm, 1.0);
        assignment.placed[mv.slot] = mv.placed;
        debug_assert!({
            let fresh = evaluate_makespan(&assignment, cm).makespan;
            (fresh - totals.makespan()).abs() <= 1e-12 * fresh.max(1e-300)
        });
        log.push(RefineStep {
            iteration,
            bottleneck,
            candidate: old.expert,
            destination: mv.placed.device,
            old_makespan: current,
            new_makespan: totals.makespan(),
        });
    }
    Ok((assignment, log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerOptions {
    pub refine: RefineConfig,
    /// Token count at which the GPU-CPU baseline sends a non-resident expert to the GPU.
    pub hot_min_tokens: u32,
}

impl Default for SchedulerOptions {
    fn default() -> Self {
        Self { refine: RefineConfig::default(), hot_min_tokens: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub assignment: Assignment,
    pub makespan: MakespanModel,
    pub greedy_makespan: f64,
    pub refine_log: Vec<RefineStep>,
}

fn place_on(cm: &CostModel, expert: usize, tokens: u32, layout: Layout, device: Device) -> Result<Placed, SchedError> {
    let cost = cm.cost_on(device, tokens, layout)?;
    Ok(Placed { expert, tokens, layout, device, cost })
}

pub fn schedule_layer(
    policy: Policy,
    loads: &[u32],
    layouts: &[Layout],
    cm: &CostModel,
    opts: &SchedulerOptions,
) -> Result<LayerSchedule, SchedError> {
    check_lengths(loads, layouts)?;
    let loaded = || loads.iter().zip(layouts).enumerate().filter(|(_, (t, _))| **t > 0);
    match policy {
        Policy::TriDomain | Policy::GpuNdp => {
            let mask = if policy == Policy::TriDomain {
                DomainMask::ALL
            } else {
                DomainMask { cpu: false, ndp: true }
            };
            let greedy = greedy_initial_assignment(loads, layouts, cm, mask)?;
            let greedy_makespan = evaluate_makespan(&greedy, cm).makespan;
            let (assignment, refine_log) = if policy == Policy::TriDomain && opts.refine.enabled {
                refine_assignment(greedy, cm, mask, &opts.refine)?
            } else {
                (greedy, Vec::new())
            };
            let makespan = evaluate_makespan(&assignment, cm);
            Ok(LayerSchedule { assignment, makespan, greedy_makespan, refine_log })
        }
        Policy::GpuOnly => {
            let placed = loaded()
                .map(|(e, (&t, &l))| place_on(cm, e, t, l, Device::Gpu))
                .collect::<Result<Vec<_>, _>>()?;
            let assignment = Assignment { placed };
            let base = evaluate_makespan(&assignment, cm);
            // Transfers of later experts overlap compute of earlier ones.
            let compute: f64 = assignment.placed.iter().map(|p| p.cost.compute_s).sum();
            let pcie: f64 = assignment.placed.iter().map(|p| p.cost.pcie_s).sum();
            let makespan = MakespanModel::from_parts(compute.max(pcie), 0.0, base.t_dimm);
            let greedy_makespan = makespan.makespan;
            Ok(LayerSchedule { assignment, makespan, greedy_makespan, refine_log: Vec::new() })
        }
        Policy::GpuCpu => {
            let placed = loaded()
                .map(|(e, (&t, &l))| {
                    let dev = if l == Layout::GpuResident || t >= opts.hot_min_tokens {
                        Device::Gpu
                    } else {
                        Device::Cpu
                    };
                    place_on(cm, e, t, l, dev)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let assignment = Assignment { placed };
            let makespan = evaluate_makespan(&assignment, cm);
            let greedy_makespan = makespan.makespan;
            Ok(LayerSchedule { assignment, makespan, greedy_makespan, refine_log: Vec::new() })
        }
    }
}

/// Checks that every loaded expert appears once and only on a device its
/// layout permits.
pub fn check_assignment(assignment: &Assignment, loads: &[u32], layouts: &[Layout]) -> Result<(), String> {
    let expected: Vec<usize> = (0..loads.len()).filter(|&e| loads[e] > 0).collect();
    let got: Vec<usize> = assignment.placed.iter().map(|p| p.expert).collect();
    if expected != got {
        return Err(format!("assigned experts {got:?} differ from loaded experts {expected:?}"));
    }
    for p in &assignment.placed {
        if !eligible_devices(layouts[p.expert], DomainMask::ALL).contains(&p.device) {
            return Err(format!("expert {} with layout {} placed on {}", p.expert, layouts[p.expert], p.device));
        }
    }
    Ok(())
}
