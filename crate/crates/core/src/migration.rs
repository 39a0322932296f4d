//! Background weight movement between decode steps: prefetching hot experts
//! into HBM, re-laying out experts whose class changed, and rebalancing cold
//! experts across DIMMs. Work is ranked by predicted benefit and admitted
//! while it fits the overlap window of the layer's non-expert GPU work.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostModel, DeviceClass};
use crate::model::{ExpertId, HardwareSpec, Layout};
use crate::placement::LayerPlacement;
use crate::scheduler::{eligible_devices, greedy_initial_assignment, DomainMask, DomainTotals, Placed};
use crate::trace::{ClassifyThresholds, ExpertClass};

pub const DEFAULT_WINDOW_S: f64 = 0.68e-3;
pub const DEFAULT_SKEW_THRESHOLD: f64 = 1.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MigrationError {
    #[error("stale task for {expert}: expected layout {expected}, found {found}")]
    StaleTask { expert: ExpertId, expected: Layout, found: Layout },
    #[error("HBM full: cannot prefetch {0} without an eviction")]
    HbmFull(ExpertId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    /// Copy into HBM over PCIe, evicting the coldest resident expert if full.
    Prefetch { evict: Option<usize> },
    Relayout { from: Layout, to: Layout },
    Rebalance { from: usize, to: usize },
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Prefetch { evict: None } => f.write_str("prefetch"),
            TaskKind::Prefetch { evict: Some(v) } => write!(f, "prefetch(evict E{v})"),
            TaskKind::Relayout { from, to } => write!(f, "relayout({from}->{to})"),
            TaskKind::Rebalance { from, to } => write!(f, "rebalance({from}->{to})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationTask {
    pub kind: TaskKind,
    pub expert_id: ExpertId,
    pub bytes: u64,
    pub est_time_s: f64,
    pub predicted_benefit_s: f64,
    /// Layout the task expects to find when applied.
    pub source: Layout,
    /// Index of an earlier task in the same plan that must be admitted first.
    pub after: Option<usize>,
}

impl MigrationTask {
    pub fn target(&self) -> Layout {
        match self.kind {
            TaskKind::Prefetch { .. } => Layout::GpuResident,
            TaskKind::Relayout { to, .. } => to,
            TaskKind::Rebalance { to, .. } => Layout::Localized(to),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferKind {
    Prefetch,
    Relayout,
    Rebalance,
}

/// Transfer time for one task's weights.
///
/// Relayout moves `num_dimms − 1` shards of `bytes / num_dimms` each over
/// DIMM-Link, at most `dimm_link_max_parallel` at a time.
pub fn link_transfer_time(bytes: u64, kind: TransferKind, hw: &HardwareSpec) -> f64 {
    if bytes == 0 {
        return 0.0;
    }
    match kind {
        TransferKind::Prefetch => bytes as f64 / hw.pcie_bandwidth,
        TransferKind::Rebalance => bytes as f64 / hw.dimm_link_bandwidth,
        TransferKind::Relayout => {
            let n = hw.num_dimms;
            let shards = n.saturating_sub(1);
            let shard_time = bytes as f64 / n as f64 / hw.dimm_link_bandwidth;
            shards.div_ceil(hw.dimm_link_max_parallel.max(1)) as f64 * shard_time
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowMode {
    /// Tasks that do not fit the window wait for a later window.
    #[default]
    Defer,
    /// Every beneficial task runs; time beyond the window is added to latency.
    Charge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub budget_s: f64,
    pub skew_threshold: f64,
    pub overflow: OverflowMode,
    pub prefetch: bool,
    pub relayout: bool,
    pub rebalance: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            budget_s: DEFAULT_WINDOW_S,
            skew_threshold: DEFAULT_SKEW_THRESHOLD,
            overflow: OverflowMode::Defer,
            prefetch: true,
            relayout: true,
            rebalance: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub accepted: Vec<MigrationTask>,
    pub deferred: Vec<MigrationTask>,
}

impl MigrationPlan {
    pub fn accepted_time(&self) -> f64 {
        self.accepted.iter().map(|t| t.est_time_s).sum()
    }
}

fn predicted_tokens(ema: f64) -> u32 {
    ema.max(0.0).round() as u32
}

fn cold_load_of(home: &[Option<usize>], emas: &[f64], cm: &CostModel) -> Vec<f64> {
    let mut out = vec![0.0; cm.hw.num_dimms];
    for (e, d) in home.iter().enumerate() {
        if let Some(d) = *d {
            out[d] += ndp_cost(emas[e], cm);
        }
    }
    out
}

/// NDP cost at predicted load of the predicted-cold experts localized on each DIMM.
pub fn predicted_cold_load(
    placement: &LayerPlacement,
    emas: &[f64],
    classes: &[ExpertClass],
    cm: &CostModel,
) -> Vec<f64> {
    let mut out = vec![0.0; cm.hw.num_dimms];
    for (e, &layout) in placement.layouts.iter().enumerate() {
        if let (Layout::Localized(d), ExpertClass::Cold) = (layout, classes[e]) {
            out[d] += ndp_cost(emas[e], cm);
        }
    }
    out
}

fn ndp_cost(ema: f64, cm: &CostModel) -> f64 {
    let c = cm.compute_time(DeviceClass::Ndp, predicted_tokens(ema)).unwrap_or(0.0);
    c.max(cm.internal_read_time())
}

/// Predicted per-device load of the layer, used to price candidate moves.
struct Forecast<'a> {
    cm: &'a CostModel<'a>,
    tokens: Vec<u32>,
    placed: Vec<Option<Placed>>,
    totals: DomainTotals,
}

impl<'a> Forecast<'a> {
    fn new(cm: &'a CostModel<'a>, emas: &[f64], layouts: &[Layout]) -> Self {
        let tokens: Vec<u32> = emas.iter().map(|&e| predicted_tokens(e)).collect();
        let assignment = greedy_initial_assignment(&tokens, layouts, cm, DomainMask::ALL)
            .expect("host layouts always have an eligible device");
        let mut placed = vec![None; tokens.len()];
        for p in &assignment.placed {
            placed[p.expert] = Some(*p);
        }
        let totals = DomainTotals::of(&assignment, cm);
        Self { cm, tokens, placed, totals }
    }

    /// Predicted makespan reduction from moving the given experts to new layouts,
    /// each re-placed on whichever eligible device yields the lowest makespan.
    fn benefit(&mut self, moves: &[(usize, Layout)]) -> f64 {
        let before = self.totals.makespan();
        let mut removed = Vec::new();
        let mut added = Vec::new();
        for &(e, _) in moves {
            if let Some(p) = self.placed[e] {
                self.totals.add(&p, self.cm, -1.0);
                removed.push(p);
            }
        }
        for &(e, layout) in moves {
            let tokens = self.tokens[e];
            if tokens == 0 {
                continue;
            }
            let mut best: Option<(f64, Placed)> = None;
            for dev in eligible_devices(layout, DomainMask::ALL) {
                let Ok(cost) = self.cm.cost_on(dev, tokens, layout) else { continue };
                let p = Placed { expert: e, tokens, layout, device: dev, cost };
                self.totals.add(&p, self.cm, 1.0);
                let m = self.totals.makespan();
                self.totals.add(&p, self.cm, -1.0);
                if best.is_none_or(|(bm, _)| m < bm) {
                    best = Some((m, p));
                }
            }
            if let Some((_, p)) = best {
                self.totals.add(&p, self.cm, 1.0);
                added.push(p);
            }
        }
        let after = self.totals.makespan();
        for p in &added {
            self.totals.add(p, self.cm, -1.0);
        }
        for p in &removed {
            self.totals.add(p, self.cm, 1.0);
        }
        // Add/subtract round-off must not register as a gain.
        if before - after <= 1e-12 * before {
            0.0
        } else {
            before - after
        }
    }
}

/// Generates prefetch, relayout and rebalance candidates for one layer and
/// admits them greedily by benefit within the window budget.
pub fn plan_migrations(
    layer: usize,
    placement: &LayerPlacement,
    emas: &[f64],
    thresholds: &ClassifyThresholds,
    cm: &CostModel,
    cfg: &PlanConfig,
) -> MigrationPlan {
    let n = placement.layouts.len();
    let classes: Vec<ExpertClass> = emas.iter().map(|&e| thresholds.classify(e)).collect();
    let bytes = cm.model.expert_weight_bytes;
    let hw = cm.hw;
    let id = |index| ExpertId { layer, index };
    let mut forecast = Forecast::new(cm, emas, &placement.layouts);
    let mut candidates: Vec<MigrationTask> = Vec::new();

    if cfg.prefetch {
        let mut hot: Vec<usize> = (0..n)
            .filter(|&e| classes[e] == ExpertClass::Hot && placement.layouts[e] != Layout::GpuResident)
            .collect();
        hot.sort_by(|&a, &b| emas[b].total_cmp(&emas[a]).then(a.cmp(&b)));
        let mut victims: Vec<usize> = (0..n).filter(|&e| placement.layouts[e] == Layout::GpuResident).collect();
        victims.sort_by(|&a, &b| emas[a].total_cmp(&emas[b]).then(a.cmp(&b)));
        let free = placement.hbm_capacity.saturating_sub(victims.len());
        let mut victims = victims.into_iter();
        for (i, &e) in hot.iter().enumerate() {
            let evict = if i < free {
                None
            } else {
                match victims.next() {
                    Some(v) if emas[v] < emas[e] => Some(v),
                    _ => break,
                }
            };
            let mut moves = vec![(e, Layout::GpuResident)];
            if let Some(v) = evict {
                moves.push((v, placement.host_layouts[v]));
            }
            candidates.push(MigrationTask {
                kind: TaskKind::Prefetch { evict },
                expert_id: id(e),
                bytes,
                est_time_s: link_transfer_time(bytes, TransferKind::Prefetch, hw),
                predicted_benefit_s: forecast.benefit(&moves),
                source: placement.layouts[e],
                after: None,
            });
        }
    }

    let mut cold_load = predicted_cold_load(placement, emas, &classes, cm);

    if cfg.relayout {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| emas[b].total_cmp(&emas[a]).then(a.cmp(&b)));
        for e in order {
            let from = placement.layouts[e];
            let to = match (from, classes[e]) {
                (Layout::Localized(_), ExpertClass::Warm | ExpertClass::Hot) => Layout::Striped,
                (Layout::Striped, ExpertClass::Cold) => {
                    let d = (0..cold_load.len())
                        .min_by(|&a, &b| cold_load[a].total_cmp(&cold_load[b]).then(a.cmp(&b)))
                        .unwrap_or(0);
                    Layout::Localized(d)
                }
                _ => continue,
            };
            let benefit = forecast.benefit(&[(e, to)]);
            if let Layout::Localized(d) = to {
                if benefit > 0.0 {
                    cold_load[d] += ndp_cost(emas[e], cm);
                }
            }
            candidates.push(MigrationTask {
                kind: TaskKind::Relayout { from, to },
                expert_id: id(e),
                bytes,
                est_time_s: link_transfer_time(bytes, TransferKind::Relayout, hw),
                predicted_benefit_s: benefit,
                source: from,
                after: None,
            });
        }
    }

    if cfg.rebalance {
        let base = candidates.len();
        for t in rebalance_chain(layer, placement, emas, &classes, cm, cfg.skew_threshold) {
            let after = (candidates.len() > base).then(|| candidates.len() - 1);
            candidates.push(MigrationTask { after, ..t });
        }
    }

    admit(candidates, cfg)
}

/// Moves cold experts from the busiest to the idlest DIMM while the
/// max/mean ratio of predicted cold load exceeds `skew_threshold`. Every
/// move strictly lowers the maximum; benefit is that reduction.
pub fn rebalance_chain(
    layer: usize,
    placement: &LayerPlacement,
    emas: &[f64],
    classes: &[ExpertClass],
    cm: &CostModel,
    skew_threshold: f64,
) -> Vec<MigrationTask> {
    let bytes = cm.model.expert_weight_bytes;
    let mut load = predicted_cold_load(placement, emas, classes, cm);
    let mut home: Vec<Option<usize>> = placement
        .layouts
        .iter()
        .enumerate()
        .map(|(e, l)| match (l, classes[e]) {
            (Layout::Localized(d), ExpertClass::Cold) => Some(*d),
            _ => None,
        })
        .collect();
    let mut out = Vec::new();
    let max_moves = home.iter().flatten().count();
    while out.len() < max_moves {
        let mean = load.iter().sum::<f64>() / load.len() as f64;
        let argmax = (0..load.len()).max_by(|&a, &b| load[a].total_cmp(&load[b]).then(b.cmp(&a)));
        let argmin = (0..load.len()).min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)));
        let (Some(hi), Some(lo)) = (argmax, argmin) else { break };
        if mean <= 0.0 || load[hi] / mean <= skew_threshold || hi == lo {
            break;
        }
        let gap = load[hi] - load[lo];
        let pick = (0..home.len())
            .filter(|&e| home[e] == Some(hi))
            .map(|e| (e, ndp_cost(emas[e], cm)))
            .filter(|&(_, c)| c > 0.0 && c < gap)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((e, _)) = pick else { break };
        let old_max = load[hi];
        // Recompute rather than adjust in place: incremental updates drift and
        // can turn an exact tie into a phantom improvement.
        home[e] = Some(lo);
        let next = cold_load_of(&home, emas, cm);
        let new_max = next.iter().copied().fold(0.0, f64::max);
        if new_max >= old_max {
            break;
        }
        load = next;
        out.push(MigrationTask {
            kind: TaskKind::Rebalance { from: hi, to: lo },
            expert_id: ExpertId { layer, index: e },
            bytes,
            est_time_s: link_transfer_time(bytes, TransferKind::Rebalance, cm.hw),
            predicted_benefit_s: old_max - new_max,
            source: Layout::Localized(hi),
            after: None,
        });
    }
    out
}

/// Benefit order (ties: shorter task, then expert index); admits while the
/// running total fits the budget, skipping tasks that do not fit.
fn admit(candidates: Vec<MigrationTask>, cfg: &PlanConfig) -> MigrationPlan {
    let mut order: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].predicted_benefit_s > 0.0).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&candidates[a], &candidates[b]);
        y.predicted_benefit_s
            .total_cmp(&x.predicted_benefit_s)
            .then(x.est_time_s.total_cmp(&y.est_time_s))
            .then(x.expert_id.cmp(&y.expert_id))
            .then(a.cmp(&b))
    });
    // A dependent task can only follow its predecessor, so push it behind.
    let mut admitted = vec![false; candidates.len()];
    let mut busy: Vec<usize> = Vec::new();
    let mut plan = MigrationPlan::default();
    let mut used = 0.0;
    let mut pending: Vec<usize> = order;
    loop {
        let mut progressed = false;
        let mut next = Vec::new();
        for i in pending {
            let t = candidates[i];
            let blocked = t.after.is_some_and(|p| !admitted[p]);
            let touches = |e: usize| busy.contains(&e);
            let conflict = touches(t.expert_id.index)
                || matches!(t.kind, TaskKind::Prefetch { evict: Some(v) } if touches(v));
            let fits = cfg.overflow == OverflowMode::Charge || used + t.est_time_s <= cfg.budget_s;
            if blocked {
                next.push(i);
            } else if !conflict && fits {
                used += t.est_time_s;
                admitted[i] = true;
                busy.push(t.expert_id.index);
                if let TaskKind::Prefetch { evict: Some(v) } = t.kind {
                    busy.push(v);
                }
                plan.accepted.push(t);
                progressed = true;
            } else {
                plan.deferred.push(t);
            }
        }
        if next.is_empty() {
            break;
        }
        if !progressed {
            plan.deferred.extend(next.into_iter().map(|i| candidates[i]));
            break;
        }
        pending = next;
    }
    // Dependents admitted in a later pass still belong in benefit order.
    plan.accepted.sort_by(|x, y| y.predicted_benefit_s.total_cmp(&x.predicted_benefit_s));
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyStatus {
    Applied,
    Stale,
    /// HBM had no room and the task named no eviction.
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationRecord {
    pub step: usize,
    pub task: MigrationTask,
    pub status: ApplyStatus,
}

/// Applies one task, checking that the expert still has the layout the
/// task was planned against.
pub fn apply_task(task: &MigrationTask, placement: &mut LayerPlacement) -> Result<(), MigrationError> {
    let e = task.expert_id.index;
    let found = placement.layouts[e];
    if found != task.source {
        return Err(MigrationError::StaleTask { expert: task.expert_id, expected: task.source, found });
    }
    if let TaskKind::Prefetch { evict } = task.kind {
        if let Some(v) = evict {
            let vf = placement.layouts[v];
            if vf != Layout::GpuResident {
                let expert = ExpertId { index: v, ..task.expert_id };
                return Err(MigrationError::StaleTask { expert, expected: Layout::GpuResident, found: vf });
            }
            placement.layouts[v] = placement.host_layouts[v];
        }
        if placement.resident_count() >= placement.hbm_capacity {
            if let Some(v) = evict {
                placement.layouts[v] = Layout::GpuResident;
            }
            return Err(MigrationError::HbmFull(task.expert_id));
        }
    }
    placement.set_layout(e, task.target());
    Ok(())
}

/// Applies accepted tasks in order; stale ones are dropped and logged.
pub fn apply_migrations(step: usize, tasks: &[MigrationTask], placement: &mut LayerPlacement) -> Vec<MigrationRecord> {
    tasks
        .iter()
        .map(|task| {
            let status = match apply_task(task, placement) {
                Ok(()) => ApplyStatus::Applied,
                Err(MigrationError::StaleTask { .. }) => ApplyStatus::Stale,
                Err(MigrationError::HbmFull(_)) => ApplyStatus::Rejected,
            };
            MigrationRecord { step, task: *task, status }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::Profiles;
    use crate::model::ModelSpec;
    use approx::assert_relative_eq;

    #[test]
    fn transfer_times() {
        let m = ModelSpec::deepseek_v2();
        let hw = HardwareSpec::reference_for(&m);
        let b = m.expert_weight_bytes;
        assert_eq!(link_transfer_time(0, TransferKind::Rebalance, &hw), 0.0);
        assert_relative_eq!(link_transfer_time(b, TransferKind::Rebalance, &hw), 1.8874368e-3, max_relative = 1e-12);
        assert_relative_eq!(link_transfer_time(b, TransferKind::Prefetch, &hw), 7.3728e-4, max_relative = 1e-12);
        // 15 shards of W/16, four links at a time → 4 rounds.
        let shard = b as f64 / 16.0 / 25e9;
        assert_relative_eq!(link_transfer_time(b, TransferKind::Relayout, &hw), 4.0 * shard, max_relative = 1e-12);
    }

    fn setup(num_dimms: usize) -> (ModelSpec, HardwareSpec, Profiles) {
        let m = ModelSpec::deepseek_v2();
        let mut hw = HardwareSpec::reference_for(&m);
        hw.num_dimms = num_dimms;
        hw.per_dimm_host_bandwidth = hw.host_total_bandwidth / num_dimms as f64;
        let p = Profiles::analytic(&hw);
        (m, hw, p)
    }

    #[test]
    fn zero_budget_defers_everything() {
        let (m, hw, p) = setup(4);
        let cm = CostModel::new(&m, &hw, &p);
        let placement = LayerPlacement {
            layouts: vec![Layout::Localized(0), Layout::Striped],
            host_layouts: vec![Layout::Localized(0), Layout::Striped],
            hbm_capacity: 1,
        };
        let cfg = PlanConfig { budget_s: 0.0, ..PlanConfig::default() };
        let plan = plan_migrations(0, &placement, &[120.0, 1.0], &ClassifyThresholds::default(), &cm, &cfg);
        assert!(plan.accepted.is_empty());
        assert!(!plan.deferred.is_empty());
    }

    #[test]
    fn prefetch_evicts_coldest_resident() {
        let mut placement = LayerPlacement {
            layouts: vec![Layout::GpuResident, Layout::GpuResident, Layout::Striped],
            host_layouts: vec![Layout::Striped, Layout::Localized(1), Layout::Striped],
            hbm_capacity: 2,
        };
        let task = MigrationTask {
            kind: TaskKind::Prefetch { evict: Some(1) },
            expert_id: ExpertId { layer: 0, index: 2 },
            bytes: 1,
            est_time_s: 1e-9,
            predicted_benefit_s: 1.0,
            source: Layout::Striped,
            after: None,
        };
        apply_task(&task, &mut placement).unwrap();
        assert_eq!(placement.layouts, vec![Layout::GpuResident, Layout::Localized(1), Layout::GpuResident]);
        assert!(matches!(apply_task(&task, &mut placement), Err(MigrationError::StaleTask { .. })));
    }
}
