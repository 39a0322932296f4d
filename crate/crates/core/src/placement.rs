//! Initial weight layout for one layer and the mutable placement state the
//! migration engine edits between decode steps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{CostModel, DeviceClass};
use crate::model::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementPolicy {
    /// Policy-dependent default: class-aware for policies that use NDP,
    /// all-striped otherwise.
    Auto,
    /// Hottest experts in HBM, cold ones localized and spread over DIMMs by
    /// NDP cost, the rest striped.
    ClassAware,
    AllStriped,
    AllLocalized,
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementPolicy::Auto => "auto",
            PlacementPolicy::ClassAware => "class-aware",
            PlacementPolicy::AllStriped => "all-striped",
            PlacementPolicy::AllLocalized => "all-localized",
        })
    }
}

impl FromStr for PlacementPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(PlacementPolicy::Auto),
            "class-aware" => Ok(PlacementPolicy::ClassAware),
            "all-striped" => Ok(PlacementPolicy::AllStriped),
            "all-localized" => Ok(PlacementPolicy::AllLocalized),
            _ => Err(format!(
                "unknown placement {s:?} (expected auto, class-aware, all-striped or all-localized)"
            )),
        }
    }
}

/// Layout of every routed expert in one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlacement {
    pub layouts: Vec<Layout>,
    /// Where each expert's host copy lives; an evicted expert returns here.
    pub host_layouts: Vec<Layout>,
    pub hbm_capacity: usize,
}

impl LayerPlacement {
    pub fn resident_count(&self) -> usize {
        self.layouts.iter().filter(|l| **l == Layout::GpuResident).count()
    }

    pub fn set_layout(&mut self, expert: usize, layout: Layout) {
        self.layouts[expert] = layout;
        if layout.is_host() {
            self.host_layouts[expert] = layout;
        }
    }

    /// Checks DIMM indices, the HBM budget and that host copies are host layouts.
    pub fn check(&self, num_dimms: usize) -> Result<(), String> {
        if self.layouts.len() != self.host_layouts.len() {
            return Err("layout and host layout lengths differ".into());
        }
        for (e, l) in self.layouts.iter().chain(&self.host_layouts).enumerate() {
            if let Layout::Localized(d) = l {
                if *d >= num_dimms {
                    return Err(format!("expert {} localized on DIMM {d} of {num_dimms}", e % self.layouts.len()));
                }
            }
        }
        if let Some(e) = self.host_layouts.iter().position(|l| !l.is_host()) {
            return Err(format!("expert {e} has no host copy"));
        }
        if self.resident_count() > self.hbm_capacity {
            return Err(format!(
                "{} resident experts exceed HBM capacity {}",
                self.resident_count(),
                self.hbm_capacity
            ));
        }
        Ok(())
    }
}

/// Mean per-expert load over the profiling steps.
pub fn mean_loads(profile: &[&[u32]], num_experts: usize) -> Vec<f64> {
    let mut mean = vec![0.0; num_experts];
    for loads in profile {
        for (m, &l) in mean.iter_mut().zip(loads.iter()) {
            *m += l as f64;
        }
    }
    let n = profile.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Experts sorted by descending load, lower index first on ties.
fn by_load_desc(load: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..load.len()).collect();
    order.sort_by(|&a, &b| load[b].total_cmp(&load[a]).then(a.cmp(&b)));
    order
}

/// Assigns each listed expert to the DIMM with the least accumulated NDP
/// cost, heaviest first.
fn spread_over_dimms(experts: &[usize], load: &[f64], cm: &CostModel, layouts: &mut [Layout]) {
    let mut per_dimm: Vec<f64> = vec![0.0; cm.hw.num_dimms];
    for &e in experts {
        let tokens = load[e].round() as u32;
        let c = cm.compute_time(DeviceClass::Ndp, tokens).unwrap_or(0.0).max(cm.internal_read_time());
        let d = (0..per_dimm.len())
            .min_by(|&a, &b| per_dimm[a].total_cmp(&per_dimm[b]).then(a.cmp(&b)))
            .unwrap_or(0);
        per_dimm[d] += c;
        layouts[e] = Layout::Localized(d);
    }
}

/// Builds the starting layout of one layer from its profiled mean loads.
/// `policy` must already be resolved (not `Auto`).
pub fn initial_placement(
    policy: PlacementPolicy,
    mean_load: &[f64],
    cold_max_tokens: f64,
    cm: &CostModel,
) -> LayerPlacement {
    let n = mean_load.len();
    let capacity = cm.hw.hbm_expert_capacity(cm.model.expert_weight_bytes);
    let order = by_load_desc(mean_load);
    let mut layouts = vec![Layout::Striped; n];

    let rest = &order[capacity.min(n)..];
    match policy {
        PlacementPolicy::AllStriped | PlacementPolicy::Auto => {}
        PlacementPolicy::AllLocalized => spread_over_dimms(rest, mean_load, cm, &mut layouts),
        PlacementPolicy::ClassAware => {
            let cold: Vec<usize> = rest.iter().copied().filter(|&e| mean_load[e] <= cold_max_tokens).collect();
            spread_over_dimms(&cold, mean_load, cm, &mut layouts);
        }
    }
    let host_layouts = layouts.clone();
    for &e in &order[..capacity.min(n)] {
        layouts[e] = Layout::GpuResident;
    }
    LayerPlacement { layouts, host_layouts, hbm_capacity: capacity }
}
