#![allow(dead_code)]

use hetero_moe::cost::{CostModel, Profiles};
use hetero_moe::model::{HardwareSpec, Layout, ModelSpec};
use hetero_moe::scheduler::{eligible_devices, evaluate_makespan, Assignment, DomainMask, Placed};
use rand::Rng;

/// DeepSeek-V2 experts on the reference box, with `num_dimms` DIMMs sharing
/// the host bandwidth.
pub fn fixture(num_dimms: usize) -> (ModelSpec, HardwareSpec, Profiles) {
    let m = ModelSpec::deepseek_v2();
    let mut hw = HardwareSpec::reference_for(&m);
    hw.num_dimms = num_dimms;
    hw.per_dimm_host_bandwidth = hw.host_total_bandwidth / num_dimms as f64;
    let p = Profiles::analytic(&hw);
    (m, hw, p)
}

/// Minimum makespan over every eligible assignment, by brute force.
pub fn exhaustive_optimum(loads: &[u32], layouts: &[Layout], cm: &CostModel, mask: DomainMask) -> f64 {
    let loaded: Vec<usize> = (0..loads.len()).filter(|&e| loads[e] > 0).collect();
    let options: Vec<Vec<Placed>> = loaded
        .iter()
        .map(|&e| {
            eligible_devices(layouts[e], mask)
                .into_iter()
                .map(|d| {
                    let cost = cm.cost_on(d, loads[e], layouts[e]).unwrap();
                    Placed { expert: e, tokens: loads[e], layout: layouts[e], device: d, cost }
                })
                .collect()
        })
        .collect();
    let mut idx = vec![0usize; options.len()];
    let mut best = f64::INFINITY;
    loop {
        let placed = idx.iter().zip(&options).map(|(&i, o)| o[i]).collect();
        best = best.min(evaluate_makespan(&Assignment { placed }, cm).makespan);
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] < options[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// A small scheduling instance: loads mixing cold, warm and hot experts and
/// layouts drawn over all three kinds.
pub fn random_instance<R: Rng>(rng: &mut R, max_experts: usize, num_dimms: usize) -> (Vec<u32>, Vec<Layout>) {
    let n = rng.random_range(1..=max_experts);
    let loads = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => rng.random_range(1..=8),
            1 => rng.random_range(9..256),
            2 => rng.random_range(256..3000),
            _ => rng.random_range(0..=40),
        })
        .collect();
    let layouts = (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => Layout::GpuResident,
            1 => Layout::Striped,
            _ => Layout::Localized(rng.random_range(0..num_dimms)),
        })
        .collect();
    (loads, layouts)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
