mod common;

use common::fixture;
use hetero_moe::cost::{dram_read_time, CostModel, DeviceClass, Profiles};
use hetero_moe::model::{Device, Layout};
use proptest::prelude::*;

fn paths(cm: &CostModel, tokens: u32, dimm: usize) -> Vec<hetero_moe::cost::CostBreakdown> {
    let local = Layout::Localized(dimm);
    vec![
        cm.gpu_hit(tokens).unwrap(),
        cm.gpu_miss(tokens, Layout::Striped).unwrap(),
        cm.gpu_miss(tokens, local).unwrap(),
        cm.cpu(tokens, Layout::Striped).unwrap(),
        cm.cpu(tokens, local).unwrap(),
        cm.ndp(tokens, local).unwrap(),
    ]
}

proptest! {
    #[test]
    fn total_is_max_of_components(tokens in 0u32..5000, nd in 1usize..=32) {
        let (m, hw, p) = fixture(nd);
        let cm = CostModel::new(&m, &hw, &p);
        for c in paths(&cm, tokens, nd - 1) {
            let max = c.compute_s.max(c.pcie_s).max(c.dram_s);
            prop_assert_eq!(c.total_s, max);
            prop_assert!(c.total_s >= c.compute_s && c.total_s >= c.pcie_s && c.total_s >= c.dram_s);
        }
    }

    #[test]
    fn cost_non_decreasing_in_tokens(a in 0u32..6000, b in 0u32..6000, nd in 1usize..=32) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (m, hw, p) = fixture(nd);
        let cm = CostModel::new(&m, &hw, &p);
        for (x, y) in paths(&cm, lo, 0).into_iter().zip(paths(&cm, hi, 0)) {
            prop_assert!(x.total_s <= y.total_s, "{:?} {} > {}", x.device, x.total_s, y.total_s);
        }
        for class in [DeviceClass::Gpu, DeviceClass::Cpu, DeviceClass::Ndp] {
            prop_assert!(cm.compute_time(class, lo).unwrap() <= cm.compute_time(class, hi).unwrap());
        }
    }

    #[test]
    fn cost_non_decreasing_in_bytes(tokens in 0u32..3000, a in 0u64..200_000_000, b in 0u64..200_000_000) {
        let (m, hw, p) = fixture(16);
        let (mut small, mut big) = (m.clone(), m);
        small.expert_weight_bytes = a.min(b);
        big.expert_weight_bytes = a.max(b);
        let x = CostModel::new(&small, &hw, &p);
        let y = CostModel::new(&big, &hw, &p);
        for (u, v) in paths(&x, tokens, 3).into_iter().zip(paths(&y, tokens, 3)) {
            prop_assert!(u.total_s <= v.total_s);
        }
    }

    #[test]
    fn striped_read_never_slower_than_localized(bytes in 0u64..1_000_000_000, nd in 1usize..=64) {
        let (_, hw, _) = fixture(nd);
        prop_assume!(hw.host_total_bandwidth >= hw.per_dimm_host_bandwidth);
        let s = dram_read_time(bytes, Layout::Striped, &hw).unwrap();
        let l = dram_read_time(bytes, Layout::Localized(0), &hw).unwrap();
        prop_assert!(s <= l);
    }

    #[test]
    fn contention_total_matches_host_reads(nd in 1usize..=16, striped in 0usize..6, local in prop::collection::vec(0usize..16, 0..6)) {
        let (m, hw, p) = fixture(nd);
        let cm = CostModel::new(&m, &hw, &p);
        let mut reads: Vec<(Device, Layout)> = (0..striped).map(|i| (if i % 2 == 0 { Device::Gpu } else { Device::Cpu }, Layout::Striped)).collect();
        reads.extend(local.iter().map(|&d| (Device::Cpu, Layout::Localized(d % nd))));
        let v = cm.contention_time(reads.iter().copied());
        // A striped read puts W/n on each of n DIMMs; a localized read puts W on one.
        let expect = (striped + local.len()) as f64 * m.expert_weight_bytes as f64 / hw.per_dimm_host_bandwidth;
        let total: f64 = v.iter().sum();
        prop_assert!((total - expect).abs() <= 1e-12 * expect.max(1e-300));
    }
}

#[test]
fn zero_work_costs_nothing_everywhere() {
    let (mut m, hw, _) = fixture(16);
    m.expert_weight_bytes = 0;
    let mut p = Profiles::analytic(&hw);
    p.gpu_floor_s = 0.0;
    p.cpu_floor_s = 0.0;
    let cm = CostModel::new(&m, &hw, &p);
    for c in paths(&cm, 0, 5) {
        assert_eq!(c.total_s, 0.0, "{:?}", c.device);
    }
    let with_floors = Profiles::analytic(&hw);
    let cm = CostModel::new(&m, &hw, &with_floors);
    for c in paths(&cm, 0, 5) {
        assert_eq!(c.total_s, 0.0, "{:?}", c.device);
    }
}

#[test]
fn ndp_rejects_striped_layout() {
    let (m, hw, p) = fixture(16);
    let cm = CostModel::new(&m, &hw, &p);
    assert!(cm.ndp(4, Layout::Striped).is_err());
    assert!(cm.ndp(4, Layout::GpuResident).is_err());
}
