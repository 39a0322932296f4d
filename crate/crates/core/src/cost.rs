//! Per-expert execution cost on each path, compute lookup tables and
//! DIMM contention.
//!
//! Every path cost is the max of the terms that overlap on it:
//!
//! | path       | terms                                           |
//! |------------|-------------------------------------------------|
//! | GPU hit    | GPU compute                                     |
//! | GPU miss   | GPU compute, PCIe weight transfer, host DRAM read |
//! | CPU        | CPU compute, host DRAM read                     |
//! | NDP        | NDP compute, internal DIMM read (localized only) |

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Device, HardwareSpec, Layout, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("{device} cannot execute an expert with layout {layout}")]
    IneligibleLayout { device: Device, layout: Layout },
    #[error("layout {0} has no host copy to read")]
    LayoutNotReadable(Layout),
    #[error("compute profile for {0:?} is empty")]
    EmptyProfile(DeviceClass),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Gpu,
    Cpu,
    Ndp,
}

impl DeviceClass {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gpu" => Some(DeviceClass::Gpu),
            "cpu" => Some(DeviceClass::Cpu),
            "ndp" => Some(DeviceClass::Ndp),
            _ => None,
        }
    }
}

/// Achieved FLOP/s as a function of token count, piecewise linear between
/// breakpoints and clamped outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    points: Vec<(u32, f64)>,
}

impl ComputeProfile {
    pub fn new(points: Vec<(u32, f64)>) -> Result<Self, CostError> {
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CostError::InvalidProfile(format!(
                    "token counts not strictly increasing at {}",
                    w[1].0
                )));
            }
            if w[1].1 < w[0].1 {
                return Err(CostError::InvalidProfile(format!(
                    "achieved flops decrease at {} tokens",
                    w[1].0
                )));
            }
        }
        if let Some(&(t, _)) = points.first() {
            if t < 1 {
                return Err(CostError::InvalidProfile("token counts start at 1".into()));
            }
        }
        if let Some(&(t, f)) = points.iter().find(|p| !(p.1 > 0.0) || !p.1.is_finite()) {
            return Err(CostError::InvalidProfile(format!(
                "achieved flops {f} at {t} tokens must be positive"
            )));
        }
        Ok(Self { points })
    }

    /// Saturating curve `peak · t / (t + half)` sampled at powers of two up
    /// to `sample_to`, then a linear ramp to `peak` at `peak_at` tokens.
    fn saturating(peak: f64, half: f64, sample_to: u32, peak_at: u32) -> Self {
        let mut points = Vec::new();
        let mut t = 1u32;
        while t <= sample_to {
            let tf = t as f64;
            points.push((t, peak * tf / (tf + half)));
            t *= 2;
        }
        points.push((peak_at, peak));
        Self { points }
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    pub fn peak(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.1)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(t, f)| (t, f * factor)).collect(),
        }
    }

    pub fn achieved(&self, tokens: u32) -> Result<f64, CostError> {
        let (first, last) = match (self.points.first(), self.points.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(CostError::EmptyProfile(DeviceClass::Gpu)),
        };
        if tokens <= first.0 {
            return Ok(first.1);
        }
        if tokens >= last.0 {
            return Ok(last.1);
        }
        let i = self.points.partition_point(|p| p.0 <= tokens);
        let (t0, f0) = self.points[i - 1];
        let (t1, f1) = self.points[i];
        let frac = (tokens - t0) as f64 / (t1 - t0) as f64;
        Ok(f0 + frac * (f1 - f0))
    }
}

/// Lookup tables for the three device classes plus a fixed per-expert
/// launch floor on each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profiles {
    pub gpu: ComputeProfile,
    pub cpu: ComputeProfile,
    pub ndp: ComputeProfile,
    pub gpu_floor_s: f64,
    pub cpu_floor_s: f64,
    pub ndp_floor_s: f64,
}

pub const GPU_LAUNCH_FLOOR_S: f64 = 5e-6;
pub const CPU_LAUNCH_FLOOR_S: f64 = 2e-6;

impl Profiles {
    /// GPU reaches 30% of peak at 256 tokens and full peak at 1024; CPU
    /// reaches peak at 512 tokens; NDP runs flat at its peak.
    pub fn analytic(hw: &HardwareSpec) -> Self {
        // 256 / (256 + h) = 0.3
        let gpu_half = 256.0 * 0.7 / 0.3;
        Self {
            gpu: ComputeProfile::saturating(hw.gpu_peak_flops, gpu_half, 256, 1024),
            cpu: ComputeProfile::saturating(hw.cpu_peak_flops, 128.0, 256, 512),
            ndp: ComputeProfile {
                points: vec![(1, hw.ndp_peak_flops_per_dimm)],
            },
            gpu_floor_s: GPU_LAUNCH_FLOOR_S,
            cpu_floor_s: CPU_LAUNCH_FLOOR_S,
            ndp_floor_s: 0.0,
        }
    }

    /// Reads `device_class,token_count,achieved_flops` rows. Classes absent
    /// from the file keep the analytic curve for `hw`.
    pub fn from_csv<R: Read>(reader: R, hw: &HardwareSpec) -> Result<Self, CostError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut rows: [Vec<(u32, f64)>; 3] = Default::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CostError::InvalidProfile(format!("row {}: {e}", i + 1)))?;
            if rec.len() != 3 {
                return Err(CostError::InvalidProfile(format!(
                    "row {}: expected 3 fields, got {}",
                    i + 1,
                    rec.len()
                )));
            }
            if i == 0 && rec[0].eq_ignore_ascii_case("device_class") {
                continue;
            }
            let class = DeviceClass::parse(&rec[0]).ok_or_else(|| {
                CostError::InvalidProfile(format!("row {}: unknown device class {:?}", i + 1, &rec[0]))
            })?;
            let tokens: u32 = rec[1]
                .parse()
                .map_err(|e| CostError::InvalidProfile(format!("row {}: token_count: {e}", i + 1)))?;
            let flops: f64 = rec[2]
                .parse()
                .map_err(|e| CostError::InvalidProfile(format!("row {}: achieved_flops: {e}", i + 1)))?;
            let slot = match class {
                DeviceClass::Gpu => 0,
                DeviceClass::Cpu => 1,
                DeviceClass::Ndp => 2,
            };
            rows[slot].push((tokens, flops));
        }
        let mut out = Self::analytic(hw);
        let [gpu, cpu, ndp] = rows;
        let peaks = [hw.gpu_peak_flops, hw.cpu_peak_flops, hw.ndp_peak_flops_per_dimm];
        for ((pts, slot), peak) in [gpu, cpu, ndp]
            .into_iter()
            .zip([&mut out.gpu, &mut out.cpu, &mut out.ndp])
            .zip(peaks)
        {
            if pts.is_empty() {
                continue;
            }
            if let Some(&(t, f)) = pts.iter().find(|p| p.1 > peak) {
                return Err(CostError::InvalidProfile(format!(
                    "achieved flops {f} at {t} tokens exceeds device peak {peak}"
                )));
            }
            *slot = ComputeProfile::new(pts)?;
        }
        Ok(out)
    }

    pub fn profile(&self, class: DeviceClass) -> &ComputeProfile {
        match class {
            DeviceClass::Gpu => &self.gpu,
            DeviceClass::Cpu => &self.cpu,
            DeviceClass::Ndp => &self.ndp,
        }
    }

    fn floor(&self, class: DeviceClass) -> f64 {
        match class {
            DeviceClass::Gpu => self.gpu_floor_s,
            DeviceClass::Cpu => self.cpu_floor_s,
            DeviceClass::Ndp => self.ndp_floor_s,
        }
    }

    /// Seconds to run `tokens` through one expert on `class`; zero tokens cost nothing.
    pub fn compute_time(
        &self,
        class: DeviceClass,
        tokens: u32,
        model: &ModelSpec,
    ) -> Result<f64, CostError> {
        let profile = self.profile(class);
        if profile.points.is_empty() {
            return Err(CostError::EmptyProfile(class));
        }
        if tokens == 0 {
            return Ok(0.0);
        }
        let achieved = profile.achieved(tokens)?;
        Ok(self.floor(class) + tokens as f64 * model.flops_per_token_per_expert / achieved)
    }
}

/// Host DRAM read time for `bytes` under `layout`.
pub fn dram_read_time(bytes: u64, layout: Layout, hw: &HardwareSpec) -> Result<f64, CostError> {
    match layout {
        Layout::GpuResident => Err(CostError::LayoutNotReadable(layout)),
        Layout::Striped => Ok(bytes as f64 / hw.host_total_bandwidth),
        Layout::Localized(_) => Ok(bytes as f64 / hw.per_dimm_host_bandwidth),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub device: Device,
    pub compute_s: f64,
    pub pcie_s: f64,
    /// Host DRAM read for GPU/CPU paths, internal DIMM read for NDP.
    pub dram_s: f64,
    pub total_s: f64,
}

impl CostBreakdown {
    fn new(device: Device, compute_s: f64, pcie_s: f64, dram_s: f64) -> Self {
        Self {
            device,
            compute_s,
            pcie_s,
            dram_s,
            total_s: compute_s.max(pcie_s).max(dram_s),
        }
    }
}

/// Cost model bound to one model, hardware and profile set.
#[derive(Debug, Clone, Copy)]
pub struct CostModel<'a> {
    pub model: &'a ModelSpec,
    pub hw: &'a HardwareSpec,
    pub profiles: &'a Profiles,
}

impl<'a> CostModel<'a> {
    pub fn new(model: &'a ModelSpec, hw: &'a HardwareSpec, profiles: &'a Profiles) -> Self {
        Self { model, hw, profiles }
    }

    fn bytes(&self) -> u64 {
        self.model.expert_weight_bytes
    }

    pub fn compute_time(&self, class: DeviceClass, tokens: u32) -> Result<f64, CostError> {
        self.profiles.compute_time(class, tokens, self.model)
    }

    pub fn dram_read_time(&self, layout: Layout) -> Result<f64, CostError> {
        dram_read_time(self.bytes(), layout, self.hw)
    }

    pub fn pcie_time(&self) -> f64 {
        self.bytes() as f64 / self.hw.pcie_bandwidth
    }

    pub fn internal_read_time(&self) -> f64 {
        self.bytes() as f64 / self.hw.per_dimm_internal_bandwidth
    }

    /// Expert resident in HBM.
    pub fn gpu_hit(&self, tokens: u32) -> Result<CostBreakdown, CostError> {
        let c = self.compute_time(DeviceClass::Gpu, tokens)?;
        Ok(CostBreakdown::new(Device::Gpu, c, 0.0, 0.0))
    }

    /// Expert fetched from host DRAM over PCIe on demand.
    pub fn gpu_miss(&self, tokens: u32, layout: Layout) -> Result<CostBreakdown, CostError> {
        if !layout.is_host() {
            return Err(CostError::IneligibleLayout { device: Device::Gpu, layout });
        }
        let c = self.compute_time(DeviceClass::Gpu, tokens)?;
        Ok(CostBreakdown::new(Device::Gpu, c, self.pcie_time(), self.dram_read_time(layout)?))
    }

    pub fn cpu(&self, tokens: u32, layout: Layout) -> Result<CostBreakdown, CostError> {
        if !layout.is_host() {
            return Err(CostError::IneligibleLayout { device: Device::Cpu, layout });
        }
        let c = self.compute_time(DeviceClass::Cpu, tokens)?;
        Ok(CostBreakdown::new(Device::Cpu, c, 0.0, self.dram_read_time(layout)?))
    }

    /// Near-data execution on the DIMM holding a localized expert.
    pub fn ndp(&self, tokens: u32, layout: Layout) -> Result<CostBreakdown, CostError> {
        let Layout::Localized(d) = layout else {
            return Err(CostError::IneligibleLayout { device: Device::Ndp(0), layout });
        };
        let c = self.compute_time(DeviceClass::Ndp, tokens)?;
        Ok(CostBreakdown::new(Device::Ndp(d), c, 0.0, self.internal_read_time()))
    }

    /// Cost of running an expert with `layout` on `device`, choosing hit or
    /// miss for the GPU from the layout.
    pub fn cost_on(&self, device: Device, tokens: u32, layout: Layout) -> Result<CostBreakdown, CostError> {
        match device {
            Device::Gpu if layout == Layout::GpuResident => self.gpu_hit(tokens),
            Device::Gpu => self.gpu_miss(tokens, layout),
            Device::Cpu => self.cpu(tokens, layout),
            Device::Ndp(d) => match layout {
                Layout::Localized(home) if home == d => self.ndp(tokens, layout),
                _ => Err(CostError::IneligibleLayout { device, layout }),
            },
        }
    }

    /// Seconds DIMM `d` spends serving a host read of one expert with `layout`
    /// on behalf of `device`. Zero for NDP execution and for HBM hits.
    pub fn contention_on(&self, device: Device, layout: Layout, d: usize) -> f64 {
        if matches!(device, Device::Ndp(_)) {
            return 0.0;
        }
        match layout {
            Layout::GpuResident => 0.0,
            Layout::Striped => {
                let share = self.bytes() as f64 / self.hw.num_dimms as f64;
                share / self.hw.per_dimm_host_bandwidth
            }
            Layout::Localized(home) if home == d => self.bytes() as f64 / self.hw.per_dimm_host_bandwidth,
            Layout::Localized(_) => 0.0,
        }
    }

    /// Adds the contention caused by one host read to `per_dimm`, scaled by `sign`.
    pub fn add_contention(&self, device: Device, layout: Layout, sign: f64, per_dimm: &mut [f64]) {
        if matches!(device, Device::Ndp(_)) {
            return;
        }
        match layout {
            Layout::GpuResident => {}
            Layout::Striped => {
                let t = self.contention_on(device, layout, 0);
                for v in per_dimm.iter_mut() {
                    *v += sign * t;
                }
            }
            Layout::Localized(home) => {
                per_dimm[home] += sign * self.contention_on(device, layout, home);
            }
        }
    }

    /// Per-DIMM time spent serving weight reads for GPU-miss and CPU experts.
    pub fn contention_time<I>(&self, placed: I) -> Vec<f64>
    where
        I: IntoIterator<Item = (Device, Layout)>,
    {
        let mut out = vec![0.0; self.hw.num_dimms];
        for (device, layout) in placed {
            self.add_contention(device, layout, 1.0, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn setup() -> (ModelSpec, HardwareSpec, Profiles) {
        let m = ModelSpec::deepseek_v2();
        let hw = HardwareSpec::reference_for(&m);
        let p = Profiles::analytic(&hw);
        (m, hw, p)
    }

    #[test]
    fn zero_tokens_zero_compute() {
        let (m, hw, p) = setup();
        let cm = CostModel::new(&m, &hw, &p);
        for c in [DeviceClass::Gpu, DeviceClass::Cpu, DeviceClass::Ndp] {
            assert_eq!(cm.compute_time(c, 0).unwrap(), 0.0);
        }
    }

    #[test]
    fn gpu_anchor_thirty_percent_at_256() {
        let (_, hw, p) = setup();
        assert_relative_eq!(p.gpu.achieved(256).unwrap(), 0.3 * hw.gpu_peak_flops, max_relative = 1e-12);
        assert_relative_eq!(p.gpu.achieved(4096).unwrap(), hw.gpu_peak_flops);
        assert_relative_eq!(p.cpu.achieved(512).unwrap(), hw.cpu_peak_flops);
        assert_relative_eq!(p.cpu.achieved(100_000).unwrap(), hw.cpu_peak_flops);
    }

    #[test]
    fn ndp_32_tokens() {
        let (m, hw, p) = setup();
        let cm = CostModel::new(&m, &hw, &p);
        // 32 * 47_185_920 / 256e9
        assert_relative_eq!(cm.compute_time(DeviceClass::Ndp, 32).unwrap(), 5.89824e-3, max_relative = 1e-12);
    }

    #[test]
    fn dram_reads() {
        let (_, hw, _) = setup();
        assert_relative_eq!(dram_read_time(47_185_920, Layout::Striped, &hw).unwrap(), 1.536e-4, max_relative = 1e-12);
        assert_relative_eq!(
            dram_read_time(47_185_920, Layout::Localized(3), &hw).unwrap(),
            2.4576e-3,
            max_relative = 1e-12
        );
        assert_eq!(dram_read_time(0, Layout::Striped, &hw).unwrap(), 0.0);
        assert_eq!(
            dram_read_time(1, Layout::GpuResident, &hw),
            Err(CostError::LayoutNotReadable(Layout::GpuResident))
        );
    }

    #[test]
    fn path_examples() {
        let (m, hw, p) = setup();
        let cm = CostModel::new(&m, &hw, &p);
        let miss = cm.gpu_miss(1, Layout::Striped).unwrap();
        assert_relative_eq!(miss.total_s, 7.3728e-4, max_relative = 1e-12);
        assert_eq!(miss.total_s, miss.pcie_s);
        let ndp = cm.ndp(1, Layout::Localized(0)).unwrap();
        assert_relative_eq!(ndp.total_s, 3.072e-4, max_relative = 1e-12);
        assert_eq!(ndp.device, Device::Ndp(0));
        assert!(matches!(cm.ndp(1, Layout::Striped), Err(CostError::IneligibleLayout { .. })));
        assert!(matches!(cm.cpu(1, Layout::GpuResident), Err(CostError::IneligibleLayout { .. })));
        assert!(matches!(
            cm.cost_on(Device::Ndp(1), 1, Layout::Localized(0)),
            Err(CostError::IneligibleLayout { .. })
        ));
    }

    #[test]
    fn contention_vectors() {
        let (m, hw, p) = setup();
        let cm = CostModel::new(&m, &hw, &p);
        assert_eq!(cm.contention_time([]), vec![0.0; 16]);
        let v = cm.contention_time([(Device::Cpu, Layout::Localized(3))]);
        for (d, x) in v.iter().enumerate() {
            if d == 3 {
                assert_relative_eq!(*x, cm.dram_read_time(Layout::Localized(3)).unwrap());
            } else {
                assert_eq!(*x, 0.0);
            }
        }
        let v = cm.contention_time([(Device::Gpu, Layout::Striped)]);
        let expect = (47_185_920.0 / 16.0) / (307.2e9 / 16.0);
        for x in v {
            assert_relative_eq!(x, expect, max_relative = 1e-12);
        }
        // NDP execution and HBM hits read nothing from the host.
        let v = cm.contention_time([(Device::Ndp(2), Layout::Localized(2)), (Device::Gpu, Layout::GpuResident)]);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn csv_profiles() {
        let (_, hw, _) = setup();
        let text = "device_class,token_count,achieved_flops\ncpu,1,1e12\ncpu,64,2e13\n";
        let p = Profiles::from_csv(text.as_bytes(), &hw).unwrap();
        assert_eq!(p.cpu.points(), &[(1, 1e12), (64, 2e13)]);
        assert_eq!(p.gpu, Profiles::analytic(&hw).gpu);
        assert_relative_eq!(p.cpu.achieved(32).unwrap(), 1e12 + (31.0 / 63.0) * 1.9e13);

        let bad = "cpu,64,2e13\ncpu,1,1e12\n";
        assert!(Profiles::from_csv(bad.as_bytes(), &hw).is_err());
        let over = "ndp,1,1e15\n";
        assert!(Profiles::from_csv(over.as_bytes(), &hw).is_err());
        let decreasing = "gpu,1,2e12\ngpu,2,1e12\n";
        assert!(Profiles::from_csv(decreasing.as_bytes(), &hw).is_err());
    }

    #[test]
    fn empty_profile_errors() {
        let (m, hw, mut p) = setup();
        p.cpu = ComputeProfile { points: vec![] };
        let cm = CostModel::new(&m, &hw, &p);
        assert_eq!(cm.compute_time(DeviceClass::Cpu, 3), Err(CostError::EmptyProfile(DeviceClass::Cpu)));
    }
}
