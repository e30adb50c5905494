//! Deterministic event-driven model of warps on SMs moving tiles from global
//! to shared memory and computing on them.
//!
//! Timing rules, all in integer cycles:
//! - Every SM has one issue port. Issuing a synchronous load, an async copy,
//!   a store, or a slice of compute occupies the port and the issuing warp.
//! - Global traffic goes through one device-wide FCFS queue that streams at
//!   `global_bandwidth` bytes per cycle. A transfer completes
//!   `global_latency` cycles after it leaves the queue.
//! - A synchronous load stalls its warp until completion; an async copy does
//!   not, and is instead awaited by a later `Wait` step.
//! - Async copies of one block stage (one tile) share a DMA channel; an SM
//!   has `async_channels_per_sm` of them.
//! - Ready warps on an SM issue round-robin by warp slot.

mod engine;
mod queue;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::Workload;
use crate::roofline::Roofline;

/// Simulator calibration surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineParams {
    /// GHz
    pub clock: f64,
    pub sm_count: u32,
    pub max_warps_per_sm: u32,
    pub max_blocks_per_sm: u32,
    /// bytes
    pub shared_mem_per_sm: u64,
    /// cycles
    pub global_latency: u64,
    /// bytes per cycle, device-wide
    pub global_bandwidth: f64,
    pub async_channels_per_sm: u32,
    /// cycles
    pub async_issue_cost: u64,
    /// cycles
    pub sync_issue_cost: u64,
    /// FLOPs the SM issue port retires per cycle of compute.
    pub flops_per_cycle_per_warp: u64,
    /// threads
    pub warp_width: u32,
    /// Extra cycles before a block-scoped arrive/wait barrier observes
    /// completion of its stage.
    #[serde(default)]
    pub barrier_wait_latency: u64,
}

const KIB: u64 = 1024;

impl MachineParams {
    /// A100-shaped profile: 108 SMs at 1.41 GHz, 1555 GB/s, 19.5 TFLOP/s fp32.
    pub fn a100_like() -> Self {
        MachineParams {
            clock: 1.41,
            sm_count: 108,
            max_warps_per_sm: 64,
            max_blocks_per_sm: 32,
            shared_mem_per_sm: 164 * KIB,
            global_latency: 400,
            global_bandwidth: 1555.0 / 1.41,
            async_channels_per_sm: 4,
            async_issue_cost: 1,
            sync_issue_cost: 4,
            flops_per_cycle_per_warp: 128,
            warp_width: 32,
            barrier_wait_latency: 64,
        }
    }

    /// V100-shaped profile: 80 SMs at 1.38 GHz, 897 GB/s, 14.1 TFLOP/s fp32.
    pub fn v100_like() -> Self {
        MachineParams {
            clock: 1.38,
            sm_count: 80,
            max_warps_per_sm: 64,
            max_blocks_per_sm: 32,
            shared_mem_per_sm: 96 * KIB,
            global_latency: 400,
            global_bandwidth: 897.0 / 1.38,
            async_channels_per_sm: 4,
            async_issue_cost: 1,
            sync_issue_cost: 4,
            flops_per_cycle_per_warp: 128,
            warp_width: 32,
            barrier_wait_latency: 64,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "a100-like" => Some(Self::a100_like()),
            "v100-like" => Some(Self::v100_like()),
            _ => None,
        }
    }

    /// A builtin profile name or a JSON file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Some(m) = Self::builtin(spec) {
            return Ok(m);
        }
        let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MachineParams = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let positive_ints = [
            ("sm_count", u64::from(self.sm_count)),
            ("max_warps_per_sm", u64::from(self.max_warps_per_sm)),
            ("max_blocks_per_sm", u64::from(self.max_blocks_per_sm)),
            ("shared_mem_per_sm", self.shared_mem_per_sm),
            ("global_latency", self.global_latency),
            ("async_channels_per_sm", u64::from(self.async_channels_per_sm)),
            ("async_issue_cost", self.async_issue_cost),
            ("sync_issue_cost", self.sync_issue_cost),
            ("flops_per_cycle_per_warp", self.flops_per_cycle_per_warp),
            ("warp_width", u64::from(self.warp_width)),
        ];
        for (field, v) in positive_ints {
            if v == 0 {
                return Err(Error::invalid("machine params", format!("{field} must be positive")));
            }
        }
        for (field, v) in [("clock", self.clock), ("global_bandwidth", self.global_bandwidth)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("machine params", format!("{field} must be positive")));
            }
        }
        if self.async_issue_cost > self.global_latency {
            return Err(Error::invalid(
                "machine params",
                "async_issue_cost must not exceed global_latency",
            ));
        }
        Ok(())
    }

    /// Device compute peak in GFLOP/s: one issue port per SM.
    pub fn peak_gflops(&self) -> f64 {
        f64::from(self.sm_count) * self.flops_per_cycle_per_warp as f64 * self.clock
    }

    /// Device bandwidth in GB/s.
    pub fn bandwidth_gbs(&self) -> f64 {
        self.global_bandwidth * self.clock
    }

    pub fn roofline(&self) -> Roofline {
        Roofline {
            peak: self.peak_gflops(),
            bandwidth: self.bandwidth_gbs(),
        }
    }
}

/// Launch shape. `dynamic_shared` overrides the per-block shared allocation
/// (it must cover what the workload's buffers need).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub blocks: usize,
    pub threads_per_block: usize,
    #[serde(default)]
    pub dynamic_shared: Option<u64>,
}

impl Grid {
    pub fn new(blocks: usize, threads_per_block: usize) -> Self {
        Grid {
            blocks,
            threads_per_block,
            dynamic_shared: None,
        }
    }

    pub fn with_dynamic_shared(mut self, bytes: u64) -> Self {
        self.dynamic_shared = Some(bytes);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CopyKind {
    Sync,
    Async,
    /// Posted store of results back to global memory.
    WriteBack,
}

/// One global-memory transfer as accounted by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyRequest {
    pub block_id: usize,
    pub buffer_index: usize,
    pub size: u64,
    pub issue_cycle: u64,
    pub complete_cycle: u64,
    pub kind: CopyKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub elapsed: u64,
    pub bytes_moved: u64,
    pub flops: u64,
    pub achieved_gflops: f64,
    pub achieved_bw: f64,
    pub blocks_resident_per_sm: u32,
}

impl SimResult {
    fn new(elapsed: u64, bytes_moved: u64, flops: u64, clock: f64, resident: u32) -> Self {
        let (achieved_gflops, achieved_bw) = if elapsed == 0 {
            (0.0, 0.0)
        } else {
            (
                flops as f64 * clock / elapsed as f64,
                bytes_moved as f64 * clock / elapsed as f64,
            )
        };
        SimResult {
            elapsed,
            bytes_moved,
            flops,
            achieved_gflops,
            achieved_bw,
            blocks_resident_per_sm: resident,
        }
    }

    /// FLOPs per byte of traffic actually moved.
    pub fn intensity(&self) -> f64 {
        if self.bytes_moved == 0 {
            0.0
        } else {
            self.flops as f64 / self.bytes_moved as f64
        }
    }
}

/// Blocks that fit on one SM given shared-memory, warp and block caps.
pub fn occupancy(machine: &MachineParams, shared_per_block: u64, threads_per_block: usize) -> Result<u32> {
    let ww = machine.warp_width as usize;
    if threads_per_block == 0 || !threads_per_block.is_multiple_of(ww) {
        return Err(Error::invalid(
            "grid",
            format!("threads_per_block={threads_per_block} must be a positive multiple of {ww}"),
        ));
    }
    if shared_per_block > machine.shared_mem_per_sm {
        return Err(Error::Unschedulable(format!(
            "block needs {shared_per_block} B shared memory, SM has {}",
            machine.shared_mem_per_sm
        )));
    }
    let by_warps = (machine.max_warps_per_sm as usize * ww / threads_per_block) as u64;
    if by_warps == 0 {
        return Err(Error::Unschedulable(format!(
            "{threads_per_block} threads exceed {} warps per SM",
            machine.max_warps_per_sm
        )));
    }
    let by_shared = machine
        .shared_mem_per_sm
        .checked_div(shared_per_block)
        .unwrap_or(u64::MAX);
    Ok(u64::from(machine.max_blocks_per_sm).min(by_shared).min(by_warps) as u32)
}

/// Simulates one launch with jitter seeded from 0.
pub fn simulate(workload: &Workload, machine: &MachineParams, grid: Grid) -> Result<SimResult> {
    simulate_seeded(workload, machine, grid, 0)
}

pub fn simulate_seeded(workload: &Workload, machine: &MachineParams, grid: Grid, seed: u64) -> Result<SimResult> {
    engine::Engine::new(workload, machine, grid, seed, false)?.run().map(|(r, _)| r)
}

/// Like [`simulate`], also returning every transfer the engine performed.
pub fn simulate_traced(
    workload: &Workload,
    machine: &MachineParams,
    grid: Grid,
) -> Result<(SimResult, Vec<CopyRequest>)> {
    engine::Engine::new(workload, machine, grid, 0, true)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
}

impl Summary {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { mean: 0.0, stddev: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stddev = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary { mean, stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedRun {
    pub runs: Vec<SimResult>,
    /// Over elapsed cycles of the recorded runs.
    pub summary: Summary,
}

/// Runs `warmup` unrecorded launches followed by `repeats` recorded ones.
/// Run `i` (counting warm-ups) is seeded with `seed + i`.
pub fn run_repeated(
    workload: &Workload,
    machine: &MachineParams,
    grid: Grid,
    repeats: usize,
    warmup: usize,
    seed: u64,
) -> Result<RepeatedRun> {
    if repeats == 0 {
        return Err(Error::invalid("repeats", "at least one recorded run is required"));
    }
    let mut runs = Vec::with_capacity(repeats);
    for i in 0..warmup + repeats {
        let r = simulate_seeded(workload, machine, grid, seed.wrapping_add(i as u64))?;
        if i >= warmup {
            runs.push(r);
        }
    }
    let elapsed: Vec<f64> = runs.iter().map(|r| r.elapsed as f64).collect();
    Ok(RepeatedRun {
        summary: Summary::of(&elapsed),
        runs,
    })
}
