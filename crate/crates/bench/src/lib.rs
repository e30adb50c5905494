//! Shared inputs for the benchmarks.

use asyncsim::microbench::SweepConfig;
use asyncsim::patterns::{build_overlap, build_sync_baseline};
use asyncsim::{Grid, MachineParams, WaitKind, Workload};

/// 4 MiB of fp32 in 256-element tiles.
pub const ELEMENTS: usize = 1 << 20;
pub const TILE: usize = 256;

pub fn machine() -> MachineParams {
    MachineParams::a100_like()
}

pub fn grid() -> Grid {
    Grid::new(216, 256)
}

pub fn sync_workload(iterations: u32) -> Workload {
    build_sync_baseline(ELEMENTS / TILE, TILE, iterations).expect("valid shape")
}

pub fn overlap_workload(iterations: u32, wait: WaitKind) -> Workload {
    build_overlap(ELEMENTS / TILE, TILE, iterations, 2, wait).expect("valid shape")
}

/// A small sweep: two intensities, all four patterns, both wait kinds.
pub fn small_sweep() -> SweepConfig {
    SweepConfig::from_json(
        r#"{"total_bytes": 4194304, "iterations_list": [1, 64], "tile_elements_list": [256],
            "blocks_list": [216], "threads_per_block_list": [256], "inflight_list": [2],
            "wait_kinds": ["barrier", "pipeline"],
            "patterns": ["sync_baseline", "register_bypass", "overlap", "drop_off"]}"#,
    )
    .expect("valid sweep")
}
