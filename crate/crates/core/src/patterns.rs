//! Global→shared data-movement patterns.
//!
//! Each pattern is lowered to a block-level [`Step`] schedule. The same
//! schedule drives both the functional emulator here and the timing
//! simulator in [`crate::sim`], so the two can never disagree about what a
//! pattern does.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTES_PER_ELEMENT: u64 = 4;

/// FLOPs per element per iteration of `x ↦ ½x + ½` (one multiply, one add).
pub const FLOPS_PER_ELEMENT_ITERATION: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    SyncBaseline,
    RegisterBypass,
    Overlap,
    DropOff,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] = [
        PatternKind::SyncBaseline,
        PatternKind::RegisterBypass,
        PatternKind::Overlap,
        PatternKind::DropOff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::SyncBaseline => "sync_baseline",
            PatternKind::RegisterBypass => "register_bypass",
            PatternKind::Overlap => "overlap",
            PatternKind::DropOff => "drop_off",
        }
    }

    pub fn is_async(self) -> bool {
        self != PatternKind::SyncBaseline
    }

    /// Patterns whose wait discipline is a sweep coordinate.
    pub fn takes_wait_kind(self) -> bool {
        matches!(self, PatternKind::RegisterBypass | PatternKind::Overlap)
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatternKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid("pattern", format!("unknown pattern `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitKind {
    /// Block-scoped arrive/wait barrier: released once every warp's share of
    /// the stage has landed.
    Barrier,
    /// Per-warp pipeline wait on the warp's own share.
    Pipeline,
}

impl WaitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WaitKind::Barrier => "barrier",
            WaitKind::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for WaitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WaitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "barrier" => Ok(WaitKind::Barrier),
            "pipeline" => Ok(WaitKind::Pipeline),
            other => Err(Error::invalid("wait kind", format!("unknown wait kind `{other}`"))),
        }
    }
}

/// One step of a block-level schedule. Tile indices are 0-based positions in
/// the sequence the block (or, for Drop Off, the thread) processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Step {
    /// Global → register → shared; the issuing warp stalls until data arrives.
    LoadSync { tile: usize, buffer: usize },
    /// Non-blocking global → shared copy.
    CopyAsync { tile: usize, buffer: usize },
    /// Wait for the async copy of `tile`.
    Wait { tile: usize },
    /// Block-wide barrier.
    BlockSync,
    /// Move a shared-memory element into a register, freeing the buffer.
    ReadShared { tile: usize, buffer: usize },
    /// Apply the map `iterations` times; reads (and frees) `buffer` when
    /// given, otherwise works on registers.
    Compute { tile: usize, buffer: Option<usize> },
    /// Write results back to global memory.
    Store { tile: usize },
}

/// A pattern program: the tile stream, per-tile work and wait discipline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub n_tiles: usize,
    /// fp32 elements per tile (1 for Drop Off, where a "tile" is one element).
    pub tile_elements: usize,
    pub iterations: u32,
    pub pattern: PatternKind,
    /// Copies in flight; only meaningful for Overlap.
    pub inflight_k: usize,
    pub shared_buffers: usize,
    pub wait_kind: Option<WaitKind>,
    /// Emit a `Store` per tile.
    #[serde(default = "default_true")]
    pub write_back: bool,
    /// Uniform extra latency in `0..=jitter_cycles` drawn per copy from a
    /// seeded generator. Zero disables it.
    #[serde(default)]
    pub jitter_cycles: u32,
}

fn default_true() -> bool {
    true
}

fn check_positive(what: &'static str, tile_elements: usize) -> Result<()> {
    if tile_elements == 0 {
        return Err(Error::invalid(what, "tile_elements must be positive"));
    }
    Ok(())
}

/// Synchronous baseline: load → block sync → compute, one buffer.
pub fn build_sync_baseline(n_tiles: usize, tile_elements: usize, iterations: u32) -> Result<Workload> {
    check_positive("sync baseline", tile_elements)?;
    Ok(Workload {
        n_tiles,
        tile_elements,
        iterations,
        pattern: PatternKind::SyncBaseline,
        inflight_k: 1,
        shared_buffers: 1,
        wait_kind: None,
        write_back: true,
        jitter_cycles: 0,
    })
}

/// Async copy → wait → block sync → compute, one buffer, no overlap.
pub fn build_register_bypass(n_tiles: usize, tile_elements: usize, iterations: u32) -> Result<Workload> {
    check_positive("register bypass", tile_elements)?;
    Ok(Workload {
        n_tiles,
        tile_elements,
        iterations,
        pattern: PatternKind::RegisterBypass,
        inflight_k: 1,
        shared_buffers: 1,
        wait_kind: Some(WaitKind::Pipeline),
        write_back: true,
        jitter_cycles: 0,
    })
}

/// k-deep circular buffering; tile `j` always lands in buffer `j mod k`.
pub fn build_overlap(
    n_tiles: usize,
    tile_elements: usize,
    iterations: u32,
    k: usize,
    wait_kind: WaitKind,
) -> Result<Workload> {
    check_positive("overlap", tile_elements)?;
    if k < 2 || k > n_tiles {
        return Err(Error::invalid(
            "overlap",
            format!("in-flight depth k={k} must satisfy 2 <= k <= n_tiles={n_tiles}"),
        ));
    }
    Ok(Workload {
        n_tiles,
        tile_elements,
        iterations,
        pattern: PatternKind::Overlap,
        inflight_k: k,
        shared_buffers: k,
        wait_kind: Some(wait_kind),
        write_back: true,
        jitter_cycles: 0,
    })
}

/// Per-thread element stream with no block-wide synchronization.
pub fn build_drop_off(n_elements: usize, iterations: u32) -> Result<Workload> {
    if n_elements == 0 {
        return Err(Error::invalid("drop off", "n_elements must be positive"));
    }
    Ok(Workload {
        n_tiles: n_elements,
        tile_elements: 1,
        iterations,
        pattern: PatternKind::DropOff,
        inflight_k: 1,
        shared_buffers: 1,
        wait_kind: Some(WaitKind::Pipeline),
        write_back: true,
        jitter_cycles: 0,
    })
}

impl Workload {
    pub fn with_wait_kind(mut self, wait_kind: WaitKind) -> Self {
        if self.pattern.is_async() {
            self.wait_kind = Some(wait_kind);
        }
        self
    }

    pub fn without_write_back(mut self) -> Self {
        self.write_back = false;
        self
    }

    pub fn with_jitter(mut self, cycles: u32) -> Self {
        self.jitter_cycles = cycles;
        self
    }

    pub fn total_elements(&self) -> usize {
        self.n_tiles * self.tile_elements
    }

    /// Bytes carried by global→shared copies.
    pub fn copy_bytes(&self) -> u64 {
        self.total_elements() as u64 * BYTES_PER_ELEMENT
    }

    pub fn flops(&self) -> u64 {
        self.total_elements() as u64 * u64::from(self.iterations) * FLOPS_PER_ELEMENT_ITERATION
    }

    /// Shared memory one block needs. Drop Off holds one element per thread.
    pub fn shared_bytes(&self, threads_per_block: usize) -> u64 {
        match self.pattern {
            PatternKind::DropOff => threads_per_block as u64 * BYTES_PER_ELEMENT,
            _ => (self.shared_buffers * self.tile_elements) as u64 * BYTES_PER_ELEMENT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("workload", reason));
        if self.tile_elements == 0 {
            return bad("tile_elements must be positive".into());
        }
        if self.shared_buffers == 0 {
            return bad("shared_buffers must be at least 1".into());
        }
        match self.pattern {
            PatternKind::SyncBaseline if self.wait_kind.is_some() => {
                return bad("sync baseline takes no wait kind".into())
            }
            PatternKind::RegisterBypass | PatternKind::Overlap | PatternKind::DropOff
                if self.wait_kind.is_none() =>
            {
                return bad(format!("{} needs a wait kind", self.pattern))
            }
            PatternKind::Overlap if self.inflight_k < 2 || self.inflight_k > self.n_tiles => {
                return bad(format!(
                    "overlap depth k={} must satisfy 2 <= k <= n_tiles={}",
                    self.inflight_k, self.n_tiles
                ))
            }
            PatternKind::DropOff if self.tile_elements != 1 => {
                return bad("drop off streams single elements (tile_elements = 1)".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// The schedule for the whole workload as one block would run it.
    pub fn schedule(&self) -> Vec<Step> {
        block_schedule(self.pattern, self.n_tiles, self.inflight_k, self.write_back)
    }

    pub fn dump(&self) -> ScheduleDump {
        ScheduleDump {
            workload: self.clone(),
            steps: self.schedule(),
        }
    }
}

/// Schedule for a block processing `n` tiles. For Overlap the prologue depth
/// is clamped to `n`, which matters when the simulator hands a block fewer
/// tiles than the configured depth.
pub fn block_schedule(pattern: PatternKind, n: usize, k: usize, write_back: bool) -> Vec<Step> {
    let mut steps = Vec::with_capacity(n * 6);
    let store = |steps: &mut Vec<Step>, tile| {
        if write_back {
            steps.push(Step::Store { tile });
        }
    };
    match pattern {
        PatternKind::SyncBaseline => {
            for tile in 0..n {
                steps.push(Step::LoadSync { tile, buffer: 0 });
                steps.push(Step::BlockSync);
                steps.push(Step::Compute { tile, buffer: Some(0) });
                store(&mut steps, tile);
            }
        }
        PatternKind::RegisterBypass => {
            for tile in 0..n {
                steps.push(Step::CopyAsync { tile, buffer: 0 });
                steps.push(Step::Wait { tile });
                steps.push(Step::BlockSync);
                steps.push(Step::Compute { tile, buffer: Some(0) });
                store(&mut steps, tile);
            }
        }
        PatternKind::Overlap => {
            let depth = k.min(n);
            for tile in 0..depth {
                steps.push(Step::CopyAsync { tile, buffer: tile % k });
            }
            for tile in 0..n {
                let buffer = tile % k;
                steps.push(Step::Wait { tile });
                steps.push(Step::BlockSync);
                steps.push(Step::Compute { tile, buffer: Some(buffer) });
                // The buffer is free only once its tile has been consumed.
                if tile + k < n {
                    steps.push(Step::CopyAsync { tile: tile + k, buffer });
                }
                store(&mut steps, tile);
            }
        }
        PatternKind::DropOff => {
            if n > 0 {
                steps.push(Step::CopyAsync { tile: 0, buffer: 0 });
            }
            for tile in 0..n {
                steps.push(Step::Wait { tile });
                steps.push(Step::ReadShared { tile, buffer: 0 });
                if tile + 1 < n {
                    steps.push(Step::CopyAsync { tile: tile + 1, buffer: 0 });
                }
                steps.push(Step::Compute { tile, buffer: None });
                store(&mut steps, tile);
            }
        }
    }
    steps
}

/// JSON listing of a workload and its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDump {
    pub workload: Workload,
    pub steps: Vec<Step>,
}

impl ScheduleDump {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BufferState {
    Empty,
    /// Holding `tile`; `ready` once the copy is known complete.
    Holding { tile: usize, ready: bool },
}

/// Statically checks a schedule: every buffer index is in range, no copy
/// lands in a buffer whose tile has not been consumed, every tile is copied,
/// waited on (if async), consumed and computed exactly once, in order.
pub fn check_schedule(steps: &[Step], n_tiles: usize, shared_buffers: usize) -> Result<()> {
    let err = |i: usize, msg: String| Err(Error::Structural(format!("step {i}: {msg}")));
    let mut buffers = vec![BufferState::Empty; shared_buffers];
    let mut copied = vec![false; n_tiles];
    let mut computed = vec![false; n_tiles];
    let mut in_register: Option<usize> = None;
    let mut next_compute = 0usize;

    for (i, step) in steps.iter().enumerate() {
        match *step {
            Step::LoadSync { tile, buffer } | Step::CopyAsync { tile, buffer } => {
                if buffer >= shared_buffers {
                    return err(i, format!("buffer {buffer} exceeds {shared_buffers} declared"));
                }
                if tile >= n_tiles || copied[tile] {
                    return err(i, format!("tile {tile} copied twice or out of range"));
                }
                if let BufferState::Holding { tile: held, .. } = buffers[buffer] {
                    return err(i, format!("buffer {buffer} still holds unconsumed tile {held}"));
                }
                copied[tile] = true;
                buffers[buffer] = BufferState::Holding {
                    tile,
                    ready: matches!(step, Step::LoadSync { .. }),
                };
            }
            Step::Wait { tile } => {
                let slot = buffers
                    .iter_mut()
                    .find(|b| matches!(b, BufferState::Holding { tile: t, .. } if *t == tile));
                match slot {
                    Some(BufferState::Holding { ready, .. }) => *ready = true,
                    _ => return err(i, format!("wait on tile {tile} that is not in flight")),
                }
            }
            Step::BlockSync => {}
            Step::ReadShared { tile, buffer } => {
                if buffer >= shared_buffers {
                    return err(i, format!("buffer {buffer} exceeds {shared_buffers} declared"));
                }
                if buffers[buffer] != (BufferState::Holding { tile, ready: true }) {
                    return err(i, format!("read of tile {tile} from buffer {buffer} before it is ready"));
                }
                buffers[buffer] = BufferState::Empty;
                in_register = Some(tile);
            }
            Step::Compute { tile, buffer } => {
                if tile != next_compute {
                    return err(i, format!("compute of tile {tile} out of order"));
                }
                match buffer {
                    Some(b) => {
                        if b >= shared_buffers {
                            return err(i, format!("buffer {b} exceeds {shared_buffers} declared"));
                        }
                        if buffers[b] != (BufferState::Holding { tile, ready: true }) {
                            return err(i, format!("compute on tile {tile} in buffer {b} before it is ready"));
                        }
                        buffers[b] = BufferState::Empty;
                    }
                    None => {
                        if in_register != Some(tile) {
                            return err(i, format!("compute on tile {tile} which is not in registers"));
                        }
                    }
                }
                computed[tile] = true;
                next_compute += 1;
            }
            Step::Store { tile } => {
                if tile >= n_tiles || !computed[tile] {
                    return err(i, format!("store of tile {tile} before compute"));
                }
            }
        }
    }
    if next_compute != n_tiles {
        return Err(Error::Structural(format!(
            "only {next_compute} of {n_tiles} tiles computed"
        )));
    }
    Ok(())
}

/// One application of `x ↦ ½x + ½`.
#[inline]
pub fn half_step(x: f32) -> f32 {
    0.5f32 * x + 0.5f32
}

fn apply_map(values: &mut [f32], iterations: u32) {
    for v in values.iter_mut() {
        for _ in 0..iterations {
            *v = half_step(*v);
        }
    }
}

/// Runs the workload's schedule over `input`, returning what the compute
/// steps produce, in element order.
pub fn emulate(workload: &Workload, input: &[f32]) -> Result<Vec<f32>> {
    workload.validate()?;
    if input.len() != workload.total_elements() {
        return Err(Error::invalid(
            "emulate input",
            format!(
                "length {} does not match {} tiles x {} elements",
                input.len(),
                workload.n_tiles,
                workload.tile_elements
            ),
        ));
    }
    let te = workload.tile_elements;
    let steps = workload.schedule();
    check_schedule(&steps, workload.n_tiles, workload.shared_buffers)?;

    let mut buffers: Vec<Vec<f32>> = vec![vec![0.0; te]; workload.shared_buffers];
    let mut registers: Vec<f32> = vec![0.0; te];
    let mut output = vec![0.0f32; input.len()];
    for step in steps {
        match step {
            Step::LoadSync { tile, buffer } | Step::CopyAsync { tile, buffer } => {
                buffers[buffer].copy_from_slice(&input[tile * te..(tile + 1) * te]);
            }
            Step::ReadShared { buffer, .. } => registers.copy_from_slice(&buffers[buffer]),
            Step::Compute { tile, buffer } => {
                if let Some(b) = buffer {
                    registers.copy_from_slice(&buffers[b]);
                }
                apply_map(&mut registers, workload.iterations);
                output[tile * te..(tile + 1) * te].copy_from_slice(&registers);
            }
            Step::Wait { .. } | Step::BlockSync | Step::Store { .. } => {}
        }
    }
    Ok(output)
}
