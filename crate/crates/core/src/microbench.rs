//! Parameter sweeps over the simulated microbenchmark: an element-wise
//! `x ↦ ½x + ½` kernel whose arithmetic intensity is set by the iteration
//! count, run for every pattern over a grid of tile, grid-shape, depth, wait
//! and occupancy coordinates.
//!
//! The hardware protocol clears caches between kernels. No cache is
//! modeled, so that step is a no-op here.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::{
    build_drop_off, build_overlap, build_register_bypass, build_sync_baseline, PatternKind, WaitKind,
    Workload, BYTES_PER_ELEMENT, FLOPS_PER_ELEMENT_ITERATION,
};
use crate::sim::{run_repeated, Grid, MachineParams};

/// Default sweep size; keeps a full acceptance sweep under a minute.
pub const DESK_TOTAL_BYTES: u64 = 64 << 20;
/// Full-scale runs, selectable through `total_bytes`.
pub const FULL_TOTAL_BYTES: u64 = 8 << 30;

pub const SWEEP_CSV_HEADER: &str =
    "pattern,wait,iterations,ai,tile_elems,blocks,threads,inflight,occupancy,elapsed_cycles,gflops,gbs,speedup,error";

/// Traffic per element: one 4-byte read plus one 4-byte write-back.
const TRAFFIC_BYTES_PER_ELEMENT: u64 = 2 * BYTES_PER_ELEMENT;

pub fn arithmetic_intensity(iterations: u32) -> f64 {
    (FLOPS_PER_ELEMENT_ITERATION * u64::from(iterations)) as f64 / TRAFFIC_BYTES_PER_ELEMENT as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyMode {
    /// Blocks allocate only what their pattern needs.
    Full,
    /// Every block claims the SM's whole shared memory: one block per SM.
    Starved,
}

impl fmt::Display for OccupancyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OccupancyMode::Full => "full",
            OccupancyMode::Starved => "starved",
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

fn one_or_many<'de, D, T>(de: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn default_total_bytes() -> u64 {
    DESK_TOTAL_BYTES
}

fn default_occupancy() -> Vec<OccupancyMode> {
    vec![OccupancyMode::Full]
}

fn default_repeats() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_total_bytes")]
    pub total_bytes: u64,
    pub iterations_list: Vec<u32>,
    pub tile_elements_list: Vec<usize>,
    pub blocks_list: Vec<usize>,
    pub threads_per_block_list: Vec<usize>,
    pub inflight_list: Vec<usize>,
    pub wait_kinds: Vec<WaitKind>,
    pub patterns: Vec<PatternKind>,
    /// A single mode or a list of modes.
    #[serde(default = "default_occupancy", deserialize_with = "one_or_many")]
    pub occupancy_mode: Vec<OccupancyMode>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("sweep config", reason));
        if self.total_bytes == 0 || !self.total_bytes.is_multiple_of(BYTES_PER_ELEMENT) {
            return bad(format!("total_bytes={} must be a positive multiple of 4", self.total_bytes));
        }
        let lists = [
            ("iterations_list", self.iterations_list.is_empty()),
            ("tile_elements_list", self.tile_elements_list.is_empty()),
            ("blocks_list", self.blocks_list.is_empty()),
            ("threads_per_block_list", self.threads_per_block_list.is_empty()),
            ("inflight_list", self.inflight_list.is_empty()),
            ("patterns", self.patterns.is_empty()),
            ("occupancy_mode", self.occupancy_mode.is_empty()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, empty)| *empty) {
            return bad(format!("{name} must not be empty"));
        }
        if self.wait_kinds.is_empty() && self.patterns.iter().any(|p| p.takes_wait_kind()) {
            return bad("wait_kinds must not be empty when an async pattern is swept".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        Ok(())
    }

    pub fn n_elements(&self) -> u64 {
        self.total_bytes / BYTES_PER_ELEMENT
    }
}

/// Grid coordinates shared by every pattern at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Coordinate {
    pub iterations: u32,
    pub tile_elements: usize,
    pub blocks: usize,
    pub threads: usize,
    pub inflight: usize,
    pub occupancy: OccupancyMode,
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iterations={} tile_elems={} blocks={} threads={} inflight={} occupancy={}",
            self.iterations, self.tile_elements, self.blocks, self.threads, self.inflight, self.occupancy
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub pattern: PatternKind,
    pub wait: Option<WaitKind>,
    pub coord: Coordinate,
    pub ai: f64,
    /// Mean over recorded repeats; `None` on error rows.
    pub elapsed_cycles: Option<f64>,
    pub gflops: Option<f64>,
    pub gbs: Option<f64>,
    pub speedup: Option<f64>,
    pub error: Option<String>,
}

/// Raises the block's shared allocation to the whole SM so only one block
/// fits per SM.
pub fn starve_occupancy(workload: &Workload, grid: Grid, machine: &MachineParams) -> Result<Grid> {
    let need = workload.shared_bytes(grid.threads_per_block);
    if need > machine.shared_mem_per_sm {
        return Err(Error::Unschedulable(format!(
            "{} needs {need} B of shared memory per block, the SM has {}",
            workload.pattern, machine.shared_mem_per_sm
        )));
    }
    Ok(grid.with_dynamic_shared(machine.shared_mem_per_sm))
}

/// Seeded input for functional runs: uniform values in [0, 1).
pub fn init_data(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f32>()).collect()
}

/// The workload a sweep row at `c` simulates: `n_elements` split into
/// tiles of the coordinate's size (single elements for Drop Off).
pub fn build_workload(
    pattern: PatternKind,
    wait: Option<WaitKind>,
    n_elements: u64,
    c: &Coordinate,
) -> Result<Workload> {
    let n = n_elements as usize;
    if pattern == PatternKind::DropOff {
        return build_drop_off(n, c.iterations);
    }
    if !n.is_multiple_of(c.tile_elements) {
        return Err(Error::invalid(
            "sweep point",
            format!("{n} elements do not split into tiles of {}", c.tile_elements),
        ));
    }
    let tiles = n / c.tile_elements;
    let w = match pattern {
        PatternKind::SyncBaseline => build_sync_baseline(tiles, c.tile_elements, c.iterations)?,
        PatternKind::RegisterBypass => build_register_bypass(tiles, c.tile_elements, c.iterations)?,
        PatternKind::Overlap => build_overlap(
            tiles,
            c.tile_elements,
            c.iterations,
            c.inflight,
            wait.unwrap_or(WaitKind::Pipeline),
        )?,
        PatternKind::DropOff => unreachable!(),
    };
    Ok(match wait {
        Some(kind) => w.with_wait_kind(kind),
        None => w,
    })
}

/// Key of the simulation a row needs; depth only matters for Overlap.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Job {
    pattern: PatternKind,
    wait: Option<WaitKind>,
    coord: Coordinate,
}

impl Job {
    fn of(pattern: PatternKind, wait: Option<WaitKind>, coord: Coordinate) -> Self {
        let mut coord = coord;
        if pattern != PatternKind::Overlap {
            coord.inflight = 0;
        }
        Job { pattern, wait, coord }
    }
}

#[derive(Clone)]
struct Outcome {
    elapsed: f64,
    gflops: f64,
    gbs: f64,
}

fn run_job(job: &Job, cfg: &SweepConfig, machine: &MachineParams) -> Result<Outcome> {
    let w = build_workload(job.pattern, job.wait, cfg.n_elements(), &job.coord)?;
    let mut grid = Grid::new(job.coord.blocks, job.coord.threads);
    if job.coord.occupancy == OccupancyMode::Starved {
        grid = starve_occupancy(&w, grid, machine)?;
    }
    let run = run_repeated(&w, machine, grid, cfg.repeats, cfg.warmup, cfg.seed)?;
    let elapsed = run.summary.mean;
    let first = run.runs[0];
    let per_cycle = |x: u64| if elapsed > 0.0 { x as f64 * machine.clock / elapsed } else { 0.0 };
    Ok(Outcome {
        elapsed,
        gflops: per_cycle(first.flops),
        gbs: per_cycle(first.bytes_moved),
    })
}

/// Every (pattern, wait) pair the config sweeps, in config order.
fn pattern_waits(cfg: &SweepConfig) -> Vec<(PatternKind, Option<WaitKind>)> {
    let mut out = Vec::new();
    for &p in &cfg.patterns {
        if p.takes_wait_kind() {
            out.extend(cfg.wait_kinds.iter().map(|&w| (p, Some(w))));
        } else {
            out.push((p, None));
        }
    }
    out
}

fn coordinates(cfg: &SweepConfig) -> Vec<Coordinate> {
    let mut out = Vec::new();
    for &occupancy in &cfg.occupancy_mode {
        for &iterations in &cfg.iterations_list {
            for &tile_elements in &cfg.tile_elements_list {
                for &blocks in &cfg.blocks_list {
                    for &threads in &cfg.threads_per_block_list {
                        for &inflight in &cfg.inflight_list {
                            out.push(Coordinate {
                                iterations,
                                tile_elements,
                                blocks,
                                threads,
                                inflight,
                                occupancy,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Runs the Cartesian product of the config. Rows come out in canonical
/// order (occupancy, iterations, tile, blocks, threads, inflight, then
/// pattern and wait in config order); failures become error rows.
pub fn run_sweep(cfg: &SweepConfig, machine: &MachineParams) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    machine.validate()?;
    let coords = coordinates(cfg);
    let pws = pattern_waits(cfg);

    let mut jobs: Vec<Job> = Vec::new();
    let mut seen = HashMap::new();
    for &c in &coords {
        for &(p, w) in &pws {
            let job = Job::of(p, w, c);
            seen.entry(job).or_insert_with(|| {
                jobs.push(job);
                jobs.len() - 1
            });
        }
    }
    let outcomes: Vec<Result<Outcome>> = jobs.par_iter().map(|j| run_job(j, cfg, machine)).collect();

    let mut rows = Vec::with_capacity(coords.len() * pws.len());
    for &c in &coords {
        for &(pattern, wait) in &pws {
            let outcome = &outcomes[seen[&Job::of(pattern, wait, c)]];
            let (elapsed, gflops, gbs, error) = match outcome {
                Ok(o) => (Some(o.elapsed), Some(o.gflops), Some(o.gbs), None),
                Err(e) => (None, None, None, Some(e.to_string())),
            };
            rows.push(SweepRow {
                pattern,
                wait,
                coord: c,
                ai: arithmetic_intensity(c.iterations),
                elapsed_cycles: elapsed,
                gflops,
                gbs,
                speedup: None,
                error,
            });
        }
    }
    Ok(rows)
}

/// Fills `speedup = sync elapsed / row elapsed` from the SyncBaseline row at
/// the same coordinate. Rows without a usable measurement keep `None`.
pub fn speedup_table(rows: &[SweepRow]) -> Result<Vec<SweepRow>> {
    let baseline: HashMap<Coordinate, Option<f64>> = rows
        .iter()
        .filter(|r| r.pattern == PatternKind::SyncBaseline)
        .map(|r| (r.coord, r.elapsed_cycles))
        .collect();
    rows.iter()
        .map(|r| {
            let sync = baseline.get(&r.coord).ok_or_else(|| Error::Missing {
                what: "sync baseline",
                key: r.coord.to_string(),
            })?;
            let speedup = match (sync, r.elapsed_cycles) {
                (Some(s), Some(e)) if e > 0.0 => Some(s / e),
                (Some(_), Some(_)) => Some(1.0),
                _ => None,
            };
            Ok(SweepRow { speedup, ..r.clone() })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    wtr.write_record(SWEEP_CSV_HEADER.split(','))?;
    for r in rows {
        let c = &r.coord;
        wtr.write_record([
            r.pattern.as_str().to_string(),
            r.wait.map_or("none", WaitKind::as_str).to_string(),
            c.iterations.to_string(),
            r.ai.to_string(),
            c.tile_elements.to_string(),
            c.blocks.to_string(),
            c.threads.to_string(),
            c.inflight.to_string(),
            c.occupancy.to_string(),
            opt(r.elapsed_cycles),
            opt(r.gflops),
            opt(r.gbs),
            opt(r.speedup),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::invalid("csv buffer", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SweepConfig {
        SweepConfig {
            total_bytes: 1 << 16,
            iterations_list: vec![1],
            tile_elements_list: vec![256],
            blocks_list: vec![4],
            threads_per_block_list: vec![64],
            inflight_list: vec![2],
            wait_kinds: vec![WaitKind::Pipeline],
            patterns: vec![PatternKind::SyncBaseline],
            occupancy_mode: vec![OccupancyMode::Full],
            repeats: 1,
            warmup: 0,
            seed: 0,
        }
    }

    #[test]
    fn intensity_examples() {
        assert_eq!(arithmetic_intensity(0), 0.0);
        assert_eq!(arithmetic_intensity(4), 1.0);
        assert_eq!(arithmetic_intensity(50), 12.5);
        let ridge = MachineParams::a100_like().roofline().ridge_point();
        assert!((arithmetic_intensity(50) - ridge).abs() < 0.1);
    }

    #[test]
    fn singleton_sweep_has_one_row() {
        let rows = run_sweep(&tiny_cfg(), &MachineParams::a100_like()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].error.is_none());
    }

    #[test]
    fn row_count_is_product() {
        let mut cfg = tiny_cfg();
        cfg.iterations_list = vec![0, 1, 2];
        cfg.patterns = vec![PatternKind::SyncBaseline, PatternKind::DropOff];
        assert_eq!(run_sweep(&cfg, &MachineParams::a100_like()).unwrap().len(), 6);
        cfg.patterns = vec![PatternKind::SyncBaseline, PatternKind::Overlap];
        cfg.wait_kinds = vec![WaitKind::Barrier, WaitKind::Pipeline];
        cfg.inflight_list = vec![2, 4];
        // (1 + 2 waits) patterns × 3 iterations × 2 depths
        assert_eq!(run_sweep(&cfg, &MachineParams::a100_like()).unwrap().len(), 18);
    }

    #[test]
    fn speedup_division_and_idempotence() {
        let mut cfg = tiny_cfg();
        cfg.patterns = vec![PatternKind::SyncBaseline, PatternKind::Overlap];
        let rows = run_sweep(&cfg, &MachineParams::a100_like()).unwrap();
        let mut fake = rows.clone();
        fake[0].elapsed_cycles = Some(200.0);
        fake[1].elapsed_cycles = Some(160.0);
        let once = speedup_table(&fake).unwrap();
        assert_eq!(once[0].speedup, Some(1.0));
        assert_eq!(once[1].speedup, Some(1.25));
        assert_eq!(speedup_table(&once).unwrap(), once);
    }

    #[test]
    fn missing_baseline_names_coordinate() {
        let mut cfg = tiny_cfg();
        cfg.patterns = vec![PatternKind::Overlap];
        let rows = run_sweep(&cfg, &MachineParams::a100_like()).unwrap();
        let err = speedup_table(&rows).unwrap_err().to_string();
        assert!(err.contains("iterations=1 tile_elems=256"), "{err}");
    }

    #[test]
    fn unschedulable_rows_are_flagged() {
        let mut cfg = tiny_cfg();
        cfg.tile_elements_list = vec![1 << 14];
        cfg.total_bytes = 1 << 18;
        cfg.patterns = vec![PatternKind::SyncBaseline, PatternKind::Overlap];
        cfg.inflight_list = vec![4];
        let m = MachineParams::a100_like();
        let rows = run_sweep(&cfg, &m).unwrap();
        // 4 buffers × 64 KiB exceed the SM's shared memory
        assert!(rows[0].error.is_none());
        assert!(rows[1].error.as_deref().unwrap().contains("unschedulable"));
        let csv = sweep_csv(&speedup_table(&rows).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn starving_forces_one_block() {
        let m = MachineParams::a100_like();
        let w = build_overlap(8, 1024, 1, 2, WaitKind::Pipeline).unwrap();
        let g = starve_occupancy(&w, Grid::new(216, 256), &m).unwrap();
        assert_eq!(crate::sim::occupancy(&m, g.dynamic_shared.unwrap(), 256).unwrap(), 1);
        let huge = build_overlap(8, 1 << 16, 1, 2, WaitKind::Pipeline).unwrap();
        assert!(starve_occupancy(&huge, Grid::new(1, 256), &m).is_err());
    }

    #[test]
    fn config_parsing() {
        let text = r#"{"iterations_list":[1],"tile_elements_list":[256],"blocks_list":[4],
            "threads_per_block_list":[64],"inflight_list":[2],"wait_kinds":["pipeline"],
            "patterns":["sync_baseline","overlap"],"occupancy_mode":"starved"}"#;
        let cfg = SweepConfig::from_json(text).unwrap();
        assert_eq!(cfg.total_bytes, DESK_TOTAL_BYTES);
        assert_eq!(cfg.occupancy_mode, vec![OccupancyMode::Starved]);
        let list = text.replace(r#""starved""#, r#"["full","starved"]"#);
        assert_eq!(SweepConfig::from_json(&list).unwrap().occupancy_mode.len(), 2);
        assert!(SweepConfig::from_json(&text.replace("[256]", "[]")).is_err());
        assert!(SweepConfig::from_json(&text.replace("\"patterns\"", "\"patternz\"")).is_err());
    }

    #[test]
    fn init_data_is_seeded() {
        assert_eq!(init_data(16, 7), init_data(16, 7));
        assert_ne!(init_data(16, 7), init_data(16, 8));
        assert!(init_data(1000, 1).iter().all(|x| (0.0..1.0).contains(x)));
    }
}
