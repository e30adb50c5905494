use std::collections::{HashMap, VecDeque};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::queue::EventQueue;
use super::{occupancy, CopyKind, CopyRequest, Grid, MachineParams, SimResult};
use crate::error::{Error, Result};
use crate::patterns::{
    block_schedule, check_schedule, PatternKind, Step, WaitKind, Workload, BYTES_PER_ELEMENT,
    FLOPS_PER_ELEMENT_ITERATION,
};

/// Longest slice of compute a warp may hold the issue port for before the
/// round-robin scheduler moves on.
const COMPUTE_QUANTUM: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    IssueDone(u32),
    Wake(u32),
    ChannelFree(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WarpState {
    Idle,
    Ready,
    Issuing,
    Blocked,
    Done,
}

struct Warp {
    schedule: Rc<[Step]>,
    pc: usize,
    compute_left: u64,
    /// Elements per tile handled by this warp (tile patterns).
    share: u64,
    /// Global thread index of lane 0 (Drop Off).
    thread_base: usize,
    /// Completion cycles of this warp's outstanding async copies, in issue order.
    own: VecDeque<(usize, u64)>,
    state: WarpState,
}

#[derive(Default)]
struct Stage {
    expected: u32,
    issued: u32,
    done_at: u64,
    channel: bool,
    waiters: Vec<u32>,
}

struct Block {
    id: usize,
    warps_alive: usize,
    arrived: usize,
    barrier_waiters: Vec<u32>,
    stages: Vec<Stage>,
}

struct Sm {
    busy: bool,
    ready: Vec<u64>,
    last: usize,
    free_channels: u32,
    channel_waiters: Vec<u32>,
}

impl Sm {
    fn set_ready(&mut self, slot: usize) {
        self.ready[slot / 64] |= 1 << (slot % 64);
    }

    /// Next ready slot after `last`, wrapping around.
    fn pick(&mut self, slots: usize) -> Option<usize> {
        for off in 1..=slots {
            let s = (self.last + off) % slots;
            if self.ready[s / 64] & (1 << (s % 64)) != 0 {
                self.ready[s / 64] &= !(1 << (s % 64));
                self.last = s;
                return Some(s);
            }
        }
        None
    }
}

pub(super) struct Engine<'a> {
    m: &'a MachineParams,
    w: &'a Workload,
    grid: Grid,
    wait_kind: WaitKind,
    warps_per_block: usize,
    resident: usize,
    slots_per_sm: usize,
    total_threads: usize,
    now: u64,
    end: u64,
    events: EventQueue<EventKind>,
    sms: Vec<Sm>,
    blocks: Vec<Option<Block>>,
    warps: Vec<Warp>,
    next_block: usize,
    queue_free: f64,
    bytes_moved: u64,
    rng: Option<ChaCha8Rng>,
    schedules: HashMap<usize, Rc<[Step]>>,
    runnable: VecDeque<u32>,
    dirty: Vec<usize>,
    trace: Option<Vec<CopyRequest>>,
}

impl<'a> Engine<'a> {
    pub(super) fn new(w: &'a Workload, m: &'a MachineParams, grid: Grid, seed: u64, trace: bool) -> Result<Self> {
        m.validate()?;
        w.validate()?;
        let required = w.shared_bytes(grid.threads_per_block);
        let allocated = grid.dynamic_shared.unwrap_or(required);
        if allocated < required {
            return Err(Error::Structural(format!(
                "{} buffers need {required} B of shared memory but only {allocated} B are allocated",
                w.pattern
            )));
        }
        let occ = occupancy(m, allocated, grid.threads_per_block)? as usize;
        if grid.blocks == 0 && w.n_tiles > 0 {
            return Err(Error::invalid("grid", "at least one block is required"));
        }
        let warps_per_block = grid.threads_per_block / m.warp_width as usize;
        let total_threads = grid.blocks * grid.threads_per_block;

        // Longest per-block (per-thread for Drop Off) tile sequence.
        let longest = match w.pattern {
            PatternKind::DropOff => w.n_tiles.div_ceil(total_threads.max(1)),
            _ => w.n_tiles.div_ceil(grid.blocks.max(1)),
        };
        let probe = block_schedule(w.pattern, longest, w.inflight_k, w.write_back);
        check_schedule(&probe, longest, w.shared_buffers)?;

        let sm_count = m.sm_count as usize;
        let resident = occ.min(grid.blocks.div_ceil(sm_count)).max(1);
        let slots_per_sm = resident * warps_per_block;
        let sms = (0..sm_count)
            .map(|_| Sm {
                busy: false,
                ready: vec![0; slots_per_sm.div_ceil(64)],
                last: slots_per_sm - 1,
                free_channels: m.async_channels_per_sm,
                channel_waiters: Vec::new(),
            })
            .collect();
        let empty: Rc<[Step]> = Rc::from(Vec::new());
        let warps = (0..sm_count * slots_per_sm)
            .map(|_| Warp {
                schedule: empty.clone(),
                pc: 0,
                compute_left: 0,
                share: 0,
                thread_base: 0,
                own: VecDeque::new(),
                state: WarpState::Idle,
            })
            .collect();
        let rng = (w.jitter_cycles > 0).then(|| ChaCha8Rng::seed_from_u64(seed));

        Ok(Engine {
            m,
            w,
            grid,
            wait_kind: w.wait_kind.unwrap_or(WaitKind::Pipeline),
            warps_per_block,
            resident,
            slots_per_sm,
            total_threads,
            now: 0,
            end: 0,
            events: EventQueue::new(),
            sms,
            blocks: (0..sm_count * resident).map(|_| None).collect(),
            warps,
            next_block: 0,
            queue_free: 0.0,
            bytes_moved: 0,
            rng,
            schedules: HashMap::new(),
            runnable: VecDeque::new(),
            dirty: Vec::new(),
            trace: trace.then(Vec::new),
        })
    }

    pub(super) fn run(mut self) -> Result<(SimResult, Vec<CopyRequest>)> {
        if self.w.n_tiles > 0 {
            for slot in 0..self.resident {
                for sm in 0..self.sms.len() {
                    if self.next_block < self.grid.blocks {
                        let id = self.next_block;
                        self.next_block += 1;
                        self.launch(sm, slot, id);
                    }
                }
            }
            self.settle();
            while let Some((time, kind)) = self.events.pop() {
                self.now = time;
                self.end = self.end.max(time);
                match kind {
                    EventKind::IssueDone(w) => {
                        let sm = self.sm_of(w);
                        self.sms[sm].busy = false;
                        self.dirty.push(sm);
                        self.complete_issue(w);
                    }
                    EventKind::Wake(w) => self.runnable.push_back(w),
                    EventKind::ChannelFree(sm) => {
                        let sm = sm as usize;
                        self.sms[sm].free_channels += 1;
                        let waiters = std::mem::take(&mut self.sms[sm].channel_waiters);
                        self.runnable.extend(waiters);
                    }
                }
                self.settle();
            }
            if let Some(w) = self.warps.iter().position(|w| w.state != WarpState::Done && w.state != WarpState::Idle) {
                return Err(Error::Structural(format!("warp {w} never finished (deadlock)")));
            }
        }
        let resident = if self.w.n_tiles == 0 { 0 } else { self.resident as u32 };
        let result = SimResult::new(self.end, self.bytes_moved, self.w.flops(), self.m.clock, resident);
        Ok((result, self.trace.unwrap_or_default()))
    }

    fn sm_of(&self, w: u32) -> usize {
        w as usize / self.slots_per_sm
    }

    fn block_of(&self, w: u32) -> usize {
        w as usize / self.warps_per_block
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        self.events.push(time, kind);
    }

    fn schedule_for(&mut self, n: usize) -> Rc<[Step]> {
        let (pattern, k, wb) = (self.w.pattern, self.w.inflight_k, self.w.write_back);
        self.schedules
            .entry(n)
            .or_insert_with(|| Rc::from(block_schedule(pattern, n, k, wb)))
            .clone()
    }

    /// Elements of tile/step `tile` handled by warp `w`.
    fn share(&self, w: u32, tile: usize) -> u64 {
        let warp = &self.warps[w as usize];
        match self.w.pattern {
            PatternKind::DropOff => {
                let first = tile * self.total_threads + warp.thread_base;
                self.w.n_tiles.saturating_sub(first).min(self.m.warp_width as usize) as u64
            }
            _ => warp.share,
        }
    }

    fn launch(&mut self, sm: usize, slot: usize, id: usize) {
        let wpb = self.warps_per_block;
        let ww = self.m.warp_width as usize;
        let n = self.w.n_tiles;
        let g = self.grid.blocks;
        let base = sm * self.slots_per_sm + slot * wpb;

        let stages: Vec<Stage> = match self.w.pattern {
            PatternKind::DropOff => {
                let t = self.total_threads;
                let first = id * self.grid.threads_per_block;
                let steps = if first < n { (n - first).div_ceil(t) } else { 0 };
                (0..steps)
                    .map(|s| Stage {
                        expected: (n - (s * t + first)).div_ceil(ww).min(wpb) as u32,
                        ..Stage::default()
                    })
                    .collect()
            }
            _ => {
                let tiles = if id < n { (n - id).div_ceil(g) } else { 0 };
                let per_warp = self.w.tile_elements.div_ceil(wpb);
                let active = self.w.tile_elements.div_ceil(per_warp);
                (0..tiles)
                    .map(|_| Stage {
                        expected: active as u32,
                        ..Stage::default()
                    })
                    .collect()
            }
        };

        for lane in 0..wpb {
            let (schedule, share, thread_base) = match self.w.pattern {
                PatternKind::DropOff => {
                    let tb = id * self.grid.threads_per_block + lane * ww;
                    let steps = if tb < n { (n - tb).div_ceil(self.total_threads) } else { 0 };
                    (self.schedule_for(steps), 0, tb)
                }
                _ => {
                    let per_warp = self.w.tile_elements.div_ceil(wpb);
                    let share = self.w.tile_elements.saturating_sub(lane * per_warp).min(per_warp);
                    (self.schedule_for(stages.len()), share as u64, 0)
                }
            };
            let warp = &mut self.warps[base + lane];
            warp.schedule = schedule;
            warp.pc = 0;
            warp.compute_left = 0;
            warp.share = share;
            warp.thread_base = thread_base;
            warp.own.clear();
            warp.state = WarpState::Blocked;
        }
        self.blocks[sm * self.resident + slot] = Some(Block {
            id,
            warps_alive: wpb,
            arrived: 0,
            barrier_waiters: Vec::new(),
            stages,
        });
        self.runnable.extend((base..base + wpb).map(|w| w as u32));
    }

    /// Advance runnable warps until all are ready, issuing or blocked, then
    /// hand free issue ports to ready warps.
    fn settle(&mut self) {
        while let Some(w) = self.runnable.pop_front() {
            self.advance(w);
        }
        while let Some(sm) = self.dirty.pop() {
            self.dispatch(sm);
        }
    }

    fn make_ready(&mut self, w: u32) {
        let sm = self.sm_of(w);
        let slot = w as usize % self.slots_per_sm;
        self.warps[w as usize].state = WarpState::Ready;
        self.sms[sm].set_ready(slot);
        self.dirty.push(sm);
    }

    fn block_mut(&mut self, w: u32) -> &mut Block {
        let b = self.block_of(w);
        self.blocks[b].as_mut().expect("warp belongs to a live block")
    }

    fn compute_cycles(&self, elements: u64) -> u64 {
        let flops = elements * u64::from(self.w.iterations) * FLOPS_PER_ELEMENT_ITERATION;
        flops.div_ceil(self.m.flops_per_cycle_per_warp)
    }

    fn advance(&mut self, w: u32) {
        let now = self.now;
        loop {
            let wi = w as usize;
            let Some(&step) = self.warps[wi].schedule.get(self.warps[wi].pc) else {
                self.retire(w);
                return;
            };
            match step {
                Step::LoadSync { tile, .. } | Step::Store { tile } => {
                    if self.share(w, tile) == 0 {
                        self.warps[wi].pc += 1;
                        continue;
                    }
                    self.make_ready(w);
                    return;
                }
                Step::CopyAsync { tile, .. } => {
                    if self.share(w, tile) == 0 {
                        self.warps[wi].pc += 1;
                        continue;
                    }
                    let sm = self.sm_of(w);
                    if !self.block_mut(w).stages[tile].channel {
                        if self.sms[sm].free_channels == 0 {
                            self.warps[wi].state = WarpState::Blocked;
                            self.sms[sm].channel_waiters.push(w);
                            return;
                        }
                        self.sms[sm].free_channels -= 1;
                        self.block_mut(w).stages[tile].channel = true;
                    }
                    self.make_ready(w);
                    return;
                }
                Step::Wait { tile } => {
                    self.warps[wi].pc += 1;
                    let release = match self.wait_kind {
                        WaitKind::Pipeline => {
                            if self.share(w, tile) == 0 {
                                continue;
                            }
                            let own = &mut self.warps[wi].own;
                            let mut done = 0;
                            while let Some(&(t, c)) = own.front() {
                                if t > tile {
                                    break;
                                }
                                done = done.max(c);
                                own.pop_front();
                            }
                            done
                        }
                        WaitKind::Barrier => {
                            let latency = self.m.barrier_wait_latency;
                            let stage = &mut self.block_mut(w).stages[tile];
                            if stage.issued < stage.expected {
                                stage.waiters.push(w);
                                self.warps[wi].state = WarpState::Blocked;
                                return;
                            }
                            stage.done_at + latency
                        }
                    };
                    if release > now {
                        self.warps[wi].state = WarpState::Blocked;
                        self.push(release, EventKind::Wake(w));
                        return;
                    }
                }
                Step::BlockSync => {
                    self.warps[wi].pc += 1;
                    let wpb = self.warps_per_block;
                    let block = self.block_mut(w);
                    block.arrived += 1;
                    if block.arrived < wpb {
                        block.barrier_waiters.push(w);
                        self.warps[wi].state = WarpState::Blocked;
                        return;
                    }
                    block.arrived = 0;
                    let released = std::mem::take(&mut block.barrier_waiters);
                    self.runnable.extend(released);
                }
                Step::ReadShared { .. } => self.warps[wi].pc += 1,
                Step::Compute { tile, .. } => {
                    if self.warps[wi].compute_left == 0 {
                        let cycles = self.compute_cycles(self.share(w, tile));
                        if cycles == 0 {
                            self.warps[wi].pc += 1;
                            continue;
                        }
                        self.warps[wi].compute_left = cycles;
                    }
                    self.make_ready(w);
                    return;
                }
            }
        }
    }

    fn retire(&mut self, w: u32) {
        self.warps[w as usize].state = WarpState::Done;
        let block = self.block_mut(w);
        block.warps_alive -= 1;
        if block.warps_alive > 0 {
            return;
        }
        let b = self.block_of(w);
        self.blocks[b] = None;
        if self.next_block < self.grid.blocks {
            let id = self.next_block;
            self.next_block += 1;
            self.launch(b / self.resident, b % self.resident, id);
        }
    }

    fn issue_cost(&self, w: u32) -> u64 {
        let warp = &self.warps[w as usize];
        match warp.schedule[warp.pc] {
            Step::LoadSync { .. } | Step::Store { .. } => self.m.sync_issue_cost,
            Step::CopyAsync { .. } => self.m.async_issue_cost,
            Step::Compute { .. } => warp.compute_left.min(COMPUTE_QUANTUM),
            other => unreachable!("{other:?} never needs the issue port"),
        }
    }

    fn dispatch(&mut self, sm: usize) {
        if self.sms[sm].busy {
            return;
        }
        let Some(slot) = self.sms[sm].pick(self.slots_per_sm) else {
            return;
        };
        let w = (sm * self.slots_per_sm + slot) as u32;
        let cost = self.issue_cost(w);
        self.sms[sm].busy = true;
        self.warps[w as usize].state = WarpState::Issuing;
        self.push(self.now + cost, EventKind::IssueDone(w));
    }

    /// Streams `bytes` through the device queue; returns the completion cycle.
    fn transfer(&mut self, w: u32, bytes: u64, kind: CopyKind, buffer: usize) -> u64 {
        let start = self.queue_free.max(self.now as f64);
        self.queue_free = start + bytes as f64 / self.m.global_bandwidth;
        let mut complete = self.queue_free.ceil() as u64 + self.m.global_latency;
        if kind != CopyKind::WriteBack {
            if let Some(rng) = self.rng.as_mut() {
                complete += u64::from(rng.gen_range(0..=self.w.jitter_cycles));
            }
        }
        self.bytes_moved += bytes;
        self.end = self.end.max(complete);
        let slot = self.block_of(w);
        if let Some(trace) = self.trace.as_mut() {
            let block_id = self.blocks[slot].as_ref().map_or(0, |b| b.id);
            trace.push(CopyRequest {
                block_id,
                buffer_index: buffer,
                size: bytes,
                issue_cycle: self.now,
                complete_cycle: complete,
                kind,
            });
        }
        complete
    }

    fn complete_issue(&mut self, w: u32) {
        let wi = w as usize;
        let step = self.warps[wi].schedule[self.warps[wi].pc];
        match step {
            Step::LoadSync { tile, buffer } => {
                let bytes = self.share(w, tile) * BYTES_PER_ELEMENT;
                let complete = self.transfer(w, bytes, CopyKind::Sync, buffer);
                self.warps[wi].pc += 1;
                self.warps[wi].state = WarpState::Blocked;
                self.push(complete, EventKind::Wake(w));
                return;
            }
            Step::CopyAsync { tile, buffer } => {
                let bytes = self.share(w, tile) * BYTES_PER_ELEMENT;
                let complete = self.transfer(w, bytes, CopyKind::Async, buffer);
                self.warps[wi].own.push_back((tile, complete));
                self.warps[wi].pc += 1;
                let latency = self.m.barrier_wait_latency;
                let now = self.now;
                let stage = &mut self.block_mut(w).stages[tile];
                stage.issued += 1;
                stage.done_at = stage.done_at.max(complete);
                if stage.issued == stage.expected {
                    let done_at = stage.done_at;
                    let waiters = std::mem::take(&mut stage.waiters);
                    let sm = self.sm_of(w) as u32;
                    self.push(done_at, EventKind::ChannelFree(sm));
                    for waiter in waiters {
                        self.push((done_at + latency).max(now), EventKind::Wake(waiter));
                    }
                }
            }
            Step::Compute { .. } => {
                let slice = self.warps[wi].compute_left.min(COMPUTE_QUANTUM);
                self.warps[wi].compute_left -= slice;
                if self.warps[wi].compute_left == 0 {
                    self.warps[wi].pc += 1;
                }
            }
            Step::Store { tile } => {
                let bytes = self.share(w, tile) * BYTES_PER_ELEMENT;
                self.transfer(w, bytes, CopyKind::WriteBack, 0);
                self.warps[wi].pc += 1;
            }
            other => unreachable!("{other:?} never needs the issue port"),
        }
        self.runnable.push_back(w);
    }
}
