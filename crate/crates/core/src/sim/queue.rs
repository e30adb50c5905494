//! Monotone integer-time event queue: a ring of per-cycle buckets covering
//! the near future plus a heap for anything further out. Pops in
//! (time, insertion) order, same as a binary heap keyed on (time, seq).

use std::cmp::Reverse;
use std::collections::BinaryHeap;

const WINDOW: usize = 8192;
const WORDS: usize = WINDOW / 64;

pub(super) struct EventQueue<T> {
    ring: Vec<Vec<T>>,
    occupied: [u64; WORDS],
    /// Time of the bucket currently being drained.
    base: u64,
    cursor: usize,
    far: BinaryHeap<Reverse<(u64, u64, T)>>,
    seq: u64,
}

impl<T: Ord + Copy> EventQueue<T> {
    pub(super) fn new() -> Self {
        EventQueue {
            ring: (0..WINDOW).map(|_| Vec::new()).collect(),
            occupied: [0; WORDS],
            base: 0,
            cursor: 0,
            far: BinaryHeap::new(),
            seq: 0,
        }
    }

    /// `time` must not precede the last popped time.
    pub(super) fn push(&mut self, time: u64, item: T) {
        debug_assert!(time >= self.base);
        if time < self.base + WINDOW as u64 {
            let slot = time as usize % WINDOW;
            self.ring[slot].push(item);
            self.occupied[slot / 64] |= 1 << (slot % 64);
        } else {
            self.seq += 1;
            self.far.push(Reverse((time, self.seq, item)));
        }
    }

    pub(super) fn pop(&mut self) -> Option<(u64, T)> {
        loop {
            let slot = self.base as usize % WINDOW;
            if let Some(&item) = self.ring[slot].get(self.cursor) {
                self.cursor += 1;
                return Some((self.base, item));
            }
            self.ring[slot].clear();
            self.cursor = 0;
            self.occupied[slot / 64] &= !(1 << (slot % 64));
            match self.next_occupied(slot) {
                Some(delta) => self.advance(self.base + delta as u64),
                None => {
                    let Reverse((time, _, _)) = *self.far.peek()?;
                    self.advance(time);
                }
            }
        }
    }

    /// Distance from `slot` to the next non-empty bucket in the window.
    fn next_occupied(&self, slot: usize) -> Option<usize> {
        for step in 0..=WORDS {
            let word = (slot / 64 + step) % WORDS;
            let mut bits = self.occupied[word];
            if step == 0 {
                bits &= !0u64 << (slot % 64);
            } else if step == WORDS {
                bits &= (1u64 << (slot % 64)).wrapping_sub(1);
            }
            if bits != 0 {
                let found = word * 64 + bits.trailing_zeros() as usize;
                return Some((found + WINDOW - slot) % WINDOW);
            }
        }
        None
    }

    fn advance(&mut self, time: u64) {
        self.base = time;
        let horizon = time + WINDOW as u64;
        while let Some(&Reverse((t, _, item))) = self.far.peek() {
            if t >= horizon {
                break;
            }
            self.far.pop();
            let slot = t as usize % WINDOW;
            self.ring[slot].push(item);
            self.occupied[slot / 64] |= 1 << (slot % 64);
        }
    }
}
