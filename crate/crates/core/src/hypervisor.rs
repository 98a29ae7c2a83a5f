//! Hypervisor paging engine for the die-stacked fast region.
//!
//! Data pages are demand-migrated between slow off-chip DRAM and a pool of
//! fast die-stacked frames. The pool picks eviction victims with CLOCK
//! second-chance over the nested-leaf access bits (or plain FIFO), can run
//! a watermark daemon that evicts ahead of demand, and can prefetch the
//! pages following a faulting one into spare frames.
//!
//! This module is pure placement policy: it decides *which* page moves
//! *where* and keeps the free lists; the engine executes the plans (PTE
//! remaps, page copies, translation coherence) and owns all clocks. The
//! policy sees the rest of the machine only through [`PagingEnv`], so it
//! never touches memory or tables directly.

use crate::addr::{Gpp, Spp, PAGE_BYTES};
use crate::config::{EvictOrder, PagingConfig};
use crate::pagetable::PtError;
use std::collections::HashMap;

/// The policy's window onto the rest of the machine: nested-leaf access
/// bits (the reference information CLOCK runs on), fresh slow frames once
/// the recycled ones run out, and slow-residency queries for prefetch
/// candidates. Access-bit reads and clears are quiet: metadata
/// housekeeping by the hypervisor, not coherent traffic.
pub trait PagingEnv {
    fn access_get(&mut self, vm: u16, gpp: Gpp) -> bool;
    fn access_clear(&mut self, vm: u16, gpp: Gpp);
    /// A never-used slow frame from the bump allocator.
    fn fresh_slow_frame(&mut self) -> Result<Spp, PtError>;
    /// Current frame of `gpp` when that page is mapped and slow-resident.
    fn slow_resident(&mut self, vm: u16, gpp: Gpp) -> Option<Spp>;
}

/// One planned page move between memory regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub vm: u16,
    pub gpp: Gpp,
    pub from: Spp,
    pub to: Spp,
}

/// Everything one demand fault sets in motion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultPlan {
    /// Victims pushed out to make room (at most one per admission).
    pub evictions: Vec<Move>,
    /// The faulting page's promotion into the fast region.
    pub promotion: Move,
    /// Sequentially-following pages pulled into spare frames.
    pub prefetches: Vec<Move>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HvStats {
    pub first_touch_fast: u64,
    pub first_touch_slow: u64,
    pub demand_migrations: u64,
    pub daemon_migrations: u64,
    pub prefetches: u64,
    pub evictions: u64,
    /// Occupied frames CLOCK inspected (second chances included).
    pub clock_scans: u64,
}

/// The pool of fast data frames plus the slow-region free list.
#[derive(Debug)]
pub struct Hypervisor {
    cfg: PagingConfig,
    /// Slot i holds frame Spp(i); `None` is free.
    ring: Vec<Option<(u16, Gpp)>>,
    hand: usize,
    free: Vec<usize>,
    resident: HashMap<(u16, u64), usize>,
    /// Slow frames returned by promotions, reused LIFO before the bump
    /// allocator grows the slow footprint.
    free_slow: Vec<Spp>,
    pub stats: HvStats,
}

impl Hypervisor {
    /// `fast_frames` is the number of data frames the fast region offers
    /// (tables reservations already excluded).
    pub fn new(cfg: PagingConfig, fast_frames: u64) -> Self {
        let frames = fast_frames as usize;
        Hypervisor {
            cfg,
            ring: vec![None; frames],
            hand: 0,
            // Pop from the back: frames hand out in ascending order.
            free: (0..frames).rev().collect(),
            resident: HashMap::new(),
            free_slow: Vec::new(),
            stats: HvStats::default(),
        }
    }

    pub fn free_frames(&self) -> u64 {
        self.free.len() as u64
    }

    pub fn resident_frame(&self, vm: u16, gpp: Gpp) -> Option<Spp> {
        self.resident.get(&(vm, gpp.0)).map(|&slot| Spp(slot as u64))
    }

    /// Drop a fast-resident page from the pool (a background remap demoted
    /// it); returns the frame it held, now free.
    pub fn expel(&mut self, vm: u16, gpp: Gpp) -> Option<Spp> {
        self.resident.contains_key(&(vm, gpp.0)).then(|| self.release(vm, gpp))
    }

    /// Hand out a slow frame, recycling freed ones first.
    pub fn take_slow_frame(&mut self, env: &mut dyn PagingEnv) -> Result<Spp, PtError> {
        self.alloc_slow(env)
    }

    /// Return a vacated slow frame for later reuse.
    pub fn recycle_slow(&mut self, frame: Spp) {
        self.free_slow.push(frame);
    }

    fn alloc_slow(&mut self, env: &mut dyn PagingEnv) -> Result<Spp, PtError> {
        match self.free_slow.pop() {
            Some(s) => Ok(s),
            None => env.fresh_slow_frame(),
        }
    }

    fn admit(&mut self, vm: u16, gpp: Gpp) -> Spp {
        let slot = self.free.pop().expect("caller guarantees a free frame");
        self.ring[slot] = Some((vm, gpp));
        self.resident.insert((vm, gpp.0), slot);
        Spp(slot as u64)
    }

    fn release(&mut self, vm: u16, gpp: Gpp) -> Spp {
        let slot = self.resident.remove(&(vm, gpp.0)).expect("victim is resident");
        self.ring[slot] = None;
        self.free.push(slot);
        Spp(slot as u64)
    }

    /// Place a never-mapped page: a free fast frame if there is one, the
    /// slow region otherwise (first touch never evicts anybody).
    pub fn first_touch(
        &mut self,
        vm: u16,
        gpp: Gpp,
        env: &mut dyn PagingEnv,
    ) -> Result<(Spp, bool), PtError> {
        if !self.free.is_empty() {
            self.stats.first_touch_fast += 1;
            Ok((self.admit(vm, gpp), true))
        } else {
            self.stats.first_touch_slow += 1;
            Ok((self.alloc_slow(env)?, false))
        }
    }

    /// Pick the next eviction victim. CLOCK gives second chances: a set
    /// access bit is cleared and the hand moves on; FIFO takes the next
    /// occupied slot regardless. Returns `None` when the pool is empty.
    fn select_victim(&mut self, env: &mut dyn PagingEnv) -> Option<(u16, Gpp)> {
        let occupied = self.ring.len() - self.free.len();
        if occupied == 0 {
            return None;
        }
        // Two sweeps bound the search: after one full lap every bit is
        // clear, so the second lap must stop.
        for _ in 0..2 * self.ring.len() {
            let slot = self.hand;
            self.hand = (self.hand + 1) % self.ring.len();
            let Some((vm, gpp)) = self.ring[slot] else { continue };
            self.stats.clock_scans += 1;
            if self.cfg.policy.order == EvictOrder::Lru && env.access_get(vm, gpp) {
                env.access_clear(vm, gpp);
                continue;
            }
            return Some((vm, gpp));
        }
        unreachable!("a second sweep always finds a cleared frame");
    }

    /// Evict one victim to the slow region; bookkeeping only, the caller
    /// performs the remap and the copy.
    fn evict_one(&mut self, env: &mut dyn PagingEnv) -> Result<Option<Move>, PtError> {
        let Some((vm, gpp)) = self.select_victim(env) else { return Ok(None) };
        let to = self.alloc_slow(env)?;
        let from = self.release(vm, gpp);
        self.stats.evictions += 1;
        Ok(Some(Move { vm, gpp, from, to }))
    }

    /// Plan the response to a demand fault on a slow-resident page:
    /// make room if needed, promote the page, and optionally prefetch its
    /// successors into remaining free frames.
    pub fn demand_fault(
        &mut self,
        vm: u16,
        gpp: Gpp,
        current: Spp,
        env: &mut dyn PagingEnv,
    ) -> Result<FaultPlan, PtError> {
        let mut evictions = Vec::new();
        if self.free.is_empty() {
            if let Some(mv) = self.evict_one(env)? {
                evictions.push(mv);
            }
        }
        let to = self.admit(vm, gpp);
        self.free_slow.push(current);
        self.stats.demand_migrations += 1;
        let promotion = Move { vm, gpp, from: current, to };

        let mut prefetches = Vec::new();
        for k in 1..=self.cfg.policy.prefetch as u64 {
            if self.free.is_empty() {
                break; // prefetch never evicts
            }
            let next = Gpp(gpp.0 + k);
            let Some(from) = env.slow_resident(vm, next) else { continue };
            let to = self.admit(vm, next);
            self.free_slow.push(from);
            self.stats.prefetches += 1;
            prefetches.push(Move { vm, gpp: next, from, to });
        }
        Ok(FaultPlan { evictions, promotion, prefetches })
    }

    /// Watermark daemon: when free frames fall below the low mark, evict
    /// until the high mark is restored (or the pool runs out of victims).
    pub fn daemon_tick(&mut self, env: &mut dyn PagingEnv) -> Result<Vec<Move>, PtError> {
        let mut moves = Vec::new();
        if !self.cfg.policy.daemon || self.free_frames() >= self.cfg.low_watermark {
            return Ok(moves);
        }
        while self.free_frames() < self.cfg.high_watermark {
            match self.evict_one(env)? {
                Some(mv) => moves.push(mv),
                None => break,
            }
        }
        self.stats.daemon_migrations += moves.len() as u64;
        Ok(moves)
    }
}

/// A DRAM channel's sustained-bandwidth queue: transfers serialize behind
/// `busy_until`.
#[derive(Debug, Clone, Copy)]
pub struct BandwidthBucket {
    pub bytes_per_cycle: u64,
    pub busy_until: u64,
}

impl BandwidthBucket {
    pub fn new(bytes_per_cycle: u64) -> Self {
        assert!(bytes_per_cycle > 0, "bandwidth must be positive");
        BandwidthBucket { bytes_per_cycle, busy_until: 0 }
    }

    /// Queue a transfer starting no earlier than `now`; returns its finish
    /// time.
    pub fn transfer(&mut self, now: u64, bytes: u64) -> u64 {
        let start = now.max(self.busy_until);
        self.busy_until = start + bytes.div_ceil(self.bytes_per_cycle);
        self.busy_until
    }
}

/// The two DRAM channels a page copy occupies.
#[derive(Debug, Clone, Copy)]
pub struct MemChannels {
    pub fast: BandwidthBucket,
    pub slow: BandwidthBucket,
}

impl MemChannels {
    pub fn new(fast_bw: u64, slow_bw: u64) -> Self {
        MemChannels { fast: BandwidthBucket::new(fast_bw), slow: BandwidthBucket::new(slow_bw) }
    }

    /// A page migration reads one region and writes the other; both
    /// channels are busy for it and the copy completes when the slower
    /// side does.
    pub fn copy_page(&mut self, now: u64) -> u64 {
        let f = self.fast.transfer(now, PAGE_BYTES);
        let s = self.slow.transfer(now, PAGE_BYTES);
        f.max(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PagingPolicy;
    use std::collections::HashSet;

    /// Test double: access bits over a set, a bump slow-frame allocator
    /// starting at frame 1000, and a slow-residency table for prefetch.
    struct FakeEnv {
        set: HashSet<(u16, u64)>,
        slow: HashMap<u64, Spp>,
        next_slow: u64,
    }

    impl FakeEnv {
        fn new() -> Self {
            FakeEnv { set: HashSet::new(), slow: HashMap::new(), next_slow: 1000 }
        }
    }

    impl PagingEnv for FakeEnv {
        fn access_get(&mut self, vm: u16, gpp: Gpp) -> bool {
            self.set.contains(&(vm, gpp.0))
        }
        fn access_clear(&mut self, vm: u16, gpp: Gpp) {
            self.set.remove(&(vm, gpp.0));
        }
        fn fresh_slow_frame(&mut self) -> Result<Spp, PtError> {
            let s = Spp(self.next_slow);
            self.next_slow += 1;
            Ok(s)
        }
        fn slow_resident(&mut self, _vm: u16, gpp: Gpp) -> Option<Spp> {
            self.slow.get(&gpp.0).copied()
        }
    }

    fn hv(frames: u64, policy: PagingPolicy) -> Hypervisor {
        Hypervisor::new(
            PagingConfig { policy, low_watermark: 1, high_watermark: 2, ..Default::default() },
            frames,
        )
    }

    const LRU: PagingPolicy = PagingPolicy { order: EvictOrder::Lru, daemon: false, prefetch: 0 };
    const FIFO: PagingPolicy = PagingPolicy { order: EvictOrder::Fifo, daemon: false, prefetch: 0 };

    #[test]
    fn first_touch_prefers_fast_until_full() {
        let mut h = hv(2, LRU);
        let mut env = FakeEnv::new();
        let (f0, fast0) = h.first_touch(0, Gpp(10), &mut env).unwrap();
        let (f1, fast1) = h.first_touch(0, Gpp(11), &mut env).unwrap();
        let (f2, fast2) = h.first_touch(0, Gpp(12), &mut env).unwrap();
        assert!(fast0 && fast1 && !fast2);
        assert_eq!((f0, f1), (Spp(0), Spp(1)), "ascending frame handout");
        assert_eq!(f2, Spp(1000), "overflow goes to a fresh slow frame");
        assert_eq!(h.stats.first_touch_fast, 2);
        assert_eq!(h.stats.first_touch_slow, 1);
        assert_eq!(h.resident_frame(0, Gpp(10)), Some(Spp(0)));
        assert_eq!(h.resident_frame(0, Gpp(12)), None);
    }

    #[test]
    fn clock_gives_second_chances_in_sweep_order() {
        let mut h = hv(3, LRU);
        let mut env = FakeEnv::new();
        for g in 0..3 {
            h.first_touch(0, Gpp(g), &mut env).unwrap();
        }
        // Pages 0 and 1 referenced, 2 not: CLOCK clears 0 and 1, takes 2.
        env.set.insert((0, 0));
        env.set.insert((0, 1));
        let plan = h.demand_fault(0, Gpp(9), Spp(40), &mut env).unwrap();
        assert_eq!(plan.evictions.len(), 1);
        assert_eq!(plan.evictions[0].gpp, Gpp(2));
        assert!(
            !env.access_get(0, Gpp(0)) && !env.access_get(0, Gpp(1)),
            "second chances consumed"
        );
        // Promotion reuses the vacated frame.
        assert_eq!(plan.promotion.to, plan.evictions[0].from);
        assert_eq!(plan.promotion.from, Spp(40));

        // All bits set: one full lap clears them, then the hand's next
        // stop (page 0: slot after the last victim's) is taken.
        env.set.clear();
        for g in [0u64, 1, 9] {
            env.set.insert((0, g));
        }
        let plan = h.demand_fault(0, Gpp(10), Spp(41), &mut env).unwrap();
        assert_eq!(plan.evictions[0].gpp, Gpp(0), "hand resumed past the old victim");
    }

    #[test]
    fn fifo_ignores_access_bits() {
        let mut h = hv(2, FIFO);
        let mut env = FakeEnv::new();
        h.first_touch(0, Gpp(0), &mut env).unwrap();
        h.first_touch(0, Gpp(1), &mut env).unwrap();
        env.set.insert((0, 0)); // would save page 0 under CLOCK
        let plan = h.demand_fault(0, Gpp(2), Spp(50), &mut env).unwrap();
        assert_eq!(plan.evictions[0].gpp, Gpp(0));
        assert!(env.access_get(0, Gpp(0)), "bit untouched");
    }

    #[test]
    fn clock_matches_reference_second_chance_long_run() {
        // Reference CLOCK over the same slot order as the pool's ring.
        let frames = 4u64;
        let mut h = hv(frames, LRU);
        let mut env = FakeEnv::new();
        for g in 0..frames {
            h.first_touch(0, Gpp(g), &mut env).unwrap();
        }
        let mut slots: Vec<u64> = (0..frames).collect(); // slot -> gpp
        let mut hand = 0usize;
        let mut next_gpp = 100u64;
        for step in 0..200u64 {
            // Deterministically vary which pages look referenced.
            env.set.clear();
            for g in slots.iter() {
                if (g + step) % 3 == 0 {
                    env.set.insert((0, *g));
                }
            }
            let mut ref_bits: HashSet<u64> = env.set.iter().map(|(_, g)| *g).collect();
            // Reference victim.
            let victim_slot = loop {
                let s = hand;
                hand = (hand + 1) % frames as usize;
                if ref_bits.contains(&slots[s]) {
                    ref_bits.remove(&slots[s]);
                    continue;
                }
                break s;
            };
            let expect_victim = slots[victim_slot];
            let plan = h.demand_fault(0, Gpp(next_gpp), Spp(60), &mut env).unwrap();
            assert_eq!(plan.evictions[0].gpp, Gpp(expect_victim), "step {step}");
            slots[victim_slot] = next_gpp;
            next_gpp += 1;
        }
    }

    #[test]
    fn promotion_recycles_slow_frames_lifo() {
        let mut h = hv(1, LRU);
        let mut env = FakeEnv::new();
        h.first_touch(0, Gpp(0), &mut env).unwrap();
        let (s1, fast) = h.first_touch(0, Gpp(1), &mut env).unwrap();
        assert!(!fast);
        let plan = h.demand_fault(0, Gpp(1), s1, &mut env).unwrap();
        // Page 0 went out; the slow frame it landed in is fresh, while the
        // promoted page's old frame is now free for the next eviction.
        let out = plan.evictions[0].to;
        assert_ne!(out, s1, "victim cannot land in the frame being vacated");
        let plan2 = h.demand_fault(0, Gpp(0), out, &mut env).unwrap();
        assert_eq!(plan2.evictions[0].to, s1, "LIFO reuse of the freed slow frame");
    }

    #[test]
    fn prefetch_fills_only_free_frames_with_slow_residents() {
        let mut h = Hypervisor::new(
            PagingConfig {
                policy: PagingPolicy { order: EvictOrder::Lru, daemon: false, prefetch: 4 },
                ..Default::default()
            },
            3,
        );
        let mut env = FakeEnv::new();
        // Slow-resident pages 20..23; page 24 unmapped; pool empty.
        for (i, g) in (20..24).enumerate() {
            env.slow.insert(g, Spp(40 + i as u64));
        }
        let cur = env.slow.remove(&20).unwrap();
        let plan = h.demand_fault(0, Gpp(20), cur, &mut env).unwrap();
        assert!(plan.evictions.is_empty());
        // Three frames: one for the fault, two for prefetches 21 and 22;
        // 23 does not fit, 24 was never a candidate.
        let got: Vec<u64> = plan.prefetches.iter().map(|p| p.gpp.0).collect();
        assert_eq!(got, vec![21, 22]);
        assert_eq!(h.stats.prefetches, 2);
        assert_eq!(h.free_frames(), 0);
    }

    #[test]
    fn daemon_restores_high_watermark() {
        let mut h = Hypervisor::new(
            PagingConfig {
                policy: PagingPolicy { order: EvictOrder::Lru, daemon: true, prefetch: 0 },
                low_watermark: 2,
                high_watermark: 4,
                ..Default::default()
            },
            6,
        );
        let mut env = FakeEnv::new();
        for g in 0..5 {
            h.first_touch(0, Gpp(g), &mut env).unwrap();
        }
        assert_eq!(h.free_frames(), 1);
        let moves = h.daemon_tick(&mut env).unwrap();
        assert_eq!(moves.len(), 3, "evict until high watermark");
        assert_eq!(h.free_frames(), 4);
        assert_eq!(h.stats.daemon_migrations, 3);
        // Above the low mark: the daemon does nothing.
        let moves = h.daemon_tick(&mut env).unwrap();
        assert!(moves.is_empty());
    }

    #[test]
    fn daemon_disabled_never_moves_pages() {
        let mut h = hv(2, LRU); // low=1, high=2, daemon off
        let mut env = FakeEnv::new();
        h.first_touch(0, Gpp(0), &mut env).unwrap();
        h.first_touch(0, Gpp(1), &mut env).unwrap();
        assert!(h.daemon_tick(&mut env).unwrap().is_empty());
    }

    #[test]
    fn bandwidth_queue_serializes_transfers() {
        let mut b = BandwidthBucket::new(8);
        assert_eq!(b.transfer(100, 64), 108);
        assert_eq!(b.transfer(100, 64), 116, "second transfer queues behind the first");
        assert_eq!(b.transfer(1000, 8), 1001, "idle gap resets the queue");

        let mut ch = MemChannels::new(32, 8);
        // 4096 bytes: 128 cycles on the fast channel, 512 on the slow one.
        assert_eq!(ch.copy_page(0), 512);
        assert_eq!(ch.copy_page(0), 1024, "slow channel is the bottleneck");
    }
}
