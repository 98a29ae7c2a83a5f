//! Per-CPU translation structures: two TLB levels keyed by guest-virtual
//! page, a nested TLB keyed by guest-physical page, and an MMU
//! paging-structure cache keyed by guest-virtual prefix.
//!
//! Every entry carries a co-tag (short slice of the page-table-entry
//! address it was filled from) plus, as simulator-side metadata, the full
//! fill-source address — the ground truth that aliasing and soundness
//! oracles compare the hardware-visible co-tag behavior against.
//!
//! All structures use true LRU (a monotonic stamp per cache) within a set;
//! the nested TLB and MMU cache are fully associative. Entries are either
//! valid or absent; invalidation removes them.

use crate::addr::{CoTag, Gpp, Gvp, Spa, Spp};
use crate::config::TstructConfig;

/// Which structure a statistic or invalidation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructKind {
    L1Tlb,
    L2Tlb,
    NTlb,
    MmuCache,
}

pub trait TsKey: Copy + Eq {
    /// Bits used for set selection (masked by the set count).
    fn index_bits(&self) -> u64;
}

/// TLB key: one translation per (vm, guest-virtual page).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbKey {
    pub vm: u16,
    pub gvp: Gvp,
}

impl TsKey for TlbKey {
    fn index_bits(&self) -> u64 {
        self.gvp.0
    }
}

/// Nested-TLB key: one translation per (vm, guest-physical page).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NtlbKey {
    pub vm: u16,
    pub gpp: Gpp,
}

impl TsKey for NtlbKey {
    fn index_bits(&self) -> u64 {
        self.gpp.0
    }
}

/// MMU-cache key: a guest-virtual prefix. `level` is the table level of the
/// entry cached (4, 3 or 2); `prefix` is the VPN shifted so only the
/// indices from the root down to that level remain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmuKey {
    pub vm: u16,
    pub level: u8,
    pub prefix: u64,
}

impl TsKey for MmuKey {
    fn index_bits(&self) -> u64 {
        self.prefix
    }
}

/// What a TLB entry resolves to, plus the walk metadata later events need:
/// the data guest-physical page (fault handling), the guest leaf address
/// (dirty-bit upkeep on stores) and a cached dirty summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbPayload {
    pub spp: Spp,
    pub gpp: Gpp,
    pub guest_leaf: Spa,
    pub dirty: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TsEntry<K, P> {
    pub key: K,
    pub value: P,
    pub cotag: CoTag,
    /// Full address of the page-table entry this was filled from
    /// (simulator metadata; hardware only keeps `cotag`).
    pub src: Spa,
    stamp: u64,
}

/// Hit/miss/invalidation counters for one structure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TsStats {
    pub hits: u64,
    pub misses: u64,
    pub fills: u64,
    pub evictions: u64,
    /// Entries removed by co-tag (or exact-source) invalidations.
    pub selective_invalidated: u64,
    /// Entries removed by whole-structure flushes.
    pub flush_invalidated: u64,
    /// Entries compared during CAM invalidation probes (energy accounting).
    pub cam_scanned: u64,
}

/// One set-associative (or fully-associative) translation cache.
#[derive(Debug, Clone)]
pub struct TsCache<K, P> {
    sets: Vec<Vec<TsEntry<K, P>>>,
    ways: usize,
    stamp: u64,
    pub stats: TsStats,
}

impl<K: TsKey, P: Copy> TsCache<K, P> {
    /// `entries` total capacity over `ways`-way sets; `ways == entries`
    /// makes the structure fully associative.
    pub fn new(entries: usize, ways: usize) -> Self {
        assert!(entries > 0 && ways > 0 && entries % ways == 0);
        let sets = entries / ways;
        assert!(sets.is_power_of_two(), "set count must be a power of two");
        TsCache { sets: vec![Vec::new(); sets], ways, stamp: 0, stats: TsStats::default() }
    }

    fn set_of(&self, key: &K) -> usize {
        (key.index_bits() as usize) & (self.sets.len() - 1)
    }

    pub fn capacity(&self) -> usize {
        self.sets.len() * self.ways
    }

    /// Probe for `key`, refreshing LRU and counting hit/miss.
    pub fn lookup(&mut self, key: K) -> Option<TsEntry<K, P>> {
        let set = self.set_of(&key);
        self.stamp += 1;
        let stamp = self.stamp;
        match self.sets[set].iter_mut().find(|e| e.key == key) {
            Some(e) => {
                e.stamp = stamp;
                self.stats.hits += 1;
                Some(*e)
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    /// Probe without touching LRU or statistics (oracles, scans).
    pub fn peek(&self, key: K) -> Option<&TsEntry<K, P>> {
        self.sets[self.set_of(&key)].iter().find(|e| e.key == key)
    }

    /// Mutate the payload of a resident entry in place (dirty-bit upkeep).
    pub fn update(&mut self, key: K, f: impl FnOnce(&mut P)) {
        let set = self.set_of(&key);
        if let Some(e) = self.sets[set].iter_mut().find(|e| e.key == key) {
            f(&mut e.value);
        }
    }

    /// Insert a translation, replacing any entry with the same key (a key
    /// is never duplicated) and evicting true-LRU within the set when full.
    /// Returns the evicted entry, if any.
    pub fn fill(&mut self, key: K, value: P, cotag: CoTag, src: Spa) -> Option<TsEntry<K, P>> {
        let set = self.set_of(&key);
        self.stamp += 1;
        let entry = TsEntry { key, value, cotag, src, stamp: self.stamp };
        self.stats.fills += 1;
        let ways = self.ways;
        let slot = &mut self.sets[set];
        if let Some(e) = slot.iter_mut().find(|e| e.key == key) {
            *e = entry;
            return None;
        }
        let evicted = if slot.len() == ways {
            let (victim, _) = slot
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.stamp)
                .expect("full set has a victim");
            self.stats.evictions += 1;
            Some(slot.swap_remove(victim))
        } else {
            None
        };
        slot.push(entry);
        evicted
    }

    /// CAM invalidation: drop every entry whose co-tag matches `class` at
    /// line granularity. Returns the number invalidated; all valid entries
    /// are compared (counted for energy).
    pub fn invalidate_class(&mut self, class: u32) -> u64 {
        let mut dropped = 0;
        for set in &mut self.sets {
            self.stats.cam_scanned += set.len() as u64;
            set.retain(|e| {
                let gone = e.cotag.line_class() == class;
                dropped += gone as u64;
                !gone
            });
        }
        self.stats.selective_invalidated += dropped;
        dropped
    }

    /// Oracle-precision invalidation: drop entries whose fill source lies in
    /// `line` (ideal mode; no CAM energy).
    pub fn invalidate_src_line(&mut self, line: crate::addr::LineAddr) -> u64 {
        let mut dropped = 0;
        for set in &mut self.sets {
            set.retain(|e| {
                let gone = e.src.line() == line;
                dropped += gone as u64;
                !gone
            });
        }
        self.stats.selective_invalidated += dropped;
        dropped
    }

    /// Drop everything. Returns how many valid entries were lost.
    pub fn flush(&mut self) -> u64 {
        let mut dropped = 0;
        for set in &mut self.sets {
            dropped += set.len() as u64;
            set.clear();
        }
        self.stats.flush_invalidated += dropped;
        dropped
    }

    pub fn valid_count(&self) -> u64 {
        self.sets.iter().map(|s| s.len() as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TsEntry<K, P>> {
        self.sets.iter().flatten()
    }
}

/// Counts of entries removed from each structure by one fanout/flush.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InvalidationCounts {
    pub l1_tlb: u64,
    pub l2_tlb: u64,
    pub ntlb: u64,
    pub mmu: u64,
}

impl InvalidationCounts {
    pub fn total(&self) -> u64 {
        self.l1_tlb + self.l2_tlb + self.ntlb + self.mmu
    }

    pub fn merge(&mut self, other: InvalidationCounts) {
        self.l1_tlb += other.l1_tlb;
        self.l2_tlb += other.l2_tlb;
        self.ntlb += other.ntlb;
        self.mmu += other.mmu;
    }
}

/// The full translation-structure complement of one CPU.
#[derive(Debug, Clone)]
pub struct Tstructs {
    pub l1_tlb: TsCache<TlbKey, TlbPayload>,
    pub l2_tlb: TsCache<TlbKey, TlbPayload>,
    pub ntlb: TsCache<NtlbKey, Spp>,
    pub mmu: TsCache<MmuKey, Spp>,
}

/// Which level served a TLB lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlbHitLevel {
    L1,
    L2,
}

impl Tstructs {
    pub fn new(cfg: &TstructConfig) -> Self {
        let m = cfg.size_mult;
        Tstructs {
            l1_tlb: TsCache::new(cfg.l1_tlb_entries * m, cfg.l1_tlb_ways),
            l2_tlb: TsCache::new(cfg.l2_tlb_entries * m, cfg.l2_tlb_ways),
            ntlb: TsCache::new(cfg.ntlb_entries * m, cfg.ntlb_entries * m),
            mmu: TsCache::new(cfg.mmu_cache_entries * m, cfg.mmu_cache_entries * m),
        }
    }

    /// Probe L1 then L2; an L2 hit is promoted into L1.
    pub fn lookup_translation(
        &mut self,
        vm: u16,
        gvp: Gvp,
    ) -> Option<(TlbHitLevel, TsEntry<TlbKey, TlbPayload>)> {
        let key = TlbKey { vm, gvp };
        if let Some(e) = self.l1_tlb.lookup(key) {
            return Some((TlbHitLevel::L1, e));
        }
        if let Some(e) = self.l2_tlb.lookup(key) {
            self.l1_tlb.fill(key, e.value, e.cotag, e.src);
            // The promotion is a move between levels, not a new translation.
            self.l1_tlb.stats.fills -= 1;
            return Some((TlbHitLevel::L2, e));
        }
        None
    }

    /// Install a walked translation into both TLB levels.
    pub fn fill_tlb(&mut self, key: TlbKey, payload: TlbPayload, cotag: CoTag, src: Spa) {
        self.l1_tlb.fill(key, payload, cotag, src);
        self.l2_tlb.fill(key, payload, cotag, src);
    }

    /// Record that the leaf dirty bits behind a translation are now set.
    pub fn mark_dirty(&mut self, key: TlbKey) {
        self.l1_tlb.update(key, |p| p.dirty = true);
        self.l2_tlb.update(key, |p| p.dirty = true);
    }

    /// Selective co-tag invalidation across every structure (hatric).
    pub fn invalidate_class_all(&mut self, class: u32) -> InvalidationCounts {
        InvalidationCounts {
            l1_tlb: self.l1_tlb.invalidate_class(class),
            l2_tlb: self.l2_tlb.invalidate_class(class),
            ntlb: self.ntlb.invalidate_class(class),
            mmu: self.mmu.invalidate_class(class),
        }
    }

    /// Co-tag invalidation of the TLBs plus wholesale flush of the MMU
    /// cache and nested TLB (tlb-only designs lack reverse lookups there).
    pub fn invalidate_tlb_class_flush_rest(&mut self, class: u32) -> InvalidationCounts {
        InvalidationCounts {
            l1_tlb: self.l1_tlb.invalidate_class(class),
            l2_tlb: self.l2_tlb.invalidate_class(class),
            ntlb: self.ntlb.flush(),
            mmu: self.mmu.flush(),
        }
    }

    /// Exact-source invalidation (ideal mode).
    pub fn invalidate_src_line_all(&mut self, line: crate::addr::LineAddr) -> InvalidationCounts {
        InvalidationCounts {
            l1_tlb: self.l1_tlb.invalidate_src_line(line),
            l2_tlb: self.l2_tlb.invalidate_src_line(line),
            ntlb: self.ntlb.invalidate_src_line(line),
            mmu: self.mmu.invalidate_src_line(line),
        }
    }

    /// Full flush of everything (software shootdown).
    pub fn flush_all(&mut self) -> InvalidationCounts {
        InvalidationCounts {
            l1_tlb: self.l1_tlb.flush(),
            l2_tlb: self.l2_tlb.flush(),
            ntlb: self.ntlb.flush(),
            mmu: self.mmu.flush(),
        }
    }

    pub fn valid_total(&self) -> u64 {
        self.l1_tlb.valid_count() + self.l2_tlb.valid_count() + self.ntlb.valid_count() + self.mmu.valid_count()
    }

    /// Entries (across all structures) whose fill source lies in `line`:
    /// the exact stale set of a write to that line.
    pub fn stale_entries_for_line(&self, line: crate::addr::LineAddr) -> u64 {
        self.l1_tlb.iter().filter(|e| e.src.line() == line).count() as u64
            + self.l2_tlb.iter().filter(|e| e.src.line() == line).count() as u64
            + self.ntlb.iter().filter(|e| e.src.line() == line).count() as u64
            + self.mmu.iter().filter(|e| e.src.line() == line).count() as u64
    }

    /// Does any structure hold an entry with this co-tag class (the check a
    /// spurious invalidation runs before demoting the sharer)?
    pub fn holds_class(&self, class: u32) -> bool {
        self.l1_tlb.iter().any(|e| e.cotag.line_class() == class)
            || self.l2_tlb.iter().any(|e| e.cotag.line_class() == class)
            || self.ntlb.iter().any(|e| e.cotag.line_class() == class)
            || self.mmu.iter().any(|e| e.cotag.line_class() == class)
    }

    /// Fill-source lines of every live entry (directory-conservatism scan).
    pub fn live_source_lines(&self) -> Vec<crate::addr::LineAddr> {
        let mut v: Vec<_> = self
            .l1_tlb
            .iter()
            .map(|e| e.src.line())
            .chain(self.l2_tlb.iter().map(|e| e.src.line()))
            .chain(self.ntlb.iter().map(|e| e.src.line()))
            .chain(self.mmu.iter().map(|e| e.src.line()))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::{cotag_of, PTE_BYTES};
    use proptest::prelude::*;

    fn key(gvp: u64) -> TlbKey {
        TlbKey { vm: 0, gvp: Gvp(gvp) }
    }

    fn payload(spp: u64) -> TlbPayload {
        TlbPayload { spp: Spp(spp), gpp: Gpp(spp), guest_leaf: Spa(0), dirty: false }
    }

    fn fill_simple(c: &mut TsCache<TlbKey, TlbPayload>, gvp: u64, src: u64) {
        let src = Spa(src);
        c.fill(key(gvp), payload(gvp), cotag_of(src, 16).unwrap(), src);
    }

    #[test]
    fn true_lru_evicts_least_recent_within_set() {
        // Fully associative, 4 entries.
        let mut c: TsCache<TlbKey, TlbPayload> = TsCache::new(4, 4);
        for g in 0..4 {
            fill_simple(&mut c, g, g * PTE_BYTES);
        }
        // Touch 0 and 2; LRU order is now 1, 3, 0, 2.
        c.lookup(key(0));
        c.lookup(key(2));
        fill_simple(&mut c, 10, 80);
        assert!(c.peek(key(1)).is_none(), "1 was least recently used");
        fill_simple(&mut c, 11, 88);
        assert!(c.peek(key(3)).is_none());
        assert!(c.peek(key(0)).is_some() && c.peek(key(2)).is_some());
        assert_eq!(c.stats.evictions, 2);
    }

    #[test]
    fn set_associative_eviction_stays_within_set() {
        // 4 sets x 2 ways; keys 0,4,8 collide in set 0.
        let mut c: TsCache<TlbKey, TlbPayload> = TsCache::new(8, 2);
        for g in [0u64, 4, 8] {
            fill_simple(&mut c, g, g * PTE_BYTES);
        }
        assert!(c.peek(key(0)).is_none(), "oldest way of set 0 evicted");
        assert!(c.peek(key(4)).is_some() && c.peek(key(8)).is_some());
        // Other sets were never disturbed.
        fill_simple(&mut c, 1, 8);
        assert!(c.peek(key(1)).is_some());
        assert_eq!(c.valid_count(), 3);
    }

    #[test]
    fn duplicate_key_replaces_in_place() {
        let mut c: TsCache<TlbKey, TlbPayload> = TsCache::new(4, 4);
        fill_simple(&mut c, 7, 0x1000);
        fill_simple(&mut c, 7, 0x2000);
        assert_eq!(c.valid_count(), 1);
        assert_eq!(c.peek(key(7)).unwrap().src, Spa(0x2000));
        assert_eq!(c.stats.evictions, 0);
    }

    #[test]
    fn cotag_invalidation_hits_whole_line_and_aliases() {
        let mut ts = Tstructs::new(&TstructConfig::default());
        let width = 16;
        // Two translations filled from the same 64-byte line...
        for (g, src) in [(1u64, 0x1008u64), (2, 0x1038)] {
            let s = Spa(src);
            ts.fill_tlb(key(g), payload(g), cotag_of(s, width).unwrap(), s);
        }
        // ...one from an aliasing line one window (2^(16+3) bytes) away...
        let alias = Spa(0x1008 + (1 << 19));
        ts.fill_tlb(key(3), payload(3), cotag_of(alias, width).unwrap(), alias);
        // ...and one unrelated.
        let other = Spa(0x9000);
        ts.fill_tlb(key(4), payload(4), cotag_of(other, width).unwrap(), other);

        let class = cotag_of(Spa(0x1008), width).unwrap().line_class();
        let n = ts.invalidate_class_all(class);
        // Entries 1, 2 (same line) and 3 (alias) go, in both TLB levels.
        assert_eq!(n.l1_tlb + n.l2_tlb, 6);
        assert!(ts.l1_tlb.peek(key(4)).is_some());
        assert_eq!(ts.l2_tlb.stats.selective_invalidated, 3);
    }

    #[test]
    fn flush_counts_previously_valid_entries() {
        let mut ts = Tstructs::new(&TstructConfig::default());
        for g in 0..5 {
            let s = Spa(0x4000 + g * PTE_BYTES);
            ts.fill_tlb(key(g), payload(g), cotag_of(s, 16).unwrap(), s);
        }
        let n = ts.flush_all();
        assert_eq!(n.l1_tlb, 5);
        assert_eq!(n.l2_tlb, 5);
        assert_eq!(n.ntlb, 0);
        assert_eq!(ts.valid_total(), 0);
        // Flushing empty structures counts nothing.
        assert_eq!(ts.flush_all().total(), 0);
    }

    #[test]
    fn l2_hit_promotes_into_l1() {
        let mut ts = Tstructs::new(&TstructConfig::default());
        let s = Spa(0x1008);
        ts.l2_tlb.fill(key(9), payload(9), cotag_of(s, 16).unwrap(), s);
        let (lvl, e) = ts.lookup_translation(0, Gvp(9)).unwrap();
        assert_eq!(lvl, TlbHitLevel::L2);
        assert_eq!(e.value.spp, Spp(9));
        let (lvl, _) = ts.lookup_translation(0, Gvp(9)).unwrap();
        assert_eq!(lvl, TlbHitLevel::L1);
    }

    #[test]
    fn size_multiplier_scales_capacity() {
        let mut cfg = TstructConfig::default();
        cfg.size_mult = 4;
        let ts = Tstructs::new(&cfg);
        assert_eq!(ts.l1_tlb.capacity(), 256);
        assert_eq!(ts.l2_tlb.capacity(), 2048);
        assert_eq!(ts.ntlb.capacity(), 128);
        assert_eq!(ts.mmu.capacity(), 192);
    }

    proptest! {
        /// Soundness: invalidating by the class of any entry address within
        /// a line removes at least every entry filled from that line, and
        /// only entries sharing the class (selectivity).
        #[test]
        fn cotag_invalidation_sound_and_selective(
            srcs in prop::collection::vec((0u64..(1 << 22), 0u64..8), 1..40),
            victim in 0usize..40,
            width in prop::sample::select(vec![8u32, 16, 24]),
        ) {
            let mut c: TsCache<TlbKey, TlbPayload> = TsCache::new(64, 64);
            let mut fills = Vec::new();
            for (i, (lineish, entry)) in srcs.iter().enumerate() {
                let spa = Spa((lineish << 6) + entry * PTE_BYTES);
                c.fill(key(i as u64), payload(i as u64), cotag_of(spa, width).unwrap(), spa);
                fills.push((key(i as u64), spa));
            }
            let (_, victim_spa) = fills[victim % fills.len()];
            let line = victim_spa.line();
            let class = cotag_of(victim_spa, width).unwrap().line_class();
            // Brute-force oracle over what was resident *before*.
            let resident: Vec<_> = c.iter().map(|e| (e.key, e.src)).collect();
            let must_die: Vec<_> = resident.iter().filter(|(_, s)| s.line() == line).map(|(k, _)| *k).collect();
            let may_die: Vec<_> = resident
                .iter()
                .filter(|(_, s)| cotag_of(*s, width).unwrap().line_class() == class)
                .map(|(k, _)| *k)
                .collect();
            let n = c.invalidate_class(class);
            for k in &must_die {
                prop_assert!(c.peek(*k).is_none(), "entry filled from written line survived");
            }
            prop_assert_eq!(n as usize, may_die.len());
            for (k, _) in &resident {
                if !may_die.contains(k) {
                    prop_assert!(c.peek(*k).is_some(), "unrelated entry was invalidated");
                }
            }
        }

        /// A key never appears twice, whatever the fill sequence.
        #[test]
        fn no_duplicate_keys(ops in prop::collection::vec((0u64..16, 0u64..64), 0..200)) {
            let mut c: TsCache<TlbKey, TlbPayload> = TsCache::new(8, 2);
            for (g, src8) in ops {
                let spa = Spa(src8 * PTE_BYTES);
                c.fill(key(g), payload(g), cotag_of(spa, 16).unwrap(), spa);
                let mut keys: Vec<_> = c.iter().map(|e| e.key.gvp.0).collect();
                keys.sort_unstable();
                let before = keys.len();
                keys.dedup();
                prop_assert_eq!(before, keys.len());
                prop_assert!(c.valid_count() <= 8);
            }
        }

        /// True-LRU agrees with a reference model (fully associative case).
        #[test]
        fn lru_matches_reference(ops in prop::collection::vec((any::<bool>(), 0u64..12), 1..300)) {
            let mut c: TsCache<TlbKey, TlbPayload> = TsCache::new(4, 4);
            let mut reference: Vec<u64> = Vec::new(); // most recent last
            for (is_fill, g) in ops {
                if is_fill {
                    c.fill(key(g), payload(g), CoTag(0), Spa(0));
                    if let Some(pos) = reference.iter().position(|&x| x == g) {
                        reference.remove(pos);
                    } else if reference.len() == 4 {
                        reference.remove(0);
                    }
                    reference.push(g);
                } else {
                    let hit = c.lookup(key(g)).is_some();
                    let rhit = reference.iter().position(|&x| x == g);
                    prop_assert_eq!(hit, rhit.is_some());
                    if let Some(pos) = rhit {
                        reference.remove(pos);
                        reference.push(g);
                    }
                }
                let mut have: Vec<u64> = c.iter().map(|e| e.key.gvp.0).collect();
                have.sort_unstable();
                let mut want = reference.clone();
                want.sort_unstable();
                prop_assert_eq!(have, want);
            }
        }
    }
}
