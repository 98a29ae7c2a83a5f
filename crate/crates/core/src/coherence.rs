//! Cache hierarchy and directory coherence.
//!
//! Each CPU has a private L1 (presence only) inside a private, inclusive L2
//! that carries the MESI state. A shared last-level cache filters memory
//! latency, and a directory tracks, per line: the sharer bitmask, the
//! exclusive owner, and two flags saying whether the line has served guest
//! or nested page-table walks. Directory entries may live in a finite
//! set-associative array; evicting one back-invalidates every sharer so the
//! tracked-superset invariant survives.
//!
//! Sharer lists are maintained lazily: clean cache evictions are silent, so
//! bits can go stale. A stale bit costs a spurious invalidation later; the
//! receiving side may then ask to be demoted off the list. Page-table lines
//! additionally keep their sharer bit across dirty evictions, because a CPU
//! whose *cache* dropped the line may still hold translations minted from
//! it.
//!
//! Walker-tagged requests set the page-table flags: for free when the
//! request reaches the directory, via an explicit mark message when the
//! walker hits a private line not yet hinted locally (each L2 line carries
//! local guest/nested hint bits so stores can tell they are overwriting
//! translation-bearing lines without asking the directory).

use crate::addr::LineAddr;
use crate::config::{CacheConfig, DirectoryConfig};
use crate::pagetable::PtKind;
use std::collections::HashMap;

/// MESI state of a line in a private L2. Invalid lines are simply absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MesiState {
    Modified,
    Exclusive,
    Shared,
}

/// Where a request was satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitSource {
    L1,
    L2,
    Llc,
    /// Fetched from another CPU's private cache (the owner).
    Remote(u16),
    Dram,
}

/// Dir-eviction fallout: these CPUs lost their cached copies of `line`, and
/// any translations minted from it must go too (the flags say which kinds
/// the line ever served).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackInv {
    pub line: LineAddr,
    pub cpus: Vec<u16>,
    pub gpt: bool,
    pub npt: bool,
}

#[derive(Debug, Clone)]
pub struct ReadOutcome {
    pub source: HitSource,
    /// Walker hit a private line whose local hint was clear: an explicit
    /// directory mark message is owed.
    pub needs_walker_mark: bool,
    pub back_invs: Vec<BackInv>,
}

/// One recipient of a write's invalidation fanout, with everything the
/// translation-coherence policy needs to decide what to probe there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InvTarget {
    pub cpu: u16,
    /// The target actually held the line in its cache.
    pub had_cache_copy: bool,
    /// Local page-table hints of the target's copy (false when no copy).
    pub local_gpt: bool,
    pub local_npt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteKind {
    /// Already Modified locally: no traffic at all.
    LocalM,
    /// Exclusive locally: silent upgrade to Modified.
    SilentUpgrade,
    /// Shared locally: ownership request, fanout to other sharers.
    Upgrade,
    /// Not cached: fetch for ownership.
    Miss,
}

#[derive(Debug, Clone)]
pub struct WriteOutcome {
    pub kind: WriteKind,
    pub source: HitSource,
    pub targets: Vec<InvTarget>,
    /// Directory page-table flags for the line (as known when the write
    /// reached the directory; both false for local hits).
    pub dir_gpt: bool,
    pub dir_npt: bool,
    pub needs_walker_mark: bool,
    pub back_invs: Vec<BackInv>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CohStats {
    pub reads: u64,
    pub writes: u64,
    pub l1_hits: u64,
    pub l2_hits: u64,
    pub llc_hits: u64,
    pub remote_fetches: u64,
    pub dram_fetches: u64,
    pub invalidations_sent: u64,
    pub upgrades: u64,
    pub silent_upgrades: u64,
    pub writebacks: u64,
    pub dir_evictions: u64,
    pub back_inv_purges: u64,
    pub walker_marks_piggybacked: u64,
    pub walker_mark_messages: u64,
    pub sharer_demotions: u64,
    pub messages: u64,
}

/// Private-cache line metadata.
#[derive(Debug, Clone, Copy)]
struct L2Line {
    state: MesiState,
    /// Local page-table hints: a walker of this kind touched this copy.
    gpt: bool,
    npt: bool,
}

/// Set-associative array with true-LRU replacement, keyed by line address.
#[derive(Debug, Clone)]
struct Assoc<V> {
    sets: Vec<Vec<(u64, V, u64)>>,
    ways: usize,
    tick: u64,
}

impl<V> Assoc<V> {
    fn new(lines: usize, ways: usize) -> Self {
        assert!(lines >= ways && lines % ways == 0, "cache geometry");
        Assoc { sets: (0..lines / ways).map(|_| Vec::new()).collect(), ways, tick: 0 }
    }

    fn set_of(&self, line: u64) -> usize {
        (line % self.sets.len() as u64) as usize
    }

    fn get(&mut self, line: u64) -> Option<&mut V> {
        self.tick += 1;
        let tick = self.tick;
        let set = self.set_of(line);
        self.sets[set].iter_mut().find(|(l, _, _)| *l == line).map(|(_, v, stamp)| {
            *stamp = tick;
            v
        })
    }

    fn peek(&self, line: u64) -> Option<&V> {
        let set = self.set_of(line);
        self.sets[set].iter().find(|(l, _, _)| *l == line).map(|(_, v, _)| v)
    }

    fn contains(&self, line: u64) -> bool {
        self.peek(line).is_some()
    }

    /// Insert (replacing any same-line slot); returns the LRU victim if the
    /// set was full.
    fn insert(&mut self, line: u64, v: V) -> Option<(u64, V)> {
        self.tick += 1;
        let tick = self.tick;
        let ways = self.ways;
        let si = self.set_of(line);
        let set = &mut self.sets[si];
        if let Some(slot) = set.iter_mut().find(|(l, _, _)| *l == line) {
            slot.1 = v;
            slot.2 = tick;
            return None;
        }
        let victim = if set.len() == ways {
            let (i, _) = set.iter().enumerate().min_by_key(|(_, (_, _, s))| *s).expect("full set");
            let (vl, vv, _) = set.swap_remove(i);
            Some((vl, vv))
        } else {
            None
        };
        set.push((line, v, tick));
        victim
    }

    fn remove(&mut self, line: u64) -> Option<V> {
        let set = self.set_of(line);
        let i = self.sets[set].iter().position(|(l, _, _)| *l == line)?;
        Some(self.sets[set].swap_remove(i).1)
    }

    fn iter(&self) -> impl Iterator<Item = (u64, &V)> {
        self.sets.iter().flatten().map(|(l, v, _)| (*l, v))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct DirEntry {
    sharers: u64,
    owner: Option<u16>,
    gpt: bool,
    npt: bool,
}

#[derive(Debug)]
enum DirStore {
    Infinite(HashMap<u64, DirEntry>),
    Finite(Assoc<DirEntry>),
}

#[derive(Debug)]
struct Directory {
    store: DirStore,
}

impl Directory {
    fn new(cfg: &DirectoryConfig, cpus: usize, l2_lines: usize) -> Self {
        let store = if cfg.infinite {
            DirStore::Infinite(HashMap::new())
        } else {
            let capacity = (cfg.capacity_mult * cpus * l2_lines).max(cfg.ways);
            let capacity = capacity - capacity % cfg.ways;
            DirStore::Finite(Assoc::new(capacity, cfg.ways))
        };
        Directory { store }
    }

    fn get_mut(&mut self, line: u64) -> Option<&mut DirEntry> {
        match &mut self.store {
            DirStore::Infinite(m) => m.get_mut(&line),
            DirStore::Finite(a) => a.get(line),
        }
    }

    fn peek(&self, line: u64) -> Option<&DirEntry> {
        match &self.store {
            DirStore::Infinite(m) => m.get(&line),
            DirStore::Finite(a) => a.peek(line),
        }
    }

    /// Get-or-create; a finite directory may evict another entry to make
    /// room, which the caller must back-invalidate.
    fn ensure(&mut self, line: u64) -> (&mut DirEntry, Option<(u64, DirEntry)>) {
        match &mut self.store {
            DirStore::Infinite(m) => (m.entry(line).or_default(), None),
            DirStore::Finite(a) => {
                if a.contains(line) {
                    return (a.get(line).expect("present"), None);
                }
                let evicted = a.insert(line, DirEntry::default());
                (a.get(line).expect("just inserted"), evicted)
            }
        }
    }

    fn remove(&mut self, line: u64) {
        match &mut self.store {
            DirStore::Infinite(m) => {
                m.remove(&line);
            }
            DirStore::Finite(a) => {
                a.remove(line);
            }
        }
    }
}

/// The full coherence fabric: private caches, shared LLC, directory.
#[derive(Debug)]
pub struct Coherence {
    cpus: usize,
    l1: Vec<Assoc<()>>,
    l2: Vec<Assoc<L2Line>>,
    llc: Assoc<()>,
    dir: Directory,
    pub stats: CohStats,
}

impl Coherence {
    pub fn new(cpus: usize, cache: &CacheConfig, dir: &DirectoryConfig) -> Self {
        Coherence {
            cpus,
            l1: (0..cpus).map(|_| Assoc::new(cache.l1_lines, cache.l1_ways)).collect(),
            l2: (0..cpus).map(|_| Assoc::new(cache.l2_lines, cache.l2_ways)).collect(),
            llc: Assoc::new(cache.llc_lines, cache.llc_ways),
            dir: Directory::new(dir, cpus, cache.l2_lines),
            stats: CohStats::default(),
        }
    }

    pub fn cpu_count(&self) -> usize {
        self.cpus
    }

    /// Read `line` at `cpu`. `walker` tags page-table-walk reads with the
    /// table dimension they serve.
    pub fn cpu_read(&mut self, cpu: usize, line: LineAddr, walker: Option<PtKind>) -> ReadOutcome {
        self.stats.reads += 1;
        let l = line.0;

        // Private hits.
        if self.l1[cpu].get(l).is_some() {
            self.stats.l1_hits += 1;
            let needs_mark = self.note_local_walk(cpu, l, walker);
            self.l2[cpu].get(l); // keep L2 recency in step
            return ReadOutcome { source: HitSource::L1, needs_walker_mark: needs_mark, back_invs: vec![] };
        }
        if self.l2[cpu].contains(l) {
            self.stats.l2_hits += 1;
            let needs_mark = self.note_local_walk(cpu, l, walker);
            self.l2[cpu].get(l);
            self.fill_l1(cpu, l);
            return ReadOutcome { source: HitSource::L2, needs_walker_mark: needs_mark, back_invs: vec![] };
        }

        // Miss: consult the directory.
        let mut back_invs = Vec::new();
        let (evicted, others, owner) = {
            let (entry, evicted) = self.dir.ensure(l);
            if let Some(kind) = walker {
                let flag = match kind {
                    PtKind::Guest => &mut entry.gpt,
                    PtKind::Nested => &mut entry.npt,
                };
                if !*flag {
                    *flag = true;
                    // Piggybacked on the demand request: free.
                }
            }
            if walker.is_some() {
                self.stats.walker_marks_piggybacked += 1;
            }
            let others = entry.sharers & !(1u64 << cpu);
            (evicted, others, entry.owner)
        };
        if let Some((vl, ve)) = evicted {
            back_invs.push(self.back_invalidate(vl, ve));
        }
        self.stats.messages += 2; // request + data/ack

        let source = if let Some(o) = owner.filter(|&o| o as usize != cpu) {
            // Owner forwards the data and demotes to Shared.
            self.stats.remote_fetches += 1;
            self.stats.messages += 2;
            if let Some(ol) = self.l2[o as usize].get(l) {
                if ol.state == MesiState::Modified {
                    self.stats.writebacks += 1;
                    self.llc.insert(l, ());
                }
                ol.state = MesiState::Shared;
            }
            let e = self.dir.get_mut(l).expect("entry ensured above");
            e.owner = None;
            HitSource::Remote(o)
        } else if self.llc.get(l).is_some() {
            self.stats.llc_hits += 1;
            HitSource::Llc
        } else {
            self.stats.dram_fetches += 1;
            self.llc.insert(l, ());
            HitSource::Dram
        };

        let state = if others == 0 && owner.is_none() {
            let e = self.dir.get_mut(l).expect("entry ensured above");
            e.owner = Some(cpu as u16);
            MesiState::Exclusive
        } else {
            MesiState::Shared
        };
        {
            let e = self.dir.get_mut(l).expect("entry ensured above");
            e.sharers |= 1u64 << cpu;
        }
        let (gpt, npt) = match walker {
            Some(PtKind::Guest) => (true, false),
            Some(PtKind::Nested) => (false, true),
            None => (false, false),
        };
        self.fill_l2(cpu, l, L2Line { state, gpt, npt });
        self.fill_l1(cpu, l);
        ReadOutcome { source, needs_walker_mark: false, back_invs }
    }

    /// Write `line` at `cpu`.
    pub fn cpu_write(&mut self, cpu: usize, line: LineAddr, walker: Option<PtKind>) -> WriteOutcome {
        self.stats.writes += 1;
        let l = line.0;

        if let Some(local) = self.l2[cpu].get(l).copied() {
            match local.state {
                MesiState::Modified | MesiState::Exclusive => {
                    let kind = if local.state == MesiState::Modified {
                        WriteKind::LocalM
                    } else {
                        self.stats.silent_upgrades += 1;
                        WriteKind::SilentUpgrade
                    };
                    let needs_mark = self.note_local_walk(cpu, l, walker);
                    self.l2[cpu].get(l).expect("hit above").state = MesiState::Modified;
                    self.fill_l1(cpu, l);
                    return WriteOutcome {
                        kind,
                        source: HitSource::L2,
                        targets: vec![],
                        dir_gpt: false,
                        dir_npt: false,
                        needs_walker_mark: needs_mark,
                        back_invs: vec![],
                    };
                }
                MesiState::Shared => {
                    // Ownership upgrade: invalidate the other sharers.
                    self.stats.upgrades += 1;
                    let needs_mark = self.note_local_walk(cpu, l, walker);
                    let (dir_gpt, dir_npt, targets) = self.fanout(cpu, l, walker);
                    self.l2[cpu].get(l).expect("hit above").state = MesiState::Modified;
                    self.fill_l1(cpu, l);
                    return WriteOutcome {
                        kind: WriteKind::Upgrade,
                        source: HitSource::L2,
                        targets,
                        dir_gpt,
                        dir_npt,
                        needs_walker_mark: needs_mark,
                        back_invs: vec![],
                    };
                }
            }
        }

        // Write miss: fetch for ownership.
        let mut back_invs = Vec::new();
        let evicted = {
            let (_, evicted) = self.dir.ensure(l);
            evicted
        };
        if let Some((vl, ve)) = evicted {
            back_invs.push(self.back_invalidate(vl, ve));
        }
        let owner = self.dir.peek(l).expect("ensured").owner;
        let source = if let Some(o) = owner.filter(|&o| o as usize != cpu) {
            self.stats.remote_fetches += 1;
            self.stats.messages += 2;
            if let Some(ol) = self.l2[o as usize].peek(l) {
                if ol.state == MesiState::Modified {
                    self.stats.writebacks += 1;
                }
            }
            HitSource::Remote(o)
        } else if self.llc.get(l).is_some() {
            self.stats.llc_hits += 1;
            HitSource::Llc
        } else {
            self.stats.dram_fetches += 1;
            self.llc.insert(l, ());
            HitSource::Dram
        };
        self.stats.messages += 2;
        let (dir_gpt, dir_npt, targets) = self.fanout(cpu, l, walker);
        let (gpt, npt) = match walker {
            Some(PtKind::Guest) => (true, false),
            Some(PtKind::Nested) => (false, true),
            None => (false, false),
        };
        if walker.is_some() {
            self.stats.walker_marks_piggybacked += 1;
        }
        self.fill_l2(cpu, l, L2Line { state: MesiState::Modified, gpt, npt });
        self.fill_l1(cpu, l);
        WriteOutcome {
            kind: WriteKind::Miss,
            source,
            targets,
            dir_gpt,
            dir_npt,
            needs_walker_mark: false,
            back_invs,
        }
    }

    /// Explicit directory mark: a walker used a privately cached line the
    /// directory did not yet know carries page-table entries.
    pub fn walker_mark(&mut self, line: LineAddr, kind: PtKind) {
        self.stats.walker_mark_messages += 1;
        self.stats.messages += 1;
        let (entry, evicted) = self.dir.ensure(line.0);
        match kind {
            PtKind::Guest => entry.gpt = true,
            PtKind::Nested => entry.npt = true,
        }
        debug_assert!(evicted.is_none(), "marked lines are locally cached, so tracked");
        if let Some((vl, ve)) = evicted {
            // Unreachable in practice (the marking CPU holds the line, so
            // the entry exists), but keep the invariant if it ever fires.
            self.back_invalidate(vl, ve);
        }
    }

    /// Directory flags for a line, if tracked.
    pub fn pt_flags(&self, line: LineAddr) -> (bool, bool) {
        self.dir.peek(line.0).map_or((false, false), |e| (e.gpt, e.npt))
    }

    /// Debug oracle: the tracking plane covers `line` as a live translation
    /// source at `cpu` — a directory entry with that sharer bit and a
    /// table flag, so a future write to the line is guaranteed to probe
    /// that CPU's translation structures.
    pub fn tracks_pt_source(&self, cpu: usize, line: LineAddr) -> bool {
        self.dir
            .peek(line.0)
            .is_some_and(|e| (e.gpt || e.npt) && (e.sharers >> cpu) & 1 == 1)
    }

    /// Remove a CPU from a line's sharer list (the CPU answered a spurious
    /// invalidation and asked not to be probed again).
    pub fn demote_sharer(&mut self, cpu: usize, line: LineAddr) {
        self.stats.sharer_demotions += 1;
        if let Some(e) = self.dir.get_mut(line.0) {
            e.sharers &= !(1u64 << cpu);
            if e.sharers == 0 && e.owner.is_none() {
                self.dir.remove(line.0);
            }
        }
    }

    pub fn has_cached(&self, cpu: usize, line: LineAddr) -> bool {
        self.l2[cpu].contains(line.0)
    }

    /// Local page-table hints of `cpu`'s copy of `line` (false, false) when
    /// not cached.
    pub fn local_pt_hints(&self, cpu: usize, line: LineAddr) -> (bool, bool) {
        self.l2[cpu].peek(line.0).map_or((false, false), |l| (l.gpt, l.npt))
    }

    /// Walker touched a locally cached line: refresh the local hint bits,
    /// report whether the directory still needs an explicit mark.
    fn note_local_walk(&mut self, cpu: usize, l: u64, walker: Option<PtKind>) -> bool {
        let Some(kind) = walker else { return false };
        let Some(line) = self.l2[cpu].get(l) else { return false };
        let hint = match kind {
            PtKind::Guest => &mut line.gpt,
            PtKind::Nested => &mut line.npt,
        };
        let first_touch = !*hint;
        *hint = true;
        first_touch
    }

    /// Invalidate every other sharer of `l` for an ownership request by
    /// `cpu`; returns the directory flags and per-target details.
    fn fanout(&mut self, cpu: usize, l: u64, walker: Option<PtKind>) -> (bool, bool, Vec<InvTarget>) {
        let (sharers, dir_gpt, dir_npt) = {
            let (entry, evicted) = self.dir.ensure(l);
            debug_assert!(evicted.is_none(), "upgrades find an existing entry");
            if let Some(kind) = walker {
                match kind {
                    PtKind::Guest => entry.gpt = true,
                    PtKind::Nested => entry.npt = true,
                }
            }
            (entry.sharers, entry.gpt, entry.npt)
        };
        let mut targets = Vec::new();
        for t in 0..self.cpus {
            if t == cpu || sharers & (1u64 << t) == 0 {
                continue;
            }
            let copy = self.l2[t].peek(l).copied();
            // Writer in S means nobody holds M; purges are clean.
            self.l1[t].remove(l);
            self.l2[t].remove(l);
            self.stats.invalidations_sent += 1;
            self.stats.messages += 2; // invalidation + ack
            targets.push(InvTarget {
                cpu: t as u16,
                had_cache_copy: copy.is_some(),
                local_gpt: copy.is_some_and(|c| c.gpt),
                local_npt: copy.is_some_and(|c| c.npt),
            });
        }
        let entry = self.dir.get_mut(l).expect("ensured above");
        entry.sharers = 1u64 << cpu;
        entry.owner = Some(cpu as u16);
        (dir_gpt, dir_npt, targets)
    }

    /// Purge an evicted directory entry's line from every sharer's caches.
    fn back_invalidate(&mut self, l: u64, e: DirEntry) -> BackInv {
        self.stats.dir_evictions += 1;
        let mut cpus = Vec::new();
        for t in 0..self.cpus {
            if e.sharers & (1u64 << t) == 0 {
                continue;
            }
            let copy = self.l2[t].remove(l);
            self.l1[t].remove(l);
            if copy.is_some() {
                self.stats.back_inv_purges += 1;
                self.stats.messages += 2;
            }
            if copy.is_some_and(|c| c.state == MesiState::Modified) {
                self.stats.writebacks += 1;
                self.llc.insert(l, ());
            }
            cpus.push(t as u16);
        }
        BackInv { line: LineAddr(l), cpus, gpt: e.gpt, npt: e.npt }
    }

    fn fill_l1(&mut self, cpu: usize, l: u64) {
        // Presence only; evictions are silent (state lives in L2).
        self.l1[cpu].insert(l, ());
    }

    fn fill_l2(&mut self, cpu: usize, l: u64, line: L2Line) {
        if let Some((vl, v)) = self.l2[cpu].insert(l, line) {
            // Inclusive: the L1 copy goes with it.
            self.l1[cpu].remove(vl);
            let pt_line = v.gpt || v.npt;
            match v.state {
                MesiState::Modified => {
                    self.stats.writebacks += 1;
                    self.stats.messages += 1;
                    self.llc.insert(vl, ());
                    if let Some(e) = self.dir.get_mut(vl) {
                        e.owner = None;
                        // Lazy sharer maintenance: page-table lines keep
                        // their bit so translations minted from this line
                        // stay reachable by future probes.
                        if !pt_line {
                            e.sharers &= !(1u64 << cpu);
                            if e.sharers == 0 {
                                self.dir.remove(vl);
                            }
                        }
                    }
                }
                MesiState::Exclusive => {
                    // Silent data-wise, but the owner pointer must not go
                    // stale (nobody would answer a forward request).
                    if let Some(e) = self.dir.get_mut(vl) {
                        if e.owner == Some(cpu as u16) {
                            e.owner = None;
                        }
                    }
                }
                MesiState::Shared => {} // silent, bit stays (lazy)
            }
        }
    }

    /// Exhaustive invariant scan, used by tests and debug runs:
    /// single-writer/multiple-reader, L1-in-L2 inclusion, and directory
    /// coverage of every cached line.
    pub fn check_invariants(&self) -> Result<(), String> {
        for cpu in 0..self.cpus {
            for (l, _) in self.l1[cpu].iter() {
                if !self.l2[cpu].contains(l) {
                    return Err(format!("cpu {cpu} L1 line {l:#x} not in L2"));
                }
            }
            for (l, line) in self.l2[cpu].iter() {
                let e = self
                    .dir
                    .peek(l)
                    .ok_or_else(|| format!("cpu {cpu} caches {l:#x} but directory dropped it"))?;
                if e.sharers & (1u64 << cpu) == 0 {
                    return Err(format!("cpu {cpu} caches {l:#x} without a sharer bit"));
                }
                match line.state {
                    MesiState::Modified | MesiState::Exclusive => {
                        if e.owner != Some(cpu as u16) {
                            return Err(format!(
                                "cpu {cpu} holds {l:#x} {:?} but directory owner is {:?}",
                                line.state, e.owner
                            ));
                        }
                        for other in 0..self.cpus {
                            if other != cpu && self.l2[other].contains(l) {
                                return Err(format!(
                                    "line {l:#x} exclusive at {cpu} but also cached at {other}"
                                ));
                            }
                        }
                    }
                    MesiState::Shared => {
                        if e.owner == Some(cpu as u16) {
                            return Err(format!("cpu {cpu} shared {l:#x} yet owns it"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Coherence {
        Coherence::new(
            4,
            &CacheConfig {
                l1_lines: 16,
                l1_ways: 2,
                l2_lines: 64,
                l2_ways: 4,
                llc_lines: 256,
                llc_ways: 8,
            },
            &DirectoryConfig { infinite: true, ..Default::default() },
        )
    }

    fn state_at(c: &Coherence, cpu: usize, line: u64) -> Option<MesiState> {
        c.l2[cpu].peek(line).map(|l| l.state)
    }

    #[test]
    fn lone_reader_gets_exclusive_then_silent_upgrade() {
        let mut c = small();
        let line = LineAddr(0x40);
        let r = c.cpu_read(0, line, None);
        assert_eq!(r.source, HitSource::Dram);
        assert_eq!(state_at(&c, 0, 0x40), Some(MesiState::Exclusive));
        let w = c.cpu_write(0, line, None);
        assert_eq!(w.kind, WriteKind::SilentUpgrade);
        assert!(w.targets.is_empty());
        assert_eq!(state_at(&c, 0, 0x40), Some(MesiState::Modified));
        let w2 = c.cpu_write(0, line, None);
        assert_eq!(w2.kind, WriteKind::LocalM);
        c.check_invariants().unwrap();
    }

    #[test]
    fn second_reader_demotes_owner_to_shared() {
        let mut c = small();
        let line = LineAddr(0x40);
        c.cpu_read(0, line, None);
        c.cpu_write(0, line, None); // 0 holds M
        let r = c.cpu_read(1, line, None);
        assert_eq!(r.source, HitSource::Remote(0));
        assert_eq!(state_at(&c, 0, 0x40), Some(MesiState::Shared));
        assert_eq!(state_at(&c, 1, 0x40), Some(MesiState::Shared));
        assert_eq!(c.stats.writebacks, 1);
        c.check_invariants().unwrap();
    }

    #[test]
    fn upgrade_invalidates_other_sharers() {
        let mut c = small();
        let line = LineAddr(0x80);
        for cpu in 0..3 {
            c.cpu_read(cpu, line, None);
        }
        let w = c.cpu_write(2, line, None);
        assert_eq!(w.kind, WriteKind::Upgrade);
        let mut cpus: Vec<u16> = w.targets.iter().map(|t| t.cpu).collect();
        cpus.sort_unstable();
        assert_eq!(cpus, vec![0, 1]);
        assert!(w.targets.iter().all(|t| t.had_cache_copy));
        assert_eq!(state_at(&c, 0, 0x80), None);
        assert_eq!(state_at(&c, 1, 0x80), None);
        assert_eq!(state_at(&c, 2, 0x80), Some(MesiState::Modified));
        c.check_invariants().unwrap();
    }

    #[test]
    fn write_miss_invalidates_and_fetches_from_owner() {
        let mut c = small();
        let line = LineAddr(0xc0);
        c.cpu_read(0, line, None);
        c.cpu_write(0, line, None);
        let w = c.cpu_write(3, line, None);
        assert_eq!(w.kind, WriteKind::Miss);
        assert_eq!(w.source, HitSource::Remote(0));
        assert_eq!(w.targets.len(), 1);
        assert_eq!(w.targets[0].cpu, 0);
        assert_eq!(state_at(&c, 0, 0xc0), None);
        assert_eq!(state_at(&c, 3, 0xc0), Some(MesiState::Modified));
        c.check_invariants().unwrap();
    }

    #[test]
    fn walker_read_marks_directory_on_miss_for_free() {
        let mut c = small();
        let line = LineAddr(0x100);
        let r = c.cpu_read(0, line, Some(PtKind::Nested));
        assert!(!r.needs_walker_mark, "miss path piggybacks the mark");
        assert_eq!(c.pt_flags(line), (false, true));
        assert_eq!(c.stats.walker_mark_messages, 0);
        // A guest-table walk of the same line sets the second flag.
        c.cpu_read(1, line, Some(PtKind::Guest));
        assert_eq!(c.pt_flags(line), (true, true));
    }

    #[test]
    fn walker_hit_on_unhinted_local_line_requests_explicit_mark() {
        let mut c = small();
        let line = LineAddr(0x140);
        // Line enters CPU 0's cache via a plain data write (e.g. the
        // mapping code building the table): the directory learns nothing.
        c.cpu_read(0, line, None);
        c.cpu_write(0, line, None);
        assert_eq!(c.pt_flags(line), (false, false));
        let r = c.cpu_read(0, line, Some(PtKind::Nested));
        assert_eq!(r.source, HitSource::L1);
        assert!(r.needs_walker_mark, "local hint was clear");
        c.walker_mark(line, PtKind::Nested);
        assert_eq!(c.pt_flags(line), (false, true));
        assert_eq!(c.stats.walker_mark_messages, 1);
        // Second walker hit: hint set, no message owed.
        let r2 = c.cpu_read(0, line, Some(PtKind::Nested));
        assert!(!r2.needs_walker_mark);
    }

    #[test]
    fn lazy_eviction_leaves_stale_sharer_for_pt_lines() {
        let mut c = Coherence::new(
            2,
            &CacheConfig {
                l1_lines: 2,
                l1_ways: 1,
                l2_lines: 4,
                l2_ways: 1, // direct-mapped: easy conflict eviction
                llc_lines: 64,
                llc_ways: 4,
            },
            &DirectoryConfig { infinite: true, ..Default::default() },
        );
        // CPU 1 walks a PT line, then a conflicting line evicts it (clean).
        let pt = LineAddr(0x4);
        let conflicting = LineAddr(0x8); // same L2 set (4 sets, stride 4)
        c.cpu_read(1, pt, Some(PtKind::Nested));
        c.cpu_read(1, conflicting, None);
        assert!(!c.has_cached(1, pt), "conflict evicted the PT line");
        // Sharer bit survives the silent eviction...
        let w = c.cpu_write(0, pt, None);
        assert_eq!(w.targets.len(), 1, "stale sharer still probed");
        assert_eq!(w.targets[0].cpu, 1);
        assert!(!w.targets[0].had_cache_copy, "...so the probe finds no copy");
        assert!(w.dir_npt, "directory still knows it is a nested-table line");
        // The policy layer demotes; the next write probes nobody.
        c.demote_sharer(1, pt);
        let w2 = c.cpu_write(0, pt, None);
        assert!(w2.targets.is_empty());
        c.check_invariants().unwrap();
    }

    #[test]
    fn dirty_pt_eviction_keeps_sharer_bit_but_dirty_data_eviction_does_not() {
        let mut c = Coherence::new(
            2,
            &CacheConfig {
                l1_lines: 2,
                l1_ways: 1,
                l2_lines: 2,
                l2_ways: 1,
                llc_lines: 64,
                llc_ways: 4,
            },
            &DirectoryConfig { infinite: true, ..Default::default() },
        );
        let pt = LineAddr(0x2);
        c.cpu_read(0, pt, Some(PtKind::Guest));
        c.cpu_write(0, pt, Some(PtKind::Guest)); // dirty PT line (A/D update)
        c.cpu_read(0, LineAddr(0x4), None); // conflict-evicts it (writeback)
        assert_eq!(c.stats.writebacks, 1);
        let e = c.dir.peek(0x2).expect("entry kept");
        assert_eq!(e.sharers, 1, "PT line keeps the sharer bit");
        assert_eq!(e.owner, None);

        let data = LineAddr(0x3);
        c.cpu_read(1, data, None);
        c.cpu_write(1, data, None);
        c.cpu_read(1, LineAddr(0x5), None); // conflict-evicts dirty data
        assert!(c.dir.peek(0x3).is_none(), "data line fully released");
        c.check_invariants().unwrap();
    }

    #[test]
    fn directory_eviction_back_invalidates_sharers() {
        let mut c = Coherence::new(
            2,
            &CacheConfig {
                l1_lines: 8,
                l1_ways: 2,
                l2_lines: 16,
                l2_ways: 4,
                llc_lines: 64,
                llc_ways: 4,
            },
            &DirectoryConfig { infinite: false, ways: 2, capacity_mult: 0 },
        );
        // capacity_mult 0 clamps to a single set of `ways` entries.
        let a = LineAddr(0x10);
        let b = LineAddr(0x20);
        let v = LineAddr(0x30);
        c.cpu_read(0, a, Some(PtKind::Nested));
        c.cpu_read(1, a, None);
        c.cpu_read(0, b, None);
        let r = c.cpu_read(1, v, None);
        assert_eq!(r.back_invs.len(), 1, "third entry evicts the LRU one");
        let bi = &r.back_invs[0];
        assert_eq!(bi.line, a);
        assert_eq!(bi.cpus, vec![0, 1]);
        assert!(bi.npt, "flags travel with the notice");
        assert!(!c.has_cached(0, a) && !c.has_cached(1, a));
        c.check_invariants().unwrap();
    }

    #[test]
    fn l2_eviction_is_inclusive_of_l1() {
        let mut c = Coherence::new(
            1,
            &CacheConfig {
                l1_lines: 2,
                l1_ways: 2,
                l2_lines: 2,
                l2_ways: 2,
                llc_lines: 64,
                llc_ways: 4,
            },
            &DirectoryConfig { infinite: true, ..Default::default() },
        );
        c.cpu_read(0, LineAddr(1), None);
        c.cpu_read(0, LineAddr(2), None);
        c.cpu_read(0, LineAddr(3), None); // evicts line 1 from L2
        assert!(!c.l1[0].contains(1), "L1 copy left with the L2 line");
        c.check_invariants().unwrap();
    }

    /// Reference model: per-line MESI over infinite caches. The fabric under
    /// test uses caches big enough not to evict, so states must agree.
    #[derive(Default)]
    struct RefModel {
        lines: HashMap<u64, HashMap<usize, MesiState>>,
    }

    impl RefModel {
        fn read(&mut self, cpu: usize, l: u64) {
            let states = self.lines.entry(l).or_default();
            if states.contains_key(&cpu) {
                return;
            }
            for s in states.values_mut() {
                *s = MesiState::Shared;
            }
            let alone = states.is_empty();
            states.insert(cpu, if alone { MesiState::Exclusive } else { MesiState::Shared });
        }

        fn write(&mut self, cpu: usize, l: u64) {
            let states = self.lines.entry(l).or_default();
            states.clear();
            states.insert(cpu, MesiState::Modified);
        }
    }

    proptest! {
        #[test]
        fn agrees_with_reference_mesi_model(
            ops in prop::collection::vec((0usize..4, 0u64..12, any::<bool>()), 1..200)
        ) {
            let mut c = Coherence::new(
                4,
                &CacheConfig {
                    l1_lines: 64, l1_ways: 64,
                    l2_lines: 64, l2_ways: 64,
                    llc_lines: 256, llc_ways: 256,
                },
                &DirectoryConfig { infinite: true, ..Default::default() },
            );
            let mut model = RefModel::default();
            for (cpu, line, is_write) in ops {
                if is_write {
                    c.cpu_write(cpu, LineAddr(line), None);
                    model.write(cpu, line);
                } else {
                    c.cpu_read(cpu, LineAddr(line), None);
                    model.read(cpu, line);
                }
                c.check_invariants().map_err(|e| TestCaseError::fail(e))?;
                for cc in 0..4 {
                    let got = state_at(&c, cc, line);
                    let want = model.lines.get(&line).and_then(|m| m.get(&cc)).copied();
                    prop_assert_eq!(got, want, "cpu {} line {:#x}", cc, line);
                }
            }
        }

        #[test]
        fn invariants_hold_under_finite_everything(
            ops in prop::collection::vec((0usize..3, 0u64..40, 0u8..4), 1..300)
        ) {
            let mut c = Coherence::new(
                3,
                &CacheConfig {
                    l1_lines: 4, l1_ways: 2,
                    l2_lines: 8, l2_ways: 2,
                    llc_lines: 16, llc_ways: 2,
                },
                &DirectoryConfig { infinite: false, ways: 2, capacity_mult: 1 },
            );
            for (cpu, line, op) in ops {
                let walker = match op {
                    2 => Some(PtKind::Guest),
                    3 => Some(PtKind::Nested),
                    _ => None,
                };
                if op == 1 {
                    let w = c.cpu_write(cpu, LineAddr(line), None);
                    for t in &w.targets {
                        if !t.had_cache_copy {
                            c.demote_sharer(t.cpu as usize, LineAddr(line));
                        }
                    }
                } else {
                    let r = c.cpu_read(cpu, LineAddr(line), walker);
                    if r.needs_walker_mark {
                        c.walker_mark(LineAddr(line), walker.unwrap());
                    }
                }
                c.check_invariants().map_err(TestCaseError::fail)?;
            }
        }
    }
}
