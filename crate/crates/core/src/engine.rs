//! The simulation engine: one deterministic pass over a trace.
//!
//! Each record is translated (TLB lookup, then a two-dimensional walk on a
//! miss), charged through the coherent cache hierarchy, and finally issued
//! as a data access. Page faults are resolved inline: the guest OS maps
//! unmapped virtual pages, the hypervisor places unmapped guest-physical
//! pages and migrates slow-resident ones into the die-stacked fast region.
//! Every rewrite of a live leaf entry flows through the configured
//! translation-coherence mechanism — selective hardware probes or software
//! shootdowns — so stale translations can never serve an access.
//!
//! Two structural rules keep the model honest:
//!
//! * **Functional state is mode-independent.** Page-table contents, frame
//!   placement, CLOCK access bits and the RNG stream never read the
//!   coherence mode or any cycle clock, so every mode replays the same
//!   functional history and differs only in timing, probe counts and
//!   energy. Cadenced housekeeping (paging daemon, background remaps) runs
//!   on record indices, not cycles, for the same reason.
//! * **Walks charge before they fill.** A walk's memory references and
//!   metadata writes (with their probe fallout) are applied first, and its
//!   structure fills afterwards, so a walk can never invalidate the very
//!   entries it is about to install.

use crate::addr::{Gpp, Gvp, Spa, Spp, LINE_BYTES, PAGE_BYTES};
use crate::coherence::{BackInv, Coherence, HitSource, WriteKind};
use crate::config::{CoherenceMode, ConfigError, SimConfig};
use crate::hypervisor::{Hypervisor, MemChannels, PagingEnv};
use crate::pagetable::{
    AddressSpace, MemRegion, PageTables, PhysMem, PtError, PtKind, WalkFault, WalkRole,
};
use crate::stats::SimStats;
use crate::tcoherence::{self, WriteEffects};
use crate::trace::{Op, TraceRecord};
use crate::tstruct::{TlbHitLevel, TlbKey, Tstructs};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeSet, HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("memory/tables: {0}")]
    Pt(#[from] PtError),
    #[error("record {index}: {msg}")]
    Trace { index: u64, msg: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// One final guest-virtual-to-system-physical mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Translation {
    pub vm: u16,
    pub pid: u16,
    pub gvp: Gvp,
    pub spp: Spp,
}

/// Everything a finished run reports.
#[derive(Debug)]
pub struct RunOutput {
    pub stats: SimStats,
    /// Event log, when the configuration asked for one.
    pub events: Option<String>,
    /// Final table-resolved mapping of every page the trace touched,
    /// sorted. Coherence mode must not change this.
    pub translations: Vec<Translation>,
}

/// Simulate `records` under `cfg`. Identical inputs produce identical
/// output, bit for bit.
pub fn run(cfg: &SimConfig, records: &[TraceRecord]) -> Result<RunOutput, EngineError> {
    cfg.validate()?;
    Engine::new(cfg).run(records)
}

/// The paging policy's view of tables and memory: nested-leaf access bits,
/// fresh slow frames, slow-residency lookups. Access-bit traffic is quiet
/// (hypervisor metadata housekeeping, identical in every mode).
struct TableEnv<'t> {
    tables: &'t PageTables,
    mem: &'t mut PhysMem,
}

impl TableEnv<'_> {
    fn leaf(&self, vm: u16, gpp: Gpp) -> Spa {
        if self.tables.virtualized {
            self.tables.nested_leaf_spa(vm, gpp, self.mem).expect("resident page is mapped")
        } else {
            self.tables
                .resolve(AddressSpace { vm, pid: 0 }, Gvp(gpp.0), self.mem)
                .expect("resident page is mapped")
                .nested_leaf
        }
    }
}

impl PagingEnv for TableEnv<'_> {
    fn access_get(&mut self, vm: u16, gpp: Gpp) -> bool {
        let leaf = self.leaf(vm, gpp);
        self.mem.read_pte(leaf).access()
    }

    fn access_clear(&mut self, vm: u16, gpp: Gpp) {
        let leaf = self.leaf(vm, gpp);
        let pte = self.mem.read_pte(leaf);
        self.mem.write_pte(leaf, pte.without_access());
    }

    fn fresh_slow_frame(&mut self) -> Result<Spp, PtError> {
        self.mem.alloc_data_slow()
    }

    fn slow_resident(&mut self, vm: u16, gpp: Gpp) -> Option<Spp> {
        let spp = if self.tables.virtualized {
            self.tables.nested_resolve(vm, gpp, self.mem)?
        } else {
            self.tables.resolve(AddressSpace { vm, pid: 0 }, Gvp(gpp.0), self.mem)?.spp
        };
        (self.mem.region(spp) == MemRegion::Slow).then_some(spp)
    }
}

struct Engine<'c> {
    cfg: &'c SimConfig,
    mem: PhysMem,
    tables: PageTables,
    ts: Vec<Tstructs>,
    coh: Coherence,
    hv: Option<Hypervisor>,
    channels: MemChannels,
    /// Per-CPU cycle clocks, plus one trailing slot for the hypervisor's
    /// housekeeping (daemon and background remaps).
    clocks: Vec<u64>,
    rng: ChaCha12Rng,
    stats: SimStats,
    events: Option<String>,
    /// Data-page allocator: next fresh guest-physical page, per VM.
    next_gpp: HashMap<u16, u64>,
    /// Mapped data pages in first-touch order (background-remap victims).
    mapped: Vec<(u16, Gpp)>,
    /// CPUs that have executed each VM (software-shootdown recipients).
    vm_cpus: HashMap<u16, BTreeSet<u16>>,
    /// Every (vm, pid, gvp) the trace touched, for the final-state report.
    touched: HashSet<(u16, u16, u64)>,
    record_idx: u64,
}

impl<'c> Engine<'c> {
    fn new(cfg: &'c SimConfig) -> Self {
        let mem = PhysMem::new(&cfg.mem);
        let hv = cfg
            .paging
            .enabled
            .then(|| Hypervisor::new(cfg.paging.clone(), mem.fast_data_frames()));
        Engine {
            cfg,
            tables: PageTables::new(cfg.virtualized, cfg.cotag_bits),
            ts: (0..cfg.cpus).map(|_| Tstructs::new(&cfg.tstruct)).collect(),
            coh: Coherence::new(cfg.cpus, &cfg.cache, &cfg.directory),
            hv,
            channels: MemChannels::new(cfg.mem.fast_bw, cfg.mem.slow_bw),
            clocks: vec![0; cfg.cpus + 1],
            rng: ChaCha12Rng::seed_from_u64(cfg.seed),
            stats: SimStats::default(),
            events: cfg.log_events.then(String::new),
            next_gpp: HashMap::new(),
            mapped: Vec::new(),
            vm_cpus: HashMap::new(),
            touched: HashSet::new(),
            record_idx: 0,
            mem,
        }
    }

    fn run(mut self, records: &[TraceRecord]) -> Result<RunOutput, EngineError> {
        if !self.cfg.virtualized && records.iter().any(|r| r.pid != 0) {
            return Err(EngineError::Trace {
                index: 0,
                msg: "bare-metal runs support a single process per VM".into(),
            });
        }
        let remap_interval = match self.cfg.background_remaps_per_m {
            0 => u64::MAX,
            r => (1_000_000 / r).max(1),
        };
        for (i, r) in records.iter().enumerate() {
            self.record_idx = i as u64;
            if r.cpu as usize >= self.cfg.cpus {
                return Err(EngineError::Trace {
                    index: self.record_idx,
                    msg: format!("cpu {} out of range (cpus = {})", r.cpu, self.cfg.cpus),
                });
            }
            self.vm_cpus.entry(r.vm).or_default().insert(r.cpu);
            self.touched.insert((r.vm, r.pid, r.gvp.0));
            self.step(*r)?;
            let n = i as u64 + 1;
            if n % remap_interval == 0 {
                self.background_remap()?;
            }
            if self.hv.is_some() && n % self.cfg.paging.daemon_period == 0 {
                self.daemon_tick()?;
            }
            if self.cfg.debug_checks {
                self.audit(r)?;
            }
        }
        if self.cfg.debug_checks {
            self.full_audit()?;
        }
        self.stats.cycles = *self.clocks.iter().max().expect("at least one clock");
        for cpu in 0..self.cfg.cpus {
            let ts = std::mem::replace(&mut self.ts[cpu], Tstructs::new(&self.cfg.tstruct));
            self.stats.absorb_tstructs(&ts);
        }
        self.stats.absorb_coh(self.coh.stats.clone());
        if let Some(h) = &self.hv {
            self.stats.absorb_hv(h.stats);
        }
        let mut translations: Vec<Translation> = self
            .touched
            .iter()
            .map(|&(vm, pid, gvp)| {
                let asid = AddressSpace { vm, pid };
                let r = self
                    .tables
                    .resolve(asid, Gvp(gvp), &self.mem)
                    .expect("every touched page ends the run mapped");
                Translation { vm, pid, gvp: Gvp(gvp), spp: r.spp }
            })
            .collect();
        translations.sort_unstable();
        Ok(RunOutput { stats: self.stats, events: self.events, translations })
    }

    /// Translate one record and perform its data access, resolving faults
    /// along the way. All latency lands on the issuing CPU's clock.
    fn step(&mut self, r: TraceRecord) -> Result<(), EngineError> {
        let cpu = r.cpu as usize;
        let asid = AddressSpace { vm: r.vm, pid: r.pid };
        let is_store = r.op == Op::Store;
        self.stats.records += 1;
        match r.op {
            Op::Load => self.stats.loads += 1,
            Op::Store => self.stats.stores += 1,
        }

        let mut lat = 0u64;
        let mut guard = 0;
        let spp = loop {
            guard += 1;
            if guard > 8 {
                return Err(EngineError::Invariant(format!(
                    "record {}: fault handling did not converge",
                    self.record_idx
                )));
            }
            if let Some((lvl, e)) = self.ts[cpu].lookup_translation(r.vm, r.gvp) {
                if lvl == TlbHitLevel::L2 {
                    lat += self.cfg.latency.l2_tlb_probe;
                }
                let p = e.value;
                if self.hv.is_some() && self.mem.region(p.spp) == MemRegion::Slow {
                    // The translation is current but the page lives in the
                    // slow region: fault, migrate, and retranslate (the
                    // remap's probes or shootdown just killed this entry).
                    lat += self.demand_fault(cpu, r.vm, p.gpp, p.spp)?;
                    continue;
                }
                // Quiet access-bit refresh keeps CLOCK mode-independent: a
                // TLB hit leaves no other trace in the tables.
                let pte = self.mem.read_pte(e.src);
                if !pte.access() {
                    self.mem.write_pte(e.src, pte.with_access());
                }
                if is_store && !p.dirty {
                    self.set_dirty_loud(cpu, p.guest_leaf, e.src);
                    self.ts[cpu].mark_dirty(TlbKey { vm: r.vm, gvp: r.gvp });
                }
                break p.spp;
            }
            lat += self.cfg.latency.l2_tlb_probe;
            match self.tables.walk_2d(asid, r.gvp, &mut self.ts[cpu], &mut self.mem, is_store) {
                Ok(w) => {
                    self.stats.walks += 1;
                    self.stats.walk_refs += w.refs.len() as u64;
                    if w.ntlb_elisions > 0 {
                        self.stats.walks_ntlb_assisted += 1;
                    }
                    if w.mmu_hit_level.is_some() {
                        self.stats.walks_mmu_assisted += 1;
                    }
                    // 1) Walker references, with piggybacked marking.
                    for wr in &w.refs {
                        let tag = self.walker_tag(wr.role);
                        let ro = self.coh.cpu_read(cpu, wr.spa.line(), tag);
                        let ref_lat = self.read_latency(ro.source, wr.spa);
                        self.stats.walk_cycles += ref_lat;
                        lat += ref_lat;
                        if ro.needs_walker_mark {
                            if let Some(kind) = tag {
                                self.coh.walker_mark(wr.spa.line(), kind);
                            }
                        }
                        self.purge_back_invs(&ro.back_invs);
                    }
                    // 2) Loud metadata read-modify-writes: access bits,
                    //    then leaf dirty bits. Posted — no walker latency,
                    //    but full coherence fallout.
                    for wr in &w.refs {
                        if wr.a_set {
                            let tag = self.walker_tag(wr.role);
                            self.loud_pt_write(cpu, wr.spa, tag);
                        }
                    }
                    if !w.d_sets.is_empty() {
                        self.stats.dirty_set_events += 1;
                        let guest_leaf = w.fills.tlb.1.guest_leaf;
                        for &spa in &w.d_sets {
                            let kind =
                                if spa == guest_leaf { PtKind::Guest } else { PtKind::Nested };
                            let tag = self
                                .cfg
                                .mode
                                .hw_translation_coherence()
                                .then_some(kind);
                            self.loud_pt_write(cpu, spa, tag);
                        }
                    }
                    // 3) Residency: a slow page faults before it fills the
                    //    TLB. Table-derived fills survive the migration.
                    if self.hv.is_some() && self.mem.region(w.spp) == MemRegion::Slow {
                        self.apply_table_fills(cpu, &w.fills);
                        lat += self.demand_fault(cpu, r.vm, w.data_gpp, w.spp)?;
                        continue;
                    }
                    // 4) Fills, last.
                    let (k, v, c, s) = w.fills.tlb.clone();
                    self.ts[cpu].fill_tlb(k, v, c, s);
                    self.apply_table_fills(cpu, &w.fills);
                    break w.spp;
                }
                Err(WalkFault::Guest { .. }) if self.cfg.virtualized => {
                    lat += self.guest_fault(cpu, asid, r.gvp)?;
                }
                Err(WalkFault::Guest { .. }) => {
                    lat += self.direct_fault(cpu, asid, r.gvp)?;
                }
                Err(WalkFault::Nested { gpp, .. }) => {
                    lat += self.nested_fault(cpu, r.vm, gpp)?;
                }
            }
        };

        // The data access itself. The line within the page rotates with
        // the record index (deterministically, identically in every mode),
        // so repeated visits to a hot page still exercise the full page —
        // caching one line per page would hide the DRAM tier entirely.
        let offset = r.gvp.0.wrapping_mul(0x9e37_79b9).wrapping_add(self.record_idx)
            % (PAGE_BYTES / LINE_BYTES);
        let data_spa = Spa(spp.0 * PAGE_BYTES + offset * LINE_BYTES);
        if is_store {
            let fx = tcoherence::coherent_write(
                self.cfg.mode,
                &mut self.coh,
                &mut self.ts,
                self.cfg.cotag_bits,
                cpu,
                data_spa,
                None,
            );
            lat += self.write_latency(&fx, data_spa);
            self.absorb_write_effects(&fx);
        } else {
            let ro = self.coh.cpu_read(cpu, data_spa.line(), None);
            lat += self.read_latency(ro.source, data_spa);
            self.purge_back_invs(&ro.back_invs);
        }
        self.clocks[cpu] += lat;
        Ok(())
    }

    /// Walker tags ride on reads and metadata writes only when the
    /// hardware actually implements translation tracking.
    fn walker_tag(&self, role: WalkRole) -> Option<PtKind> {
        self.cfg.mode.hw_translation_coherence().then(|| role.kind())
    }

    /// A coherent store to a page-table line, with all translation fallout.
    fn loud_pt_write(&mut self, cpu: usize, spa: Spa, tag: Option<PtKind>) {
        let fx = tcoherence::coherent_write(
            self.cfg.mode,
            &mut self.coh,
            &mut self.ts,
            self.cfg.cotag_bits,
            cpu,
            spa,
            tag,
        );
        self.absorb_write_effects(&fx);
    }

    fn apply_table_fills(&mut self, cpu: usize, fills: &crate::pagetable::WalkFills) {
        for (k, v, c, s) in &fills.ntlb {
            self.ts[cpu].ntlb.fill(*k, *v, *c, *s);
        }
        for (k, v, c, s) in &fills.mmu {
            self.ts[cpu].mmu.fill(*k, *v, *c, *s);
        }
    }

    /// Store through a clean TLB entry: the set-dirty assist re-reads the
    /// leaves and rewrites (coherently) only those whose D bit is still
    /// clear — a bit another CPU already set costs nothing here.
    fn set_dirty_loud(&mut self, cpu: usize, guest_leaf: Spa, nested_leaf: Spa) {
        let leaves: &[(Spa, PtKind)] = if guest_leaf == nested_leaf {
            &[(guest_leaf, PtKind::Guest)]
        } else {
            &[(guest_leaf, PtKind::Guest), (nested_leaf, PtKind::Nested)]
        };
        let mut wrote = false;
        for &(spa, kind) in leaves {
            let pte = self.mem.read_pte(spa);
            if pte.dirty() {
                continue;
            }
            self.mem.write_pte(spa, pte.with_access().with_dirty());
            wrote = true;
            let tag = self.cfg.mode.hw_translation_coherence().then_some(kind);
            self.loud_pt_write(cpu, spa, tag);
        }
        if wrote {
            self.stats.dirty_set_events += 1;
        }
    }

    fn read_latency(&self, src: HitSource, spa: Spa) -> u64 {
        let l = &self.cfg.latency;
        match src {
            HitSource::L1 => l.l1_hit,
            HitSource::L2 => l.l2_hit,
            HitSource::Llc => l.llc,
            HitSource::Remote(_) => l.llc + l.l2_hit,
            HitSource::Dram => {
                l.llc
                    + match self.mem.region(spa.page()) {
                        MemRegion::Fast => l.dram_fast,
                        MemRegion::Slow => l.dram_slow,
                    }
            }
        }
    }

    fn write_latency(&self, fx: &WriteEffects, spa: Spa) -> u64 {
        let l = &self.cfg.latency;
        match fx.outcome.kind {
            WriteKind::LocalM | WriteKind::SilentUpgrade => l.l1_hit,
            WriteKind::Upgrade => l.llc,
            WriteKind::Miss => self.read_latency(fx.outcome.source, spa),
        }
    }

    /// Cycles a probed CPU spends on one selective invalidation.
    fn probe_busy(&self, invalidated: u64) -> u64 {
        let c = &self.cfg.cost;
        match self.cfg.mode {
            CoherenceMode::Hatric | CoherenceMode::TlbOnly => 4 * c.probe + c.per_inv * invalidated,
            // Exact invalidation is modeled free; software never probes.
            CoherenceMode::Ideal | CoherenceMode::Sw => 0,
        }
    }

    fn absorb_write_effects(&mut self, fx: &WriteEffects) {
        if let Some(c) = fx.self_probe {
            self.stats.self_probes += 1;
            self.stats.selective_inv.merge(c);
        }
        for t in &fx.targets {
            if t.probed {
                self.stats.probes_sent += 1;
                self.stats.selective_inv.merge(t.invalidated);
                self.clocks[t.cpu as usize] += self.probe_busy(t.invalidated.total());
            }
            if t.spurious {
                self.stats.spurious_probes += 1;
            }
        }
        self.stats.back_inv_purged += fx.back_inv_purged.total();
    }

    fn purge_back_invs(&mut self, back_invs: &[BackInv]) {
        if back_invs.is_empty() {
            return;
        }
        let purged =
            tcoherence::apply_back_invs(self.cfg.mode, &mut self.ts, self.cfg.cotag_bits, back_invs);
        self.stats.back_inv_purged += purged.total();
    }

    /// Rewrite the leaf for `(vm, gpp)` to point at `to`, with coherent
    /// traffic attributed to `cpu`.
    fn execute_remap(&mut self, cpu: usize, vm: u16, gpp: Gpp, to: Spp) -> Result<(), EngineError> {
        let nr = if self.cfg.virtualized {
            self.tables.remap_nested(vm, gpp, to, &mut self.mem)?
        } else {
            self.tables.remap_direct(AddressSpace { vm, pid: 0 }, Gvp(gpp.0), to, &mut self.mem)?
        };
        self.stats.remaps += 1;
        if nr.modified.is_some() {
            self.loud_pt_write(cpu, nr.leaf, None);
        }
        Ok(())
    }

    /// One software shootdown per affected VM, after a remap batch. The
    /// hardware modes already probed selectively at write time.
    fn sw_batch_shootdown(
        &mut self,
        initiator: Option<u16>,
        vms: impl IntoIterator<Item = u16>,
    ) -> u64 {
        if self.cfg.mode != CoherenceMode::Sw {
            return 0;
        }
        let mut stall = 0;
        for vm in vms {
            let Some(cpus) = self.vm_cpus.get(&vm) else { continue };
            let targets: Vec<u16> = cpus.iter().copied().collect();
            if targets.is_empty() {
                continue;
            }
            let in_guest: Vec<bool> = (0..self.cfg.cpus as u16)
                .map(|t| self.cfg.virtualized && Some(t) != initiator && targets.contains(&t))
                .collect();
            let out = tcoherence::sw_shootdown(&mut self.ts, &targets, &in_guest, &self.cfg.cost);
            self.stats.shootdowns += 1;
            self.stats.ipis += out.ipis;
            self.stats.vm_exits += out.vm_exits;
            self.stats.interrupts += out.ipis - out.vm_exits;
            self.stats.shootdown_flushed += out.flushed.total();
            self.stats.stall_shootdown += out.initiator_stall;
            for (t, busy) in &out.target_busy {
                self.clocks[*t as usize] += busy;
            }
            stall += out.initiator_stall;
            let idx = self.record_idx;
            self.log(|| {
                format!(
                    "{idx} shootdown vm={vm} targets={} stall={}",
                    out.ipis, out.initiator_stall
                )
            });
        }
        stall
    }

    /// Guest-virtual page not mapped: the guest OS installs a mapping to a
    /// fresh guest-physical page. Its PTE stores are ordinary coherent
    /// writes from the faulting CPU.
    fn guest_fault(&mut self, cpu: usize, asid: AddressSpace, gvp: Gvp) -> Result<u64, EngineError> {
        self.stats.guest_faults += 1;
        let n = self.next_gpp.entry(asid.vm).or_insert(0);
        let gpp = Gpp(*n);
        *n += 1;
        let lines = self.tables.map_guest(asid, gvp, gpp, &mut self.mem)?;
        for l in lines {
            self.loud_pt_write(cpu, l.base(), None);
        }
        let idx = self.record_idx;
        self.log(|| format!("{idx} guest_fault vm={} pid={} gvp={:#x}", asid.vm, asid.pid, gvp.0));
        Ok(self.cfg.cost.guest_fault)
    }

    /// Bare-metal page fault: the OS places and maps the page directly.
    fn direct_fault(&mut self, cpu: usize, asid: AddressSpace, gvp: Gvp) -> Result<u64, EngineError> {
        self.stats.guest_faults += 1;
        let gpp = Gpp(gvp.0);
        let (spp, fast) = self.place_first_touch(asid.vm, gpp)?;
        let lines = self.tables.map_direct(asid, gvp, spp, &mut self.mem)?;
        for l in lines {
            self.loud_pt_write(cpu, l.base(), None);
        }
        self.mapped.push((asid.vm, gpp));
        let idx = self.record_idx;
        self.log(|| format!("{idx} first_touch vm={} gpp={:#x} spp={:#x} fast={fast}", asid.vm, gpp.0, spp.0));
        Ok(self.cfg.cost.guest_fault + self.cfg.cost.fault_fixed)
    }

    /// Guest-physical page not mapped in the nested tree: the hypervisor
    /// places it (fast while frames last, slow after) and maps it. A fresh
    /// mapping leaves nothing stale, so no shootdown and no copy.
    fn nested_fault(&mut self, cpu: usize, vm: u16, gpp: Gpp) -> Result<u64, EngineError> {
        self.stats.nested_faults += 1;
        self.stats.vm_exits += 1;
        let (spp, fast) = self.place_first_touch(vm, gpp)?;
        let lines = self.tables.map_nested(vm, gpp, spp, &mut self.mem)?;
        for l in lines {
            self.loud_pt_write(cpu, l.base(), None);
        }
        self.mapped.push((vm, gpp));
        let idx = self.record_idx;
        self.log(|| format!("{idx} first_touch vm={vm} gpp={:#x} spp={:#x} fast={fast}", gpp.0, spp.0));
        Ok(self.cfg.cost.vm_exit + self.cfg.cost.fault_fixed)
    }

    fn place_first_touch(&mut self, vm: u16, gpp: Gpp) -> Result<(Spp, bool), EngineError> {
        match &mut self.hv {
            Some(h) => {
                let mut env = TableEnv { tables: &self.tables, mem: &mut self.mem };
                Ok(h.first_touch(vm, gpp, &mut env)?)
            }
            None => Ok((self.mem.alloc_data_slow()?, false)),
        }
    }

    /// Access to a slow-resident page: VM exit, migrate it (evicting and
    /// prefetching per policy), charge the copies, and shoot down stale
    /// translations in software mode.
    fn demand_fault(&mut self, cpu: usize, vm: u16, gpp: Gpp, current: Spp) -> Result<u64, EngineError> {
        self.stats.demand_faults += 1;
        let c = &self.cfg.cost;
        let mut lat = c.fault_fixed
            + if self.cfg.virtualized {
                self.stats.vm_exits += 1;
                c.vm_exit
            } else {
                self.stats.interrupts += 1;
                c.interrupt
            };
        let plan = {
            let mut env = TableEnv { tables: &self.tables, mem: &mut self.mem };
            self.hv
                .as_mut()
                .expect("demand faults require the paging engine")
                .demand_fault(vm, gpp, current, &mut env)?
        };
        let start = self.clocks[cpu] + lat;
        let mut now = start;
        let mut vms = BTreeSet::new();
        for mv in plan.evictions.iter().chain(std::iter::once(&plan.promotion)) {
            self.execute_remap(cpu, mv.vm, mv.gpp, mv.to)?;
            now = self.channels.copy_page(now);
            self.stats.page_copies += 1;
            vms.insert(mv.vm);
        }
        // Prefetch copies queue on the channels without stalling the
        // faulting CPU; their remaps are still synchronous PTE writes.
        for mv in &plan.prefetches {
            self.execute_remap(cpu, mv.vm, mv.gpp, mv.to)?;
            let _ = self.channels.copy_page(now);
            self.stats.page_copies += 1;
            vms.insert(mv.vm);
        }
        self.stats.stall_migration += now - start;
        lat += now - start;
        lat += self.sw_batch_shootdown(Some(cpu as u16), vms);
        let idx = self.record_idx;
        let (ev, pf) = (plan.evictions.len(), plan.prefetches.len());
        self.log(|| {
            format!(
                "{idx} demand_fault vm={vm} gpp={:#x} from={:#x} to={:#x} evict={ev} prefetch={pf}",
                gpp.0, current.0, plan.promotion.to.0
            )
        });
        Ok(lat)
    }

    /// Watermark daemon: runs on the housekeeping clock, evicts cold pages
    /// ahead of demand.
    fn daemon_tick(&mut self) -> Result<(), EngineError> {
        let moves = {
            let Some(h) = &mut self.hv else { return Ok(()) };
            let mut env = TableEnv { tables: &self.tables, mem: &mut self.mem };
            h.daemon_tick(&mut env)?
        };
        self.stats.daemon_ticks += 1;
        if moves.is_empty() {
            return Ok(());
        }
        let hcpu = self.cfg.cpus - 1;
        let hclock = self.cfg.cpus;
        let mut now = self.clocks[hclock];
        let mut vms = BTreeSet::new();
        for mv in &moves {
            self.execute_remap(hcpu, mv.vm, mv.gpp, mv.to)?;
            now = self.channels.copy_page(now);
            self.stats.page_copies += 1;
            vms.insert(mv.vm);
        }
        self.clocks[hclock] = now;
        let stall = self.sw_batch_shootdown(None, vms);
        self.clocks[hclock] += stall;
        let idx = self.record_idx;
        let n = moves.len();
        self.log(|| format!("{idx} daemon moves={n}"));
        Ok(())
    }

    /// Defragmentation-style remap of one random mapped page to a slow
    /// frame. Functionally mode-independent: victim choice consumes the
    /// same RNG stream in every mode.
    fn background_remap(&mut self) -> Result<(), EngineError> {
        if self.mapped.is_empty() {
            return Ok(());
        }
        self.stats.background_remaps += 1;
        let idx = self.rng.gen_range(0..self.mapped.len());
        let (vm, gpp) = self.mapped[idx];
        let from = if self.cfg.virtualized {
            self.tables
                .nested_resolve(vm, gpp, &self.mem)
                .expect("mapped list holds only mapped pages")
        } else {
            self.tables
                .resolve(AddressSpace { vm, pid: 0 }, Gvp(gpp.0), &self.mem)
                .expect("mapped list holds only mapped pages")
                .spp
        };
        let to = match &mut self.hv {
            Some(h) => {
                let mut env = TableEnv { tables: &self.tables, mem: &mut self.mem };
                h.take_slow_frame(&mut env)?
            }
            None => self.mem.alloc_data_slow()?,
        };
        let hcpu = self.cfg.cpus - 1;
        let hclock = self.cfg.cpus;
        self.execute_remap(hcpu, vm, gpp, to)?;
        if let Some(h) = &mut self.hv {
            // Vacate the pool slot (a demotion) or recycle the slow frame.
            if h.resident_frame(vm, gpp).is_some() {
                h.expel(vm, gpp);
            } else {
                h.recycle_slow(from);
            }
        }
        let now = self.clocks[hclock];
        self.clocks[hclock] = self.channels.copy_page(now);
        self.stats.page_copies += 1;
        let stall = self.sw_batch_shootdown(None, [vm]);
        self.clocks[hclock] += stall;
        let ridx = self.record_idx;
        self.log(|| format!("{ridx} bg_remap vm={vm} gpp={:#x} from={:#x} to={:#x}", gpp.0, from.0, to.0));
        Ok(())
    }

    fn log(&mut self, f: impl FnOnce() -> String) {
        if let Some(ev) = &mut self.events {
            ev.push_str(&f());
            ev.push('\n');
        }
    }

    /// Safety oracle, on when `debug_checks` is set: the translation every
    /// structure holds for the record must match a from-scratch table
    /// resolution, and (periodically) the coherence fabric's invariants
    /// and the translation-tracking conservatism must hold.
    fn audit(&mut self, r: &TraceRecord) -> Result<(), EngineError> {
        let asid = AddressSpace { vm: r.vm, pid: r.pid };
        let resolved = self
            .tables
            .resolve(asid, r.gvp, &self.mem)
            .expect("a translated record leaves the page mapped");
        let cpu = r.cpu as usize;
        let key = TlbKey { vm: r.vm, gvp: r.gvp };
        for cache in [&self.ts[cpu].l1_tlb, &self.ts[cpu].l2_tlb] {
            if let Some(e) = cache.peek(key) {
                if e.value.spp != resolved.spp {
                    return Err(EngineError::Invariant(format!(
                        "record {}: stale TLB translation gvp={:#x} cached spp={:#x} actual spp={:#x}",
                        self.record_idx, r.gvp.0, e.value.spp.0, resolved.spp.0
                    )));
                }
            }
        }
        if (self.record_idx + 1) % self.cfg.debug_full_audit_every == 0 {
            self.full_audit()?;
        }
        Ok(())
    }

    fn full_audit(&self) -> Result<(), EngineError> {
        self.coh.check_invariants().map_err(EngineError::Invariant)?;
        if self.cfg.mode.hw_translation_coherence() {
            for cpu in 0..self.cfg.cpus {
                for line in self.ts[cpu].live_source_lines() {
                    if !self.coh.tracks_pt_source(cpu, line) {
                        return Err(EngineError::Invariant(format!(
                            "cpu {cpu}: live translation source {:#x} untracked by the directory",
                            line.0
                        )));
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
    use crate::config::PagingPolicy;
    use crate::stats::Report;
    use crate::trace::{Archetype, WorkloadSpec};

    fn small_cfg(mode: CoherenceMode) -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.mode = mode;
        cfg.cpus = 4;
        cfg.vcpus = 4;
        cfg.mem.fast_bytes = 16 * PAGE_BYTES;
        cfg.mem.slow_bytes = 512 * PAGE_BYTES;
        cfg.paging.low_watermark = 2;
        cfg.paging.high_watermark = 4;
        cfg.paging.daemon_period = 64;
        cfg.debug_checks = true;
        cfg
    }

    fn workload(records: u64, pages: u64, seed: u64) -> Vec<TraceRecord> {
        WorkloadSpec {
            archetype: Archetype::Zipfian,
            records,
            footprint_pages: pages,
            vcpus: 4,
            processes: 1,
            store_ratio: 0.3,
            zipf_exponent: 0.9,
            background_remaps_per_m: 0,
            seed,
        }
        .generate()
        .collect()
    }

    fn two_pass_recs() -> Vec<TraceRecord> {
        // Two accesses each to four pages, one CPU: a load pass, then a
        // store pass.
        let mut recs = Vec::new();
        for pass in 0..2 {
            for p in 0..4u64 {
                recs.push(TraceRecord {
                    cpu: 0,
                    vm: 0,
                    pid: 0,
                    op: if pass == 0 { Op::Load } else { Op::Store },
                    gvp: Gvp(p),
                });
            }
        }
        recs
    }

    #[test]
    fn cold_pages_walk_once_then_hit() {
        // Software mode: no probe fallout, so the second pass hits cleanly.
        let mut cfg = small_cfg(CoherenceMode::Sw);
        cfg.cpus = 1;
        cfg.vcpus = 1;
        cfg.paging.enabled = false;
        let out = run(&cfg, &two_pass_recs()).unwrap();
        assert_eq!(out.stats.records, 8);
        assert_eq!(out.stats.walks, 4, "one successful walk per cold page");
        assert_eq!(out.stats.guest_faults, 4);
        assert_eq!(out.stats.nested_faults, 4);
        // Pass two: 4 TLB hits; each store dirties a clean page.
        assert_eq!(out.stats.tlb_l1_hits, 4);
        assert_eq!(out.stats.dirty_set_events, 4);
        assert_eq!(out.stats.hv.first_touch_fast, 0, "paging disabled");
        assert!(out.stats.cycles > 0);
    }

    #[test]
    fn hardware_mode_pays_for_metadata_rmws_on_shared_lines() {
        // All four pages' nested leaves share one line, so each walk's
        // A/D-bit read-modify-write self-probes that line's co-tag class
        // and evicts the neighbours' freshly-filled entries. The cold
        // transient costs extra walks; it quiesces once the bits stick.
        let mut cfg = small_cfg(CoherenceMode::Hatric);
        cfg.cpus = 1;
        cfg.vcpus = 1;
        cfg.paging.enabled = false;
        let out = run(&cfg, &two_pass_recs()).unwrap();
        assert_eq!(out.stats.walks, 8, "metadata writes re-trigger neighbour walks");
        assert_eq!(out.stats.tlb_l1_hits, 0);
        assert!(out.stats.self_probes > 0);
        assert_eq!(out.stats.dirty_set_events, 4);
        // Once every A and D bit sticks, walks stop writing and entries
        // accumulate: two more all-load passes walk 3 times (page 3
        // survived the store pass) and then hit every time.
        let mut recs = two_pass_recs();
        recs.extend(two_pass_recs().into_iter().map(|mut r| {
            r.op = Op::Load;
            r
        }));
        let warm = run(&cfg, &recs).unwrap();
        assert_eq!(warm.stats.walks, 11);
        assert_eq!(warm.stats.tlb_l1_hits, 5);
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let cfg = {
            let mut c = small_cfg(CoherenceMode::Hatric);
            c.background_remaps_per_m = 20_000; // every 50 records
            c.paging.policy = PagingPolicy::parse("lru,daemon,prefetch2").unwrap();
            c.log_events = true;
            c
        };
        let recs = workload(800, 64, 7);
        let a = run(&cfg, &recs).unwrap();
        let b = run(&cfg, &recs).unwrap();
        assert_eq!(a.events, b.events);
        let ra = Report::new(&cfg, a.stats);
        let rb = Report::new(&cfg, b.stats);
        assert_eq!(ra.csv_row(), rb.csv_row());
    }

    /// The functional outcome — final frame of every page, placement
    /// split, fault counts — must not depend on the coherence mode; only
    /// timing and probe/flush counts may.
    #[test]
    fn functional_state_is_mode_independent() {
        let recs = workload(1200, 48, 11);
        let mut outs = Vec::new();
        for mode in [
            CoherenceMode::Sw,
            CoherenceMode::Hatric,
            CoherenceMode::TlbOnly,
            CoherenceMode::Ideal,
        ] {
            let mut cfg = small_cfg(mode);
            cfg.background_remaps_per_m = 10_000;
            cfg.paging.policy = PagingPolicy::parse("lru,daemon,prefetch1").unwrap();
            let out = run(&cfg, &recs).unwrap();
            outs.push(out.stats);
        }
        let base = &outs[0];
        for s in &outs[1..] {
            assert_eq!(s.guest_faults, base.guest_faults);
            assert_eq!(s.nested_faults, base.nested_faults);
            assert_eq!(s.demand_faults, base.demand_faults);
            assert_eq!(s.remaps, base.remaps);
            assert_eq!(s.hv, base.hv, "placement history must match exactly");
        }
        // The modes do differ where they should.
        assert!(outs[0].shootdowns > 0, "software mode shoots down on remaps");
        assert_eq!(outs[1].shootdowns, 0, "hardware mode never shoots down");
        assert!(outs[1].probes_sent + outs[1].self_probes > 0, "hardware mode probes");
        assert_eq!(outs[0].probes_sent, 0, "software mode never probes");
    }

    #[test]
    fn audits_hold_across_modes_under_churn() {
        // Heavy migration pressure + background remaps, oracle on.
        for mode in [
            CoherenceMode::Sw,
            CoherenceMode::Hatric,
            CoherenceMode::TlbOnly,
            CoherenceMode::Ideal,
        ] {
            let mut cfg = small_cfg(mode);
            cfg.background_remaps_per_m = 50_000; // every 20 records
            cfg.paging.policy = PagingPolicy::parse("lru,daemon,prefetch2").unwrap();
            let recs = workload(2000, 96, 13);
            let out = run(&cfg, &recs).unwrap();
            assert!(out.stats.demand_faults > 0, "churn must actually migrate ({mode:?})");
        }
    }

    #[test]
    fn bare_metal_walks_are_short() {
        let mut cfg = small_cfg(CoherenceMode::Hatric);
        cfg.virtualized = false;
        cfg.cpus = 1;
        cfg.vcpus = 1;
        cfg.paging.enabled = false;
        let recs: Vec<TraceRecord> = (0..4u64)
            .map(|p| TraceRecord { cpu: 0, vm: 0, pid: 0, op: Op::Load, gvp: Gvp(p) })
            .collect();
        let out = run(&cfg, &recs).unwrap();
        assert_eq!(out.stats.walks, 4);
        // First walk touches all four levels; the rest resume from the
        // paging-structure cache's level-2 entry and read only the leaf.
        assert_eq!(out.stats.walk_refs, 7);
        assert_eq!(out.stats.walks_mmu_assisted, 3);
        assert_eq!(out.stats.nested_faults, 0);
    }

    #[test]
    fn rejects_multiprogram_bare_metal() {
        let mut cfg = small_cfg(CoherenceMode::Sw);
        cfg.virtualized = false;
        let recs = vec![TraceRecord { cpu: 0, vm: 0, pid: 1, op: Op::Load, gvp: Gvp(0) }];
        assert!(matches!(run(&cfg, &recs), Err(EngineError::Trace { .. })));
    }

    #[test]
    fn rejects_out_of_range_cpu() {
        let cfg = small_cfg(CoherenceMode::Sw);
        let recs = vec![TraceRecord { cpu: 9, vm: 0, pid: 0, op: Op::Load, gvp: Gvp(0) }];
        assert!(matches!(run(&cfg, &recs), Err(EngineError::Trace { .. })));
    }
}
