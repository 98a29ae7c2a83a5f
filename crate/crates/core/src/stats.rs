//! Flat run counters and the tabular report they render into.
//!
//! Every simulated run produces one [`SimStats`] value. The engine owns the
//! counters that only it can see (faults, shootdowns, stall cycles); the
//! per-CPU translation structures, the cache model and the paging policy
//! keep their own tallies, which [`SimStats::absorb_*`] folds in at the end
//! of a run. Rendering goes through a single `columns()` list so the CSV
//! header, the CSV row and the `key=value` dump can never drift apart —
//! repeated runs of the same configuration must be byte-identical.

use crate::coherence::CohStats;
use crate::config::SimConfig;
use crate::energy::{self, EnergyReport};
use crate::hypervisor::HvStats;
use crate::tstruct::{InvalidationCounts, Tstructs};

/// All counters of one run, flattened for reporting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimStats {
    // Trace consumption.
    pub records: u64,
    pub loads: u64,
    pub stores: u64,

    // Address translation.
    pub tlb_l1_hits: u64,
    pub tlb_l2_hits: u64,
    /// TLB misses, i.e. page walks started (faulted retries included).
    pub walks: u64,
    /// Memory references issued by the walker.
    pub walk_refs: u64,
    /// Cycles spent in walker references (sum of per-reference latencies).
    pub walk_cycles: u64,
    /// Walks that hit the nested TLB at least once.
    pub walks_ntlb_assisted: u64,
    /// Walks that started from a paging-structure-cache hit.
    pub walks_mmu_assisted: u64,
    /// Leaf dirty-bit write pairs performed (first store to a clean page).
    pub dirty_set_events: u64,

    // Translation-structure totals, aggregated over CPUs at run end.
    pub tstruct_lookups: u64,
    pub tstruct_fills: u64,
    pub tstruct_evictions: u64,
    pub cam_scanned: u64,

    // Translation invalidation, by mechanism.
    pub selective_inv: InvalidationCounts,
    pub flush_invalidated: u64,
    /// Translation entries purged because a directory eviction recalled a
    /// page-table line out from under them.
    pub back_inv_purged: u64,
    pub probes_sent: u64,
    pub spurious_probes: u64,
    pub self_probes: u64,

    // Faults and the paging engine.
    pub guest_faults: u64,
    pub nested_faults: u64,
    pub demand_faults: u64,
    pub background_remaps: u64,
    pub daemon_ticks: u64,
    /// Nested (or bare-metal) leaf rewrites that changed a frame.
    pub remaps: u64,
    pub page_copies: u64,
    pub hv: HvStats,

    // Software shootdowns.
    pub shootdowns: u64,
    pub ipis: u64,
    pub vm_exits: u64,
    pub interrupts: u64,
    pub shootdown_flushed: u64,

    // Cache coherence, merged over the run.
    pub coh: CohStats,

    // Time.
    pub cycles: u64,
    pub stall_shootdown: u64,
    pub stall_migration: u64,
    pub stall_fault: u64,
}

impl SimStats {
    /// Fold one CPU's translation-structure counters into the run totals.
    pub fn absorb_tstructs(&mut self, ts: &Tstructs) {
        for s in [&ts.l1_tlb.stats, &ts.l2_tlb.stats, &ts.ntlb.stats, &ts.mmu.stats] {
            self.tstruct_lookups += s.hits + s.misses;
            self.tstruct_fills += s.fills;
            self.tstruct_evictions += s.evictions;
            self.cam_scanned += s.cam_scanned;
            self.flush_invalidated += s.flush_invalidated;
        }
        self.tlb_l1_hits += ts.l1_tlb.stats.hits;
        self.tlb_l2_hits += ts.l2_tlb.stats.hits;
    }

    pub fn absorb_coh(&mut self, coh: CohStats) {
        self.coh = coh;
    }

    pub fn absorb_hv(&mut self, hv: HvStats) {
        self.hv = hv;
    }

    /// Total translation entries killed by selective (co-tag or exact)
    /// probes, across all structures.
    pub fn selective_total(&self) -> u64 {
        self.selective_inv.total()
    }
}

/// A finished run bundled with its configuration and energy accounting,
/// ready to render.
#[derive(Debug, Clone)]
pub struct Report {
    pub config_hash: String,
    pub mode: String,
    pub cotag_bits: u32,
    pub tstruct_mult: usize,
    pub cpus: usize,
    pub vcpus: usize,
    pub seed: u64,
    pub stats: SimStats,
    pub energy: EnergyReport,
}

impl Report {
    pub fn new(cfg: &SimConfig, stats: SimStats) -> Report {
        let energy = energy::report(cfg, &stats);
        Report {
            config_hash: cfg.hash(),
            mode: cfg.mode.as_str().to_string(),
            cotag_bits: cfg.cotag_bits,
            tstruct_mult: cfg.tstruct.size_mult,
            cpus: cfg.cpus,
            vcpus: cfg.vcpus,
            seed: cfg.seed,
            stats,
            energy,
        }
    }

    /// Column name/value pairs, in the one canonical order.
    pub fn columns(&self) -> Vec<(&'static str, String)> {
        let s = &self.stats;
        let c = &s.coh;
        let e = &self.energy;
        let mut out: Vec<(&'static str, String)> = Vec::with_capacity(72);
        macro_rules! col {
            ($name:ident, $val:expr) => {
                out.push((stringify!($name), $val.to_string()))
            };
        }
        col!(mode, self.mode);
        col!(cotag_bits, self.cotag_bits);
        col!(tstruct_mult, self.tstruct_mult);
        col!(cpus, self.cpus);
        col!(vcpus, self.vcpus);
        col!(seed, self.seed);
        out.push(("config_hash", self.config_hash.clone()));

        col!(records, s.records);
        col!(loads, s.loads);
        col!(stores, s.stores);
        col!(cycles, s.cycles);

        col!(tlb_l1_hits, s.tlb_l1_hits);
        col!(tlb_l2_hits, s.tlb_l2_hits);
        col!(walks, s.walks);
        col!(walk_refs, s.walk_refs);
        col!(walk_cycles, s.walk_cycles);
        col!(walks_ntlb_assisted, s.walks_ntlb_assisted);
        col!(walks_mmu_assisted, s.walks_mmu_assisted);
        col!(dirty_set_events, s.dirty_set_events);
        col!(tstruct_lookups, s.tstruct_lookups);
        col!(tstruct_fills, s.tstruct_fills);
        col!(tstruct_evictions, s.tstruct_evictions);
        col!(cam_scanned, s.cam_scanned);

        col!(sel_inv_l1_tlb, s.selective_inv.l1_tlb);
        col!(sel_inv_l2_tlb, s.selective_inv.l2_tlb);
        col!(sel_inv_ntlb, s.selective_inv.ntlb);
        col!(sel_inv_mmu, s.selective_inv.mmu);
        col!(flush_invalidated, s.flush_invalidated);
        col!(back_inv_purged, s.back_inv_purged);
        col!(probes_sent, s.probes_sent);
        col!(spurious_probes, s.spurious_probes);
        col!(self_probes, s.self_probes);

        col!(guest_faults, s.guest_faults);
        col!(nested_faults, s.nested_faults);
        col!(demand_faults, s.demand_faults);
        col!(background_remaps, s.background_remaps);
        col!(daemon_ticks, s.daemon_ticks);
        col!(remaps, s.remaps);
        col!(page_copies, s.page_copies);
        col!(first_touch_fast, s.hv.first_touch_fast);
        col!(first_touch_slow, s.hv.first_touch_slow);
        col!(demand_migrations, s.hv.demand_migrations);
        col!(daemon_migrations, s.hv.daemon_migrations);
        col!(prefetches, s.hv.prefetches);
        col!(evictions, s.hv.evictions);
        col!(clock_scans, s.hv.clock_scans);

        col!(shootdowns, s.shootdowns);
        col!(ipis, s.ipis);
        col!(vm_exits, s.vm_exits);
        col!(interrupts, s.interrupts);
        col!(shootdown_flushed, s.shootdown_flushed);

        col!(coh_reads, c.reads);
        col!(coh_writes, c.writes);
        col!(coh_l1_hits, c.l1_hits);
        col!(coh_l2_hits, c.l2_hits);
        col!(coh_llc_hits, c.llc_hits);
        col!(coh_remote_fetches, c.remote_fetches);
        col!(coh_dram_fetches, c.dram_fetches);
        col!(coh_invalidations, c.invalidations_sent);
        col!(coh_upgrades, c.upgrades);
        col!(coh_silent_upgrades, c.silent_upgrades);
        col!(coh_writebacks, c.writebacks);
        col!(coh_dir_evictions, c.dir_evictions);
        col!(coh_back_inv_purges, c.back_inv_purges);
        col!(walker_marks_piggybacked, c.walker_marks_piggybacked);
        col!(walker_mark_messages, c.walker_mark_messages);
        col!(sharer_demotions, c.sharer_demotions);
        col!(coh_messages, c.messages);

        col!(stall_shootdown, s.stall_shootdown);
        col!(stall_migration, s.stall_migration);
        col!(stall_fault, s.stall_fault);

        out.push(("effective_tag_bytes", format!("{:.4}", e.effective_tag_bytes)));
        out.push(("energy_dynamic", format!("{:.4}", e.dynamic)));
        out.push(("energy_static", format!("{:.4}", e.static_energy)));
        out.push(("energy_total", format!("{:.4}", e.total)));
        out
    }

    pub fn csv_header(&self) -> String {
        self.columns().iter().map(|(k, _)| *k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.columns().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }

    /// `key=value` lines, one per column, for human consumption.
    pub fn kv_dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.columns() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
