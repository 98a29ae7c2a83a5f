//! Post-run energy accounting.
//!
//! Energy is reported in abstract units: each dynamic event class costs a
//! configurable weight ([`crate::config::EnergyModel`]), and static energy
//! accrues per cycle. The interesting interaction is the tag overhead:
//! wider per-entry tags raise static cost linearly, while narrower tags
//! alias more page-table lines into one equivalence class, causing spurious
//! invalidations whose refill walks show up as extra dynamic energy *and*
//! extra cycles of static burn. Whole-structure-flush designs pay instead
//! with a reverse-lookup CAM of fixed width. Software-only and exact
//! (oracle) invalidation carry no tag hardware at all.

use crate::addr::{LINE_BYTES, PAGE_BYTES};
use crate::config::{CoherenceMode, SimConfig};
use crate::stats::SimStats;

/// Energy totals of one run, in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    /// Per-entry tag storage the invalidation mechanism needs, in bytes.
    pub effective_tag_bytes: f64,
    pub dynamic: f64,
    pub static_energy: f64,
    pub total: f64,
}

/// Bytes of per-entry tag hardware a coherence mode requires.
pub fn effective_tag_bytes(cfg: &SimConfig) -> f64 {
    match cfg.mode {
        CoherenceMode::Hatric => cfg.cotag_bits as f64 / 8.0,
        CoherenceMode::TlbOnly => cfg.energy.unitd_cam_bytes,
        CoherenceMode::Sw | CoherenceMode::Ideal => 0.0,
    }
}

/// Fold a run's counters into dynamic + static energy.
pub fn report(cfg: &SimConfig, stats: &SimStats) -> EnergyReport {
    let e = &cfg.energy;
    let c = &stats.coh;
    let lines_per_page = (PAGE_BYTES / LINE_BYTES) as u64;

    // Every probe or fill touches a translation-structure array once;
    // invalidation sweeps pay per entry compared, and each compare costs
    // proportionally to the tag width it matches against.
    let tag_bytes = effective_tag_bytes(cfg);
    let tstruct = e.tstruct_probe * (stats.tstruct_lookups + stats.tstruct_fills) as f64
        + e.cam_entry * tag_bytes * stats.cam_scanned as f64;

    // Local cache arrays on every access; the directory on anything that
    // leaves the private hierarchy.
    let cache = e.cache_probe * (c.reads + c.writes) as f64;
    let directory = e.directory_probe
        * (c.llc_hits
            + c.remote_fetches
            + c.dram_fetches
            + c.upgrades
            + c.invalidations_sent
            + c.walker_mark_messages) as f64;
    let network = e.message * c.messages as f64;

    // Line fetches, writebacks, and page migrations (a copy reads and
    // writes every line of the page).
    let dram = e.dram_access
        * (c.dram_fetches + c.writebacks + 2 * lines_per_page * stats.page_copies) as f64;

    let dynamic = tstruct + cache + directory + network + dram;

    let tstruct_leak = e.tstruct_static
        * cfg.tstruct.size_mult as f64
        * (1.0 + e.cotag_static_per_byte * tag_bytes);
    let static_energy = stats.cycles as f64 * (e.static_base + tstruct_leak);

    EnergyReport { effective_tag_bytes: tag_bytes, dynamic, static_energy, total: dynamic + static_energy }
}
