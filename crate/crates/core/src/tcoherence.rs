//! Translation-coherence policy: what happens to TLBs, nested TLBs and MMU
//! caches when page-table lines change.
//!
//! Four strategies share the same cache-coherence substrate:
//!
//! * `sw` — unmodified hardware. Translation structures are incoherent;
//!   after changing a mapping, software interrupts every vCPU of the VM and
//!   flushes all four structures there (the classic shootdown).
//! * `hatric` — every structure entry carries a co-tag (a slice of the
//!   system physical address of the entry it was minted from). Ownership
//!   requests for page-table lines piggyback translation probes: each
//!   recipient associatively invalidates entries whose co-tag class matches
//!   the written line. No interrupts, no flushes.
//! * `tlb-only` — co-tags exist only in the TLBs; nested TLBs and MMU
//!   caches cannot be searched by physical address, so a probed CPU flushes
//!   them wholesale. Strictly between `sw` and `hatric` by construction.
//! * `ideal` — an oracle that removes exactly the entries minted from the
//!   written line, everywhere, for free. Lower bound.
//!
//! The functions here are stateless: they apply structure effects and
//! report what happened; the engine owns clocks and converts effects into
//! cycles via the cost model.

use crate::addr::{cotag_of, Spa};
use crate::coherence::{BackInv, Coherence, WriteOutcome};
use crate::config::{CoherenceMode, CostModel};
use crate::pagetable::PtKind;
use crate::tstruct::{InvalidationCounts, Tstructs};

/// What happened at one invalidation recipient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetEffect {
    pub cpu: u16,
    /// Translation structures were associatively probed here.
    pub probed: bool,
    pub invalidated: InvalidationCounts,
    /// Probe found no cache copy and no matching translations: pure noise,
    /// answered with a sharer demotion.
    pub spurious: bool,
}

/// Full fallout of one coherent store.
#[derive(Debug, Clone)]
pub struct WriteEffects {
    pub outcome: WriteOutcome,
    /// The writer's own structures are probed too when it knows it is
    /// overwriting a page-table line (no messages involved).
    pub self_probe: Option<InvalidationCounts>,
    pub targets: Vec<TargetEffect>,
    /// Translations dropped because directory evictions pushed their source
    /// lines out of tracking.
    pub back_inv_purged: InvalidationCounts,
}

impl CoherenceMode {
    /// Translation structures are kept coherent by hardware (as opposed to
    /// software shootdowns).
    pub fn hw_translation_coherence(self) -> bool {
        !matches!(self, CoherenceMode::Sw)
    }
}

fn line_class(spa: Spa, cotag_bits: u32) -> u32 {
    cotag_of(Spa(spa.0 & !7), cotag_bits).expect("masked to alignment").line_class()
}

/// Invalidate whatever `mode` says a probed CPU must drop for a write to
/// `spa`.
fn probe_structures(
    mode: CoherenceMode,
    ts: &mut Tstructs,
    spa: Spa,
    cotag_bits: u32,
) -> InvalidationCounts {
    match mode {
        CoherenceMode::Hatric => ts.invalidate_class_all(line_class(spa, cotag_bits)),
        CoherenceMode::TlbOnly => ts.invalidate_tlb_class_flush_rest(line_class(spa, cotag_bits)),
        CoherenceMode::Ideal => ts.invalidate_src_line_all(spa.line()),
        CoherenceMode::Sw => InvalidationCounts::default(),
    }
}

/// Perform a coherent store at `cpu` and apply this mode's translation
/// fallout: self-probes, per-target probes with spurious-probe demotion,
/// and structure purges forced by directory evictions.
///
/// Plain data stores route through here too; they reach the directory like
/// any store but probe nothing because no page-table flag is set anywhere.
pub fn coherent_write(
    mode: CoherenceMode,
    coh: &mut Coherence,
    ts_all: &mut [Tstructs],
    cotag_bits: u32,
    cpu: usize,
    spa: Spa,
    walker: Option<PtKind>,
) -> WriteEffects {
    let line = spa.line();
    let outcome = coh.cpu_write(cpu, line, walker);
    if outcome.needs_walker_mark {
        coh.walker_mark(line, walker.expect("mark only requested for walker writes"));
    }

    // The writer's own structures: probed when the written line is known
    // locally (cache hint) or globally (directory flag) to carry entries.
    let self_probe = if mode.hw_translation_coherence() {
        let (lg, ln) = coh.local_pt_hints(cpu, line);
        let (dg, dn) = (outcome.dir_gpt, outcome.dir_npt);
        (lg || ln || dg || dn || walker.is_some())
            .then(|| probe_structures(mode, &mut ts_all[cpu], spa, cotag_bits))
    } else {
        None
    };

    let mut targets = Vec::with_capacity(outcome.targets.len());
    for t in &outcome.targets {
        let pt_known = if t.had_cache_copy {
            t.local_gpt || t.local_npt
        } else {
            outcome.dir_gpt || outcome.dir_npt
        };
        let probed = mode.hw_translation_coherence() && pt_known;
        let invalidated = if probed {
            probe_structures(mode, &mut ts_all[t.cpu as usize], spa, cotag_bits)
        } else {
            InvalidationCounts::default()
        };
        let spurious = probed && !t.had_cache_copy && invalidated.total() == 0;
        if spurious {
            coh.demote_sharer(t.cpu as usize, line);
        }
        targets.push(TargetEffect { cpu: t.cpu, probed, invalidated, spurious });
    }

    let back_inv_purged = apply_back_invs(mode, ts_all, cotag_bits, &outcome.back_invs);
    WriteEffects { outcome, self_probe, targets, back_inv_purged }
}

/// A directory eviction dropped tracking for these lines: purge any
/// translations minted from them at the affected CPUs, so the "directory
/// covers every live translation source" invariant survives.
pub fn apply_back_invs(
    mode: CoherenceMode,
    ts_all: &mut [Tstructs],
    cotag_bits: u32,
    back_invs: &[BackInv],
) -> InvalidationCounts {
    let mut purged = InvalidationCounts::default();
    if !mode.hw_translation_coherence() {
        // Unmodified hardware: nothing in the directory protects TLBs, and
        // nothing needs to — software flushes are correctness's only source.
        return purged;
    }
    for bi in back_invs {
        if !(bi.gpt || bi.npt) {
            continue;
        }
        for &cpu in &bi.cpus {
            let counts = probe_structures(mode, &mut ts_all[cpu as usize], bi.line.base(), cotag_bits);
            purged.merge(counts);
        }
    }
    purged
}

/// One software shootdown: interrupt every vCPU of the VM, flush all four
/// translation structures there, and stall the initiator until the last
/// acknowledgment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShootdownOutcome {
    pub ipis: u64,
    pub vm_exits: u64,
    /// Cycles the initiating CPU is stalled (send IPIs serially, then wait
    /// for the slowest responder).
    pub initiator_stall: u64,
    /// Busy cycles added at each interrupted CPU.
    pub target_busy: Vec<(u16, u64)>,
    pub flushed: InvalidationCounts,
}

pub fn sw_shootdown(
    ts_all: &mut [Tstructs],
    targets: &[u16],
    in_guest: &[bool],
    costs: &CostModel,
) -> ShootdownOutcome {
    let mut flushed = InvalidationCounts::default();
    let mut target_busy = Vec::with_capacity(targets.len());
    let mut vm_exits = 0;
    let mut slowest = 0u64;
    for &t in targets {
        let counts = ts_all[t as usize].flush_all();
        // Entry and exit from the handler: a vCPU in guest mode pays a VM
        // exit, a CPU already in the host pays a plain interrupt.
        let entry = if in_guest[t as usize] {
            vm_exits += 1;
            costs.vm_exit
        } else {
            costs.interrupt
        };
        let busy = entry + 4 * costs.probe + costs.per_inv * counts.total();
        slowest = slowest.max(busy);
        target_busy.push((t, busy));
        flushed.merge(counts);
    }
    ShootdownOutcome {
        ipis: targets.len() as u64,
        vm_exits,
        initiator_stall: costs.ipi * targets.len() as u64 + slowest,
        target_busy,
        flushed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::{Gpp, Gvp, LineAddr, Spp};
    use crate::config::{CacheConfig, DirectoryConfig, TstructConfig};
    use crate::coherence::WriteKind;
    use crate::tstruct::{TlbKey, TlbPayload};

    const BITS: u32 = 16;

    fn fabric(cpus: usize) -> (Coherence, Vec<Tstructs>) {
        let coh = Coherence::new(
            cpus,
            &CacheConfig {
                l1_lines: 4,
                l1_ways: 2,
                l2_lines: 8,
                l2_ways: 2,
                llc_lines: 64,
                llc_ways: 4,
            },
            &DirectoryConfig { infinite: true, ..Default::default() },
        );
        let ts = (0..cpus).map(|_| Tstructs::new(&TstructConfig::default())).collect();
        (coh, ts)
    }

    /// Mint a TLB entry at `cpu` sourced from the PTE at `src`.
    fn mint(ts: &mut Tstructs, vm: u16, gvp: u64, src: Spa) {
        ts.fill_tlb(
            TlbKey { vm, gvp: Gvp(gvp) },
            TlbPayload { spp: Spp(1), gpp: Gpp(gvp), guest_leaf: src, dirty: false },
            cotag_of(src, BITS).unwrap(),
            src,
        );
    }

    /// Walk-like read: walker-tagged, mark if asked.
    fn walker_read(coh: &mut Coherence, cpu: usize, line: LineAddr) {
        let r = coh.cpu_read(cpu, line, Some(PtKind::Nested));
        if r.needs_walker_mark {
            coh.walker_mark(line, PtKind::Nested);
        }
    }

    /// The canonical selective-invalidation scenario: two CPUs hold
    /// translations from a page-table line, one CPU is a stale sharer with
    /// nothing, and a fourth CPU rewrites the line.
    #[test]
    fn pt_write_probes_exactly_the_interested_cpus() {
        let (mut coh, mut ts) = fabric(4);
        let line = LineAddr(0x40); // PTEs at 0x1000..0x1040
        let pte0 = Spa(0x1000);
        let pte1 = Spa(0x1008);
        let pte2 = Spa(0x1010);

        // CPU 0: one translation, keeps a cache copy.
        walker_read(&mut coh, 0, line);
        mint(&mut ts[0], 0, 100, pte0);
        // CPU 3: two translations, keeps a cache copy.
        walker_read(&mut coh, 3, line);
        mint(&mut ts[3], 0, 101, pte1);
        mint(&mut ts[3], 0, 102, pte2);
        // CPU 1: read the line (sharer), then lose the copy to conflicts.
        coh.cpu_read(1, line, None);
        coh.cpu_read(1, LineAddr(0x48), None);
        coh.cpu_read(1, LineAddr(0x50), None);
        assert!(!coh.has_cached(1, line));

        // CPU 2 (the hypervisor) rewrites a PTE in the line.
        let fx = coherent_write(CoherenceMode::Hatric, &mut coh, &mut ts, BITS, 2, pte1, None);
        assert_eq!(fx.outcome.kind, WriteKind::Miss);
        let by_cpu: std::collections::BTreeMap<u16, &TargetEffect> =
            fx.targets.iter().map(|t| (t.cpu, t)).collect();
        assert_eq!(by_cpu.len(), 3);
        // Both translation holders lose everything minted from the line
        // (co-tags are line-granular), in both TLB levels.
        assert_eq!(by_cpu[&0].invalidated.total(), 2);
        assert!(by_cpu[&0].probed && !by_cpu[&0].spurious);
        assert_eq!(by_cpu[&3].invalidated.total(), 4);
        // The stale sharer is probed, finds nothing, and gets demoted.
        assert!(by_cpu[&1].probed && by_cpu[&1].spurious);
        assert_eq!(by_cpu[&1].invalidated.total(), 0);
        assert_eq!(coh.stats.sharer_demotions, 1);

        // Re-share at CPU 0 only; the demoted CPU is not probed again.
        walker_read(&mut coh, 0, line);
        let fx2 = coherent_write(CoherenceMode::Hatric, &mut coh, &mut ts, BITS, 2, pte1, None);
        let cpus: Vec<u16> = fx2.targets.iter().map(|t| t.cpu).collect();
        assert_eq!(cpus, vec![0]);
    }

    #[test]
    fn data_stores_probe_no_structures() {
        let (mut coh, mut ts) = fabric(2);
        let spa = Spa(0x2000);
        coh.cpu_read(1, spa.line(), None);
        mint(&mut ts[1], 0, 7, Spa(0x2008)); // same class, but line is not PT-flagged
        let fx = coherent_write(CoherenceMode::Hatric, &mut coh, &mut ts, BITS, 0, spa, None);
        assert_eq!(fx.targets.len(), 1);
        assert!(!fx.targets[0].probed);
        assert_eq!(fx.targets[0].invalidated.total(), 0);
        assert!(fx.self_probe.is_none());
        assert_eq!(ts[1].valid_total(), 2, "translation untouched by data traffic");
    }

    #[test]
    fn writer_probes_its_own_structures_on_local_pt_writes() {
        let (mut coh, mut ts) = fabric(2);
        let line = LineAddr(0x40);
        let pte = Spa(0x1008);
        // The same CPU walks (cache fill, hint set) and holds a translation.
        walker_read(&mut coh, 0, line);
        mint(&mut ts[0], 0, 5, pte);
        // Its own later write is locally satisfied: no fanout, but the local
        // hint forces a self-probe.
        coh.cpu_write(0, line, None); // take ownership first (S -> M)
        let fx = coherent_write(CoherenceMode::Hatric, &mut coh, &mut ts, BITS, 0, pte, None);
        assert_eq!(fx.outcome.kind, WriteKind::LocalM);
        assert!(fx.targets.is_empty());
        assert_eq!(fx.self_probe.expect("probed").total(), 2, "both TLB levels");
        assert_eq!(ts[0].valid_total(), 0);
    }

    #[test]
    fn tlb_only_mode_flushes_walk_caches_at_probed_cpus() {
        let (mut coh, mut ts) = fabric(2);
        let line = LineAddr(0x40);
        walker_read(&mut coh, 1, line);
        mint(&mut ts[1], 0, 5, Spa(0x1008));
        // Unrelated nested-TLB and MMU-cache contents at the target.
        ts[1].ntlb.fill(
            crate::tstruct::NtlbKey { vm: 0, gpp: Gpp(9) },
            Spp(3),
            cotag_of(Spa(0x9000), BITS).unwrap(),
            Spa(0x9000),
        );
        ts[1].mmu.fill(
            crate::tstruct::MmuKey { vm: 0, level: 2, prefix: 4 },
            Spp(4),
            cotag_of(Spa(0x9100), BITS).unwrap(),
            Spa(0x9100),
        );
        let fx = coherent_write(CoherenceMode::TlbOnly, &mut coh, &mut ts, BITS, 0, Spa(0x1000), None);
        let t = &fx.targets[0];
        assert_eq!(t.invalidated.l1_tlb + t.invalidated.l2_tlb, 2, "TLB entries by co-tag");
        assert_eq!(t.invalidated.ntlb, 1, "nested TLB flushed outright");
        assert_eq!(t.invalidated.mmu, 1, "MMU cache flushed outright");
    }

    #[test]
    fn ideal_mode_removes_only_entries_from_the_written_line() {
        let (mut coh, mut ts) = fabric(2);
        let line = LineAddr(0x40);
        walker_read(&mut coh, 1, line);
        mint(&mut ts[1], 0, 5, Spa(0x1008));
        // Aliasing entry: same co-tag class (one window away), other line.
        let alias = Spa(0x1008 + (1u64 << (BITS + 3)));
        mint(&mut ts[1], 0, 6, alias);
        let fx = coherent_write(CoherenceMode::Ideal, &mut coh, &mut ts, BITS, 0, Spa(0x1008), None);
        assert_eq!(fx.targets[0].invalidated.total(), 2, "alias survives under the oracle");
        assert_eq!(ts[1].valid_total(), 2);
        // Under co-tags the alias would have died too.
        let (mut coh2, mut ts2) = fabric(2);
        walker_read(&mut coh2, 1, line);
        mint(&mut ts2[1], 0, 5, Spa(0x1008));
        mint(&mut ts2[1], 0, 6, alias);
        let fx2 = coherent_write(CoherenceMode::Hatric, &mut coh2, &mut ts2, BITS, 0, Spa(0x1008), None);
        assert_eq!(fx2.targets[0].invalidated.total(), 4, "co-tag takes the alias too");
    }

    #[test]
    fn sw_mode_leaves_structures_alone_on_writes() {
        let (mut coh, mut ts) = fabric(2);
        let line = LineAddr(0x40);
        // In sw mode walks are not tagged; simulate with a plain read.
        coh.cpu_read(1, line, None);
        mint(&mut ts[1], 0, 5, Spa(0x1008));
        let fx = coherent_write(CoherenceMode::Sw, &mut coh, &mut ts, BITS, 0, Spa(0x1008), None);
        assert!(fx.targets.iter().all(|t| !t.probed));
        assert_eq!(ts[1].valid_total(), 2, "only the shootdown flushes");
    }

    #[test]
    fn shootdown_interrupts_every_vcpu_and_stalls_the_initiator() {
        let costs = CostModel::default();
        let (_, mut ts) = fabric(4);
        for cpu in 0..4 {
            mint(&mut ts[cpu], 0, cpu as u64, Spa(0x1000 + 8 * cpu as u64));
        }
        let targets = [0u16, 1, 2, 3];
        let in_guest = [true, true, false, true];
        let out = sw_shootdown(&mut ts, &targets, &in_guest, &costs);
        assert_eq!(out.ipis, 4);
        assert_eq!(out.vm_exits, 3);
        assert!(out.initiator_stall >= 4 * costs.ipi);
        assert_eq!(out.target_busy.len(), 4);
        assert_eq!(out.flushed.total(), 8, "two TLB levels per minted entry");
        for t in 0..4 {
            assert_eq!(ts[t].valid_total(), 0, "everything flushed at cpu {t}");
        }
        // Host-mode CPU pays the interrupt, guest-mode CPUs the VM exit.
        let busy: std::collections::BTreeMap<u16, u64> = out.target_busy.iter().copied().collect();
        assert!(busy[&2] < busy[&0]);
    }

    #[test]
    fn back_invalidation_purges_translations_with_their_source_line() {
        let (_, mut ts) = fabric(2);
        mint(&mut ts[1], 0, 5, Spa(0x1008));
        let bi = BackInv { line: LineAddr(0x40), cpus: vec![1], gpt: false, npt: true };
        let purged = apply_back_invs(CoherenceMode::Hatric, &mut ts, BITS, &[bi.clone()]);
        assert_eq!(purged.total(), 2);
        assert_eq!(ts[1].valid_total(), 0);
        // sw mode: the directory has no authority over translations.
        mint(&mut ts[1], 0, 5, Spa(0x1008));
        let purged_sw = apply_back_invs(CoherenceMode::Sw, &mut ts, BITS, &[bi]);
        assert_eq!(purged_sw.total(), 0);
        assert_eq!(ts[1].valid_total(), 2);
    }
}
