//! Simulated physical memory and the radix page tables living in it.
//!
//! Memory is two regions of one flat system-physical space: fast
//! (die-stacked) DRAM at the bottom, slow (off-chip) DRAM above it. Page
//! contents are a sparse map of 64-byte lines, so table bytes are real:
//! mapping operations report exactly the lines whose bytes changed, which
//! is what the coherence layer turns into write traffic.
//!
//! Virtualized guests use two table dimensions: a guest tree per (vm, pid)
//! whose pages live at guest-physical addresses, and one nested tree per vm
//! mapping guest-physical to system-physical pages. Guest-table pages are
//! themselves guest-physical and pinned in the nested tree at allocation.
//! A walk therefore alternates nested sub-walks and guest entry reads: a
//! cold two-dimensional walk makes 24 references (5 nested sub-walks of 4,
//! plus 4 guest reads), against 4 for a bare-metal table.

use crate::addr::{
    cotag_of, pt_indices, CoTag, Gpp, Gvp, LineAddr, Spa, Spp, LINE_BYTES, PT_LEVELS,
};
use crate::config::MemConfig;
use crate::tstruct::{MmuKey, NtlbKey, TlbKey, TlbPayload, Tstructs};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Four levels of radix-512 tables cover 36 bits of page number; anything
/// above aliases back down. Every page number entering a table must stay
/// below this.
pub const VPN_SPACE: u64 = 1 << 36;

/// Guest-table pages get guest-physical numbers from this base upward:
/// the top half of the covered space, far above any data footprint the
/// trace generator can produce (data pages stay below [`VPN_SPACE`] / 2).
pub const TABLE_GPP_BASE: u64 = VPN_SPACE / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemRegion {
    Fast,
    Slow,
}

/// One page-table entry: present/access/dirty flags plus a target page
/// number (a table or data page; guest entries hold guest-physical numbers,
/// nested and bare-metal entries hold system-physical numbers).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pte(pub u64);

impl Pte {
    const PRESENT: u64 = 1 << 0;
    const ACCESS: u64 = 1 << 1;
    const DIRTY: u64 = 1 << 2;

    pub fn absent() -> Pte {
        Pte(0)
    }

    /// Fresh mapping: present, access and dirty clear.
    pub fn map(page: u64) -> Pte {
        Pte((page << 12) | Pte::PRESENT)
    }

    pub fn present(self) -> bool {
        self.0 & Pte::PRESENT != 0
    }

    pub fn access(self) -> bool {
        self.0 & Pte::ACCESS != 0
    }

    pub fn dirty(self) -> bool {
        self.0 & Pte::DIRTY != 0
    }

    pub fn page(self) -> u64 {
        self.0 >> 12
    }

    pub fn with_access(self) -> Pte {
        Pte(self.0 | Pte::ACCESS)
    }

    pub fn with_dirty(self) -> Pte {
        Pte(self.0 | Pte::DIRTY)
    }

    pub fn without_access(self) -> Pte {
        Pte(self.0 & !Pte::ACCESS)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PtError {
    #[error("out of page-table frames")]
    OutOfTableFrames,
    #[error("out of slow-region data frames")]
    OutOfSlowFrames,
    #[error("{0} already mapped")]
    AlreadyMapped(&'static str),
    #[error("{0} not mapped")]
    NotMapped(&'static str),
}

/// Sparse byte-addressable physical memory plus frame allocators for table
/// pages (top-down) and slow-region data pages (bottom-up).
#[derive(Debug, Clone)]
pub struct PhysMem {
    fast_pages: u64,
    slow_pages: u64,
    lines: HashMap<u64, [u8; LINE_BYTES as usize]>,
    tables_fast: bool,
    fast_table_floor: u64,
    fast_table_next: u64,
    slow_table_next: u64,
    slow_data_next: u64,
}

impl PhysMem {
    pub fn new(cfg: &MemConfig) -> Self {
        let fast_pages = cfg.fast_bytes / crate::addr::PAGE_BYTES;
        let slow_pages = cfg.slow_bytes / crate::addr::PAGE_BYTES;
        PhysMem {
            fast_pages,
            slow_pages,
            lines: HashMap::new(),
            tables_fast: cfg.tables_fast,
            fast_table_floor: fast_pages.saturating_sub(cfg.fast_table_reserve),
            fast_table_next: fast_pages,
            slow_table_next: fast_pages + slow_pages,
            slow_data_next: fast_pages,
        }
    }

    pub fn fast_pages(&self) -> u64 {
        self.fast_pages
    }

    pub fn total_pages(&self) -> u64 {
        self.fast_pages + self.slow_pages
    }

    /// Data frames the fast-memory pool may hand out: everything below any
    /// fast-region table reservation.
    pub fn fast_data_frames(&self) -> u64 {
        if self.tables_fast {
            self.fast_table_floor
        } else {
            self.fast_pages
        }
    }

    pub fn region(&self, spp: Spp) -> MemRegion {
        debug_assert!(spp.0 < self.total_pages(), "page {:#x} out of range", spp.0);
        if spp.0 < self.fast_pages {
            MemRegion::Fast
        } else {
            MemRegion::Slow
        }
    }

    pub fn read_u64(&self, spa: Spa) -> u64 {
        debug_assert_eq!(spa.0 % 8, 0);
        let off = (spa.0 % LINE_BYTES) as usize;
        match self.lines.get(&spa.line().0) {
            Some(line) => u64::from_le_bytes(line[off..off + 8].try_into().unwrap()),
            None => 0,
        }
    }

    /// Write 8 bytes; returns the touched line if any byte changed.
    pub fn write_u64(&mut self, spa: Spa, value: u64) -> Option<LineAddr> {
        debug_assert_eq!(spa.0 % 8, 0);
        let off = (spa.0 % LINE_BYTES) as usize;
        let line = self.lines.entry(spa.line().0).or_insert([0; LINE_BYTES as usize]);
        let old = u64::from_le_bytes(line[off..off + 8].try_into().unwrap());
        if old == value {
            return None;
        }
        line[off..off + 8].copy_from_slice(&value.to_le_bytes());
        Some(spa.line())
    }

    pub fn read_pte(&self, spa: Spa) -> Pte {
        Pte(self.read_u64(spa))
    }

    pub fn write_pte(&mut self, spa: Spa, pte: Pte) -> Option<LineAddr> {
        self.write_u64(spa, pte.0)
    }

    /// Allocate a page-table frame (top of slow, or top of the fast
    /// reservation when configured).
    pub fn alloc_table_page(&mut self) -> Result<Spp, PtError> {
        if self.tables_fast {
            if self.fast_table_next == self.fast_table_floor {
                return Err(PtError::OutOfTableFrames);
            }
            self.fast_table_next -= 1;
            Ok(Spp(self.fast_table_next))
        } else {
            if self.slow_table_next - 1 < self.slow_data_next {
                return Err(PtError::OutOfTableFrames);
            }
            self.slow_table_next -= 1;
            Ok(Spp(self.slow_table_next))
        }
    }

    /// Allocate a fresh slow-region data frame (bottom-up bump; freed slow
    /// frames are recycled by the hypervisor, not here).
    pub fn alloc_data_slow(&mut self) -> Result<Spp, PtError> {
        if self.slow_data_next >= self.slow_table_next {
            return Err(PtError::OutOfSlowFrames);
        }
        let spp = Spp(self.slow_data_next);
        self.slow_data_next += 1;
        Ok(spp)
    }

    /// Full copy of the sparse line map, ordered (test oracles diff these).
    pub fn snapshot(&self) -> BTreeMap<u64, [u8; LINE_BYTES as usize]> {
        self.lines.iter().map(|(k, v)| (*k, *v)).collect()
    }
}

/// A guest address space: one VM, one process within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AddressSpace {
    pub vm: u16,
    pub pid: u16,
}

/// Which table dimension a page-table line belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtKind {
    Guest,
    Nested,
}

/// Position of one reference in the two-dimensional walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkRole {
    NL4,
    NL3,
    NL2,
    NL1,
    GL4,
    GL3,
    GL2,
    GL1,
}

impl WalkRole {
    fn nested(i: usize) -> WalkRole {
        [WalkRole::NL4, WalkRole::NL3, WalkRole::NL2, WalkRole::NL1][i]
    }

    fn guest(level: usize) -> WalkRole {
        [WalkRole::GL1, WalkRole::GL2, WalkRole::GL3, WalkRole::GL4][level - 1]
    }

    pub fn kind(self) -> PtKind {
        match self {
            WalkRole::NL4 | WalkRole::NL3 | WalkRole::NL2 | WalkRole::NL1 => PtKind::Nested,
            _ => PtKind::Guest,
        }
    }
}

/// One memory reference made by the page-table walker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkRef {
    pub spa: Spa,
    pub role: WalkRole,
    /// This walk transitioned the entry's access bit from clear to set
    /// (the walker owes a coherent read-modify-write of the line).
    pub a_set: bool,
}

/// Structure fills a completed walk wants applied.
#[derive(Debug, Clone)]
pub struct WalkFills {
    pub tlb: (TlbKey, TlbPayload, CoTag, Spa),
    pub ntlb: Vec<(NtlbKey, Spp, CoTag, Spa)>,
    pub mmu: Vec<(MmuKey, Spp, CoTag, Spa)>,
}

/// A completed walk: ordered references, fills, dirty-bit writes owed for
/// stores, and what it resolved to.
#[derive(Debug, Clone)]
pub struct WalkResult {
    pub refs: Vec<WalkRef>,
    pub fills: WalkFills,
    pub spp: Spp,
    /// Data guest-physical page (bare-metal tables use the VPN identity).
    pub data_gpp: Gpp,
    /// Leaf entries whose dirty bit this (store) walk set, clear -> set.
    pub d_sets: Vec<Spa>,
    /// Nested sub-walks skipped via nested-TLB hits.
    pub ntlb_elisions: u32,
    /// MMU-cache hit level (4, 3 or 2), if the guest prefix was cached.
    pub mmu_hit_level: Option<u8>,
}

/// The walker found a hole; the fault handler maps it and retries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkFault {
    Guest { gvp: Gvp, level: u8 },
    Nested { gpp: Gpp, level: u8 },
}

/// Functional resolution of a guest-virtual page (no structures touched).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolved {
    pub gpp: Gpp,
    pub spp: Spp,
    pub guest_leaf: Spa,
    /// Co-tag source of the translation: nested leaf of the data page, or
    /// the guest leaf itself for bare-metal tables.
    pub nested_leaf: Spa,
}

/// All page tables of the simulated machine.
#[derive(Debug, Clone)]
pub struct PageTables {
    pub virtualized: bool,
    cotag_bits: u32,
    nested_roots: BTreeMap<u16, Spp>,
    guest_roots: BTreeMap<(u16, u16), Gpp>,
    direct_roots: BTreeMap<(u16, u16), Spp>,
    table_gpp_next: BTreeMap<u16, u64>,
}

impl PageTables {
    pub fn new(virtualized: bool, cotag_bits: u32) -> Self {
        PageTables {
            virtualized,
            cotag_bits,
            nested_roots: BTreeMap::new(),
            guest_roots: BTreeMap::new(),
            direct_roots: BTreeMap::new(),
            table_gpp_next: BTreeMap::new(),
        }
    }

    fn tag(&self, spa: Spa) -> CoTag {
        cotag_of(spa, self.cotag_bits).expect("walker-generated addresses are aligned")
    }

    fn nested_root(&mut self, vm: u16, mem: &mut PhysMem) -> Result<Spp, PtError> {
        if let Some(r) = self.nested_roots.get(&vm) {
            return Ok(*r);
        }
        let root = mem.alloc_table_page()?;
        self.nested_roots.insert(vm, root);
        Ok(root)
    }

    fn next_table_gpp(&mut self, vm: u16) -> Gpp {
        let next = self.table_gpp_next.entry(vm).or_insert(TABLE_GPP_BASE);
        let gpp = Gpp(*next);
        *next += 1;
        assert!(gpp.0 < VPN_SPACE, "guest-table page numbers exhausted");
        gpp
    }

    /// Map a guest-physical page to a system-physical frame in the nested
    /// tree, allocating intermediate table pages on demand. Returns every
    /// line whose bytes changed.
    pub fn map_nested(
        &mut self,
        vm: u16,
        gpp: Gpp,
        spp: Spp,
        mem: &mut PhysMem,
    ) -> Result<Vec<LineAddr>, PtError> {
        assert!(gpp.0 < VPN_SPACE, "guest-physical page beyond table reach");
        let mut modified = Vec::new();
        let mut table = self.nested_root(vm, mem)?;
        let idx = pt_indices(gpp.0);
        for level in (2..=PT_LEVELS).rev() {
            let espa = table.entry_spa(idx[PT_LEVELS - level]);
            let pte = mem.read_pte(espa);
            table = if pte.present() {
                Spp(pte.page())
            } else {
                let child = mem.alloc_table_page()?;
                modified.extend(mem.write_pte(espa, Pte::map(child.0)));
                child
            };
        }
        let leaf = table.entry_spa(idx[3]);
        if mem.read_pte(leaf).present() {
            return Err(PtError::AlreadyMapped("guest-physical page"));
        }
        modified.extend(mem.write_pte(leaf, Pte::map(spp.0)));
        Ok(modified)
    }

    /// Point an existing nested mapping at a new frame, clearing access and
    /// dirty. A remap to the same frame is a no-op (nothing modified).
    pub fn remap_nested(
        &mut self,
        vm: u16,
        gpp: Gpp,
        new_spp: Spp,
        mem: &mut PhysMem,
    ) -> Result<NestedRemap, PtError> {
        let leaf = self
            .nested_leaf_spa(vm, gpp, mem)
            .ok_or(PtError::NotMapped("guest-physical page"))?;
        let pte = mem.read_pte(leaf);
        if !pte.present() {
            return Err(PtError::NotMapped("guest-physical page"));
        }
        let old = Spp(pte.page());
        if old == new_spp {
            return Ok(NestedRemap { old, leaf, modified: None });
        }
        let modified = mem.write_pte(leaf, Pte::map(new_spp.0));
        Ok(NestedRemap { old, leaf, modified })
    }

    /// Map a guest-virtual page to a guest-physical page in the guest tree
    /// of `asid`. Guest-table pages allocated along the way are pinned into
    /// the nested tree; all byte changes (both trees) are reported.
    pub fn map_guest(
        &mut self,
        asid: AddressSpace,
        gvp: Gvp,
        gpp: Gpp,
        mem: &mut PhysMem,
    ) -> Result<Vec<LineAddr>, PtError> {
        assert!(self.virtualized, "bare-metal tables use map_direct");
        assert!(gvp.0 < VPN_SPACE, "guest-virtual page beyond table reach");
        assert!(gpp.0 < TABLE_GPP_BASE, "data pages live below the table-page region");
        let mut modified = Vec::new();
        let root = match self.guest_roots.get(&(asid.vm, asid.pid)) {
            Some(r) => *r,
            None => {
                let r = self.alloc_guest_table_page(asid.vm, mem, &mut modified)?;
                self.guest_roots.insert((asid.vm, asid.pid), r);
                r
            }
        };
        let idx = pt_indices(gvp.0);
        let mut table_gpp = root;
        for level in (2..=PT_LEVELS).rev() {
            let tspp = self.nested_resolve(asid.vm, table_gpp, mem).expect("table pages stay pinned");
            let espa = tspp.entry_spa(idx[PT_LEVELS - level]);
            let pte = mem.read_pte(espa);
            table_gpp = if pte.present() {
                Gpp(pte.page())
            } else {
                let child = self.alloc_guest_table_page(asid.vm, mem, &mut modified)?;
                modified.extend(mem.write_pte(espa, Pte::map(child.0)));
                child
            };
        }
        let tspp = self.nested_resolve(asid.vm, table_gpp, mem).expect("table pages stay pinned");
        let leaf = tspp.entry_spa(idx[3]);
        if mem.read_pte(leaf).present() {
            return Err(PtError::AlreadyMapped("guest-virtual page"));
        }
        modified.extend(mem.write_pte(leaf, Pte::map(gpp.0)));
        Ok(modified)
    }

    fn alloc_guest_table_page(
        &mut self,
        vm: u16,
        mem: &mut PhysMem,
        modified: &mut Vec<LineAddr>,
    ) -> Result<Gpp, PtError> {
        let gpp = self.next_table_gpp(vm);
        let spp = mem.alloc_table_page()?;
        modified.extend(self.map_nested(vm, gpp, spp, mem)?);
        Ok(gpp)
    }

    /// Bare-metal analog of [`PageTables::map_guest`]: one tree, leaves
    /// hold system-physical frames.
    pub fn map_direct(
        &mut self,
        asid: AddressSpace,
        gvp: Gvp,
        spp: Spp,
        mem: &mut PhysMem,
    ) -> Result<Vec<LineAddr>, PtError> {
        assert!(!self.virtualized, "virtualized tables use map_guest");
        assert!(gvp.0 < VPN_SPACE, "virtual page beyond table reach");
        let mut modified = Vec::new();
        let root = match self.direct_roots.get(&(asid.vm, asid.pid)) {
            Some(r) => *r,
            None => {
                let r = mem.alloc_table_page()?;
                self.direct_roots.insert((asid.vm, asid.pid), r);
                r
            }
        };
        let idx = pt_indices(gvp.0);
        let mut table = root;
        for level in (2..=PT_LEVELS).rev() {
            let espa = table.entry_spa(idx[PT_LEVELS - level]);
            let pte = mem.read_pte(espa);
            table = if pte.present() {
                Spp(pte.page())
            } else {
                let child = mem.alloc_table_page()?;
                modified.extend(mem.write_pte(espa, Pte::map(child.0)));
                child
            };
        }
        let leaf = table.entry_spa(idx[3]);
        if mem.read_pte(leaf).present() {
            return Err(PtError::AlreadyMapped("virtual page"));
        }
        modified.extend(mem.write_pte(leaf, Pte::map(spp.0)));
        Ok(modified)
    }

    /// Bare-metal remap; the "guest-physical" key is the VPN identity.
    pub fn remap_direct(
        &mut self,
        asid: AddressSpace,
        gvp: Gvp,
        new_spp: Spp,
        mem: &mut PhysMem,
    ) -> Result<NestedRemap, PtError> {
        let leaf = self.direct_leaf_spa(asid, gvp, mem).ok_or(PtError::NotMapped("virtual page"))?;
        let pte = mem.read_pte(leaf);
        if !pte.present() {
            return Err(PtError::NotMapped("virtual page"));
        }
        let old = Spp(pte.page());
        if old == new_spp {
            return Ok(NestedRemap { old, leaf, modified: None });
        }
        let modified = mem.write_pte(leaf, Pte::map(new_spp.0));
        Ok(NestedRemap { old, leaf, modified })
    }

    /// Functional nested lookup (no access bits touched).
    pub fn nested_resolve(&self, vm: u16, gpp: Gpp, mem: &PhysMem) -> Option<Spp> {
        let leaf = self.nested_leaf_spa(vm, gpp, mem)?;
        let pte = mem.read_pte(leaf);
        pte.present().then(|| Spp(pte.page()))
    }

    /// Address of the nested leaf entry for `gpp`, if the intermediate
    /// tables exist (the leaf itself may be absent).
    pub fn nested_leaf_spa(&self, vm: u16, gpp: Gpp, mem: &PhysMem) -> Option<Spa> {
        let mut table = *self.nested_roots.get(&vm)?;
        let idx = pt_indices(gpp.0);
        for i in 0..PT_LEVELS - 1 {
            let pte = mem.read_pte(table.entry_spa(idx[i]));
            if !pte.present() {
                return None;
            }
            table = Spp(pte.page());
        }
        Some(table.entry_spa(idx[3]))
    }

    fn direct_leaf_spa(&self, asid: AddressSpace, gvp: Gvp, mem: &PhysMem) -> Option<Spa> {
        let mut table = *self.direct_roots.get(&(asid.vm, asid.pid))?;
        let idx = pt_indices(gvp.0);
        for i in 0..PT_LEVELS - 1 {
            let pte = mem.read_pte(table.entry_spa(idx[i]));
            if !pte.present() {
                return None;
            }
            table = Spp(pte.page());
        }
        Some(table.entry_spa(idx[3]))
    }

    /// Fully resolve a guest-virtual page without touching structures or
    /// metadata bits. The ground truth the safety oracle compares against.
    pub fn resolve(&self, asid: AddressSpace, gvp: Gvp, mem: &PhysMem) -> Option<Resolved> {
        if self.virtualized {
            let mut table_gpp = *self.guest_roots.get(&(asid.vm, asid.pid))?;
            let idx = pt_indices(gvp.0);
            for i in 0..PT_LEVELS - 1 {
                let tspp = self.nested_resolve(asid.vm, table_gpp, mem)?;
                let pte = mem.read_pte(tspp.entry_spa(idx[i]));
                if !pte.present() {
                    return None;
                }
                table_gpp = Gpp(pte.page());
            }
            let tspp = self.nested_resolve(asid.vm, table_gpp, mem)?;
            let guest_leaf = tspp.entry_spa(idx[3]);
            let pte = mem.read_pte(guest_leaf);
            if !pte.present() {
                return None;
            }
            let gpp = Gpp(pte.page());
            let nested_leaf = self.nested_leaf_spa(asid.vm, gpp, mem)?;
            let npte = mem.read_pte(nested_leaf);
            if !npte.present() {
                return None;
            }
            Some(Resolved { gpp, spp: Spp(npte.page()), guest_leaf, nested_leaf })
        } else {
            let guest_leaf = self.direct_leaf_spa(asid, gvp, mem)?;
            let pte = mem.read_pte(guest_leaf);
            if !pte.present() {
                return None;
            }
            Some(Resolved {
                gpp: Gpp(gvp.0),
                spp: Spp(pte.page()),
                guest_leaf,
                nested_leaf: guest_leaf,
            })
        }
    }

    /// Walk `gvp` as the hardware walker would: probe the MMU cache for the
    /// longest cached guest prefix, probe the nested TLB before each nested
    /// sub-walk, reference remaining entries in order, and set access bits
    /// (and leaf dirty bits for stores) on every entry actually touched.
    ///
    /// Structure hit counters and LRU state are updated; fills are
    /// *returned*, not applied — the caller charges the coherent traffic
    /// for the references and metadata writes first, then applies fills.
    pub fn walk_2d(
        &mut self,
        asid: AddressSpace,
        gvp: Gvp,
        ts: &mut Tstructs,
        mem: &mut PhysMem,
        is_store: bool,
    ) -> Result<WalkResult, WalkFault> {
        let vpn = gvp.0;
        let idx = pt_indices(vpn);
        let mut refs = Vec::with_capacity(24);
        let mut ntlb_fills = Vec::new();
        let mut mmu_fills = Vec::new();
        let mut d_sets = Vec::new();
        let mut ntlb_elisions = 0u32;

        // Longest-prefix MMU-cache probe: one logical lookup.
        let mut mmu_hit_level = None;
        let mut level;
        let mut table: Spp;
        let probe_key = |k: usize| MmuKey { vm: asid.vm, level: k as u8, prefix: vpn >> ((k - 1) * 9) };
        if let Some(k) = (2..=4).find(|&k| ts.mmu.peek(probe_key(k)).is_some()) {
            let e = ts.mmu.lookup(probe_key(k)).expect("peeked");
            mmu_hit_level = Some(k as u8);
            table = e.value;
            level = k - 1;
        } else {
            ts.mmu.stats.misses += 1;
            level = PT_LEVELS;
            table = if self.virtualized {
                let root_gpp = *self
                    .guest_roots
                    .get(&(asid.vm, asid.pid))
                    .ok_or(WalkFault::Guest { gvp, level: 4 })?;
                self.nested_translate(
                    asid.vm,
                    root_gpp,
                    ts,
                    mem,
                    &mut refs,
                    &mut ntlb_fills,
                    &mut ntlb_elisions,
                )?
                .0
            } else {
                *self
                    .direct_roots
                    .get(&(asid.vm, asid.pid))
                    .ok_or(WalkFault::Guest { gvp, level: 4 })?
            };
        }

        loop {
            let espa = table.entry_spa(idx[PT_LEVELS - level]);
            let mut pte = mem.read_pte(espa);
            if !pte.present() {
                return Err(WalkFault::Guest { gvp, level: level as u8 });
            }
            let a_set = !pte.access();
            if a_set {
                pte = pte.with_access();
                mem.write_pte(espa, pte);
            }
            refs.push(WalkRef { spa: espa, role: WalkRole::guest(level), a_set });
            if level > 1 {
                let next = if self.virtualized {
                    self.nested_translate(
                        asid.vm,
                        Gpp(pte.page()),
                        ts,
                        mem,
                        &mut refs,
                        &mut ntlb_fills,
                        &mut ntlb_elisions,
                    )?
                    .0
                } else {
                    Spp(pte.page())
                };
                mmu_fills.push((
                    MmuKey { vm: asid.vm, level: level as u8, prefix: vpn >> ((level - 1) * 9) },
                    next,
                    self.tag(espa),
                    espa,
                ));
                table = next;
                level -= 1;
                continue;
            }

            // Leaf reached.
            let (spp, data_gpp, src) = if self.virtualized {
                let data_gpp = Gpp(pte.page());
                let (spp, nested_leaf) = self.nested_translate(
                    asid.vm,
                    data_gpp,
                    ts,
                    mem,
                    &mut refs,
                    &mut ntlb_fills,
                    &mut ntlb_elisions,
                )?;
                (spp, data_gpp, nested_leaf)
            } else {
                (Spp(pte.page()), Gpp(vpn), espa)
            };
            if is_store {
                // Set leaf dirty bits (guest leaf and, when distinct, the
                // data page's nested leaf); each clear -> set transition is
                // a coherent write the caller owes.
                for leaf in [espa, src] {
                    let p = mem.read_pte(leaf);
                    if !p.dirty() {
                        mem.write_pte(leaf, p.with_dirty());
                        d_sets.push(leaf);
                    }
                    if espa == src {
                        break;
                    }
                }
            }
            // The cached dirty flag mirrors the leaves' current D bits, so
            // a later store through this entry knows whether a set-dirty
            // assist (and its coherence fallout) is still owed.
            let dirty = is_store || (mem.read_pte(espa).dirty() && mem.read_pte(src).dirty());
            let fills = WalkFills {
                tlb: (
                    TlbKey { vm: asid.vm, gvp },
                    TlbPayload { spp, gpp: data_gpp, guest_leaf: espa, dirty },
                    self.tag(src),
                    src,
                ),
                ntlb: ntlb_fills,
                mmu: mmu_fills,
            };
            return Ok(WalkResult {
                refs,
                fills,
                spp,
                data_gpp,
                d_sets,
                ntlb_elisions,
                mmu_hit_level,
            });
        }
    }

    /// Nested sub-walk of one guest-physical page, short-circuited by the
    /// nested TLB. Returns the frame and the nested leaf address.
    #[allow(clippy::too_many_arguments)]
    fn nested_translate(
        &self,
        vm: u16,
        gpp: Gpp,
        ts: &mut Tstructs,
        mem: &mut PhysMem,
        refs: &mut Vec<WalkRef>,
        ntlb_fills: &mut Vec<(NtlbKey, Spp, CoTag, Spa)>,
        ntlb_elisions: &mut u32,
    ) -> Result<(Spp, Spa), WalkFault> {
        let key = NtlbKey { vm, gpp };
        if let Some(e) = ts.ntlb.lookup(key) {
            *ntlb_elisions += 1;
            return Ok((e.value, e.src));
        }
        let mut table = *self.nested_roots.get(&vm).ok_or(WalkFault::Nested { gpp, level: 4 })?;
        let idx = pt_indices(gpp.0);
        let mut result = None;
        for i in 0..PT_LEVELS {
            let espa = table.entry_spa(idx[i]);
            let mut pte = mem.read_pte(espa);
            if !pte.present() {
                return Err(WalkFault::Nested { gpp, level: (PT_LEVELS - i) as u8 });
            }
            let a_set = !pte.access();
            if a_set {
                pte = pte.with_access();
                mem.write_pte(espa, pte);
            }
            refs.push(WalkRef { spa: espa, role: WalkRole::nested(i), a_set });
            if i < PT_LEVELS - 1 {
                table = Spp(pte.page());
            } else {
                result = Some((Spp(pte.page()), espa));
            }
        }
        let (spp, leaf) = result.expect("loop ran to the leaf");
        ntlb_fills.push((key, spp, self.tag(leaf), leaf));
        Ok((spp, leaf))
    }

    /// Line-oriented text dump of every table, for debugging and golden
    /// tests: `<dimension> <vm[/pid]> L<level>[index] @<entry-spa> ->
    /// page=<target> <flags>`.
    pub fn dump(&self, mem: &PhysMem) -> String {
        let mut out = String::new();
        for (vm, root) in &self.nested_roots {
            out.push_str(&format!("nested vm={vm} root=spp:{:#x}\n", root.0));
            self.dump_table(mem, *root, PT_LEVELS, &format!("n {vm}"), &mut out);
        }
        for ((vm, pid), root) in &self.guest_roots {
            out.push_str(&format!("guest vm={vm} pid={pid} root=gpp:{:#x}\n", root.0));
            let rspp = self.nested_resolve(*vm, *root, mem).expect("root pinned");
            self.dump_guest_table(mem, *vm, rspp, PT_LEVELS, &format!("g {vm}/{pid}"), &mut out);
        }
        for ((vm, pid), root) in &self.direct_roots {
            out.push_str(&format!("direct vm={vm} pid={pid} root=spp:{:#x}\n", root.0));
            self.dump_table(mem, *root, PT_LEVELS, &format!("d {vm}/{pid}"), &mut out);
        }
        out
    }

    fn dump_table(&self, mem: &PhysMem, table: Spp, level: usize, prefix: &str, out: &mut String) {
        for i in 0..crate::addr::PT_RADIX as usize {
            let espa = table.entry_spa(i);
            let pte = mem.read_pte(espa);
            if !pte.present() {
                continue;
            }
            out.push_str(&format!(
                "{prefix} L{level}[{i}] @{espa} -> page={:#x}{}{}\n",
                pte.page(),
                if pte.access() { " A" } else { "" },
                if pte.dirty() { " D" } else { "" },
            ));
            if level > 1 {
                self.dump_table(mem, Spp(pte.page()), level - 1, prefix, out);
            }
        }
    }

    fn dump_guest_table(
        &self,
        mem: &PhysMem,
        vm: u16,
        table: Spp,
        level: usize,
        prefix: &str,
        out: &mut String,
    ) {
        for i in 0..crate::addr::PT_RADIX as usize {
            let espa = table.entry_spa(i);
            let pte = mem.read_pte(espa);
            if !pte.present() {
                continue;
            }
            out.push_str(&format!(
                "{prefix} L{level}[{i}] @{espa} -> page={:#x}{}{}\n",
                pte.page(),
                if pte.access() { " A" } else { "" },
                if pte.dirty() { " D" } else { "" },
            ));
            if level > 1 {
                let child = self
                    .nested_resolve(vm, Gpp(pte.page()), mem)
                    .expect("guest table pages stay pinned");
                self.dump_guest_table(mem, vm, child, level - 1, prefix, out);
            }
        }
    }
}

/// Outcome of a leaf remap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NestedRemap {
    pub old: Spp,
    /// Address of the rewritten leaf entry.
    pub leaf: Spa,
    /// The touched line, unless the remap was a no-op.
    pub modified: Option<LineAddr>,
}
