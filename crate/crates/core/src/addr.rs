//! Address arithmetic shared by every other module: page numbers in the
//! three address spaces (guest-virtual, guest-physical, system-physical),
//! byte addresses, cache-line numbers, radix-tree index extraction, and
//! co-tag derivation.
//!
//! Co-tags are the heart of the selective-invalidation scheme: a short slice
//! of the system physical address of the page-table entry a translation was
//! filled from. Coherence requests arrive at cache-line granularity (eight
//! 8-byte entries per 64-byte line), so matching masks the low three co-tag
//! bits, which only distinguish entries within one line.

use thiserror::Error;

/// Bytes per page (4 KiB, the only size modeled).
pub const PAGE_BYTES: u64 = 4096;
/// log2 of [`PAGE_BYTES`].
pub const PAGE_SHIFT: u32 = 12;
/// Bytes per cache line.
pub const LINE_BYTES: u64 = 64;
/// log2 of [`LINE_BYTES`].
pub const LINE_SHIFT: u32 = 6;
/// Bytes per page-table entry.
pub const PTE_BYTES: u64 = 8;
/// Page-table entries sharing one cache line.
pub const PTES_PER_LINE: u64 = LINE_BYTES / PTE_BYTES;
/// Radix-tree fanout: 512 entries per table page (9 index bits per level).
pub const PT_RADIX: u64 = 512;
/// Levels in a radix page table (L4 root down to L1 leaf).
pub const PT_LEVELS: usize = 4;

/// Guest-virtual page number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Gvp(pub u64);

/// Guest-physical page number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Gpp(pub u64);

/// System-physical page number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Spp(pub u64);

/// System-physical byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Spa(pub u64);

/// Cache-line number (system physical address >> 6).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LineAddr(pub u64);

impl Spp {
    /// Byte address of the first byte of this page.
    pub fn base(self) -> Spa {
        Spa(self.0 << PAGE_SHIFT)
    }

    /// Byte address of entry `index` if this page holds a table.
    pub fn entry_spa(self, index: usize) -> Spa {
        debug_assert!((index as u64) < PT_RADIX);
        Spa((self.0 << PAGE_SHIFT) + index as u64 * PTE_BYTES)
    }
}

impl Spa {
    /// Cache line containing this address.
    pub fn line(self) -> LineAddr {
        LineAddr(self.0 >> LINE_SHIFT)
    }

    /// Page containing this address.
    pub fn page(self) -> Spp {
        Spp(self.0 >> PAGE_SHIFT)
    }
}

impl LineAddr {
    /// First byte address of the line.
    pub fn base(self) -> Spa {
        Spa(self.0 << LINE_SHIFT)
    }
}

impl std::fmt::Display for Spa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl std::fmt::Display for LineAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Errors from address arithmetic with caller-supplied raw values.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum AddrError {
    #[error("address {0:#x} is not {PTE_BYTES}-byte aligned")]
    Misaligned(u64),
    #[error("co-tag width {0} unsupported (must be 8, 16 or 24 bits)")]
    BadCoTagWidth(u32),
}

/// Co-tag: the low slice of a page-table entry's system physical address,
/// shifted right by 3 (entry alignment bits carry no information).
///
/// The stored value keeps the entry-index bits (5..3 of the byte address);
/// [`CoTag::line_class`] drops them for line-granular invalidation matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoTag(pub u32);

impl CoTag {
    /// Comparison key for a line-granular invalidation: co-tag bits above the
    /// entry index. Two translations filled from the same 64-byte line always
    /// share a line class; translations from lines whose addresses collide in
    /// the kept slice alias into the same class and are over-invalidated.
    pub fn line_class(self) -> u32 {
        self.0 >> 3
    }
}

/// Derive the co-tag of a page-table entry at `spa` for a `width`-bit tag.
///
/// `width` must be 8, 16 or 24 (1-3 tag bytes); `spa` must be entry-aligned.
/// The value is bits `[width+2 .. 3]` of the address: drop the three zero
/// alignment bits, keep the next `width`.
pub fn cotag_of(spa: Spa, width: u32) -> Result<CoTag, AddrError> {
    if !matches!(width, 8 | 16 | 24) {
        return Err(AddrError::BadCoTagWidth(width));
    }
    if spa.0 % PTE_BYTES != 0 {
        return Err(AddrError::Misaligned(spa.0));
    }
    let mask = (1u64 << width) - 1;
    Ok(CoTag(((spa.0 >> 3) & mask) as u32))
}

/// Split a virtual page number into its four radix indices, root first:
/// `[idx4, idx3, idx2, idx1]`, each 9 bits. Bits above 36 are ignored.
pub fn pt_indices(vpn: u64) -> [usize; 4] {
    [
        ((vpn >> 27) & 0x1ff) as usize,
        ((vpn >> 18) & 0x1ff) as usize,
        ((vpn >> 9) & 0x1ff) as usize,
        (vpn & 0x1ff) as usize,
    ]
}

/// Cache line of a byte address. Convenience wrapper over [`Spa::line`].
pub fn line_of(spa: Spa) -> LineAddr {
    spa.line()
}
