//! Deterministic trace-driven simulator for translation coherence in
//! virtualized memory hierarchies.
//!
//! The simulated machine runs one or more guest VMs over two-dimensional
//! (guest + nested) radix page tables, with per-CPU TLBs, MMU paging
//! structure caches and nested TLBs kept coherent under one of three
//! schemes:
//!
//! * `sw` - software shootdown: IPIs, VM exits and full flushes;
//! * `hatric` - co-tagged translation entries invalidated selectively by
//!   the cache-coherence directory;
//! * `tlb-only` - co-tag precision for TLBs only, full flushes of the MMU
//!   cache and nested TLB at fanout targets;
//!
//! plus an `ideal` reference mode that invalidates exactly the stale
//! entries at zero cost. A small hypervisor model (die-stacked fast DRAM
//! in front of slow DRAM, CLOCK eviction, optional migration daemon and
//! prefetching) generates the remap traffic that makes the difference
//! between those schemes visible.
//!
//! Everything is deterministic: equal configs, traces and seeds produce
//! byte-identical statistics, CSV rows and event logs.

pub mod addr;
pub mod config;
pub mod coherence;
pub mod energy;
pub mod engine;
pub mod hypervisor;
pub mod pagetable;
pub mod stats;
pub mod tcoherence;
pub mod trace;
pub mod tstruct;
