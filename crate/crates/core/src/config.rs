//! Run configuration: every knob the simulator exposes, key=value file
//! parsing shared by the CLI and the workload generator, validation, and a
//! canonical textual form whose FNV-1a hash labels result rows.
//!
//! The file format is line-oriented `key = value` (spaces optional), with
//! `#` comments and blank lines ignored. Every CLI flag has a key of the
//! same name, so a config file can express anything the command line can.

use crate::addr::PAGE_BYTES;
use thiserror::Error;

/// How translation structures are kept coherent with page tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoherenceMode {
    /// Software shootdown: flush-request bits, IPIs to every vCPU of the VM,
    /// VM exits for targets running guest code, full flushes at re-entry.
    Sw,
    /// Co-tagged translation entries invalidated selectively by the
    /// cache-coherence directory fanout.
    Hatric,
    /// Co-tag precision for TLBs only; MMU caches and nested TLBs are
    /// flushed wholesale at fanout targets (no reverse-lookup circuitry).
    TlbOnly,
    /// Reference mode: exactly the stale entries vanish, at zero cost.
    Ideal,
}

impl CoherenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CoherenceMode::Sw => "sw",
            CoherenceMode::Hatric => "hatric",
            CoherenceMode::TlbOnly => "tlb-only",
            CoherenceMode::Ideal => "ideal",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "sw" => Ok(CoherenceMode::Sw),
            "hatric" => Ok(CoherenceMode::Hatric),
            "tlb-only" | "tlbonly" => Ok(CoherenceMode::TlbOnly),
            "ideal" => Ok(CoherenceMode::Ideal),
            other => Err(ConfigError::BadValue {
                key: "mode".into(),
                value: other.into(),
                expect: "sw | hatric | tlb-only | ideal",
            }),
        }
    }
}

/// Page-eviction order for the fast-memory pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictOrder {
    /// CLOCK second-chance over nested-leaf access bits (approximate LRU).
    Lru,
    /// Insertion order, ignoring access bits.
    Fifo,
}

/// Paging-policy bundle as spelled on the command line:
/// `lru[,daemon][,prefetch[N]]` or `fifo[...]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PagingPolicy {
    pub order: EvictOrder,
    /// Run the background migration daemon (watermark-driven eviction).
    pub daemon: bool,
    /// Pages pulled in around a faulting page (0 = none).
    pub prefetch: u32,
}

impl PagingPolicy {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        let mut policy = PagingPolicy { order: EvictOrder::Lru, daemon: false, prefetch: 0 };
        for (i, part) in s.split(',').map(str::trim).enumerate() {
            match part {
                "lru" if i == 0 => policy.order = EvictOrder::Lru,
                "fifo" if i == 0 => policy.order = EvictOrder::Fifo,
                "daemon" => policy.daemon = true,
                "prefetch" => policy.prefetch = 4,
                p if p.starts_with("prefetch") => {
                    policy.prefetch = p["prefetch".len()..].parse().map_err(|_| {
                        ConfigError::BadValue {
                            key: "policy".into(),
                            value: s.into(),
                            expect: "lru|fifo[,daemon][,prefetch[N]]",
                        }
                    })?;
                }
                _ => {
                    return Err(ConfigError::BadValue {
                        key: "policy".into(),
                        value: s.into(),
                        expect: "lru|fifo[,daemon][,prefetch[N]]",
                    })
                }
            }
        }
        Ok(policy)
    }

    pub fn as_string(&self) -> String {
        let mut s = match self.order {
            EvictOrder::Lru => "lru".to_string(),
            EvictOrder::Fifo => "fifo".to_string(),
        };
        if self.daemon {
            s.push_str(",daemon");
        }
        if self.prefetch > 0 {
            s.push_str(&format!(",prefetch{}", self.prefetch));
        }
        s
    }
}

/// Translation-structure geometry. Entry counts scale with `size_mult`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TstructConfig {
    pub l1_tlb_entries: usize,
    pub l1_tlb_ways: usize,
    pub l2_tlb_entries: usize,
    pub l2_tlb_ways: usize,
    /// Nested TLB (guest-physical to system-physical); fully associative.
    pub ntlb_entries: usize,
    /// MMU paging-structure cache; fully associative.
    pub mmu_cache_entries: usize,
    /// Uniform size multiplier: 1, 2 or 4.
    pub size_mult: usize,
}

impl Default for TstructConfig {
    fn default() -> Self {
        TstructConfig {
            l1_tlb_entries: 64,
            l1_tlb_ways: 4,
            l2_tlb_entries: 512,
            l2_tlb_ways: 8,
            ntlb_entries: 32,
            mmu_cache_entries: 48,
            size_mult: 1,
        }
    }
}

/// Private cache and shared LLC geometry (line counts, not bytes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub l1_lines: usize,
    pub l1_ways: usize,
    pub l2_lines: usize,
    pub l2_ways: usize,
    pub llc_lines: usize,
    pub llc_ways: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        // 32 KiB L1D, 256 KiB private L2, 20 MiB shared LLC.
        CacheConfig {
            l1_lines: 512,
            l1_ways: 8,
            l2_lines: 4096,
            l2_ways: 8,
            llc_lines: 327_680,
            llc_ways: 16,
        }
    }
}

/// Coherence-directory sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectoryConfig {
    /// Unbounded directory (no back-invalidations); for tests.
    pub infinite: bool,
    pub ways: usize,
    /// Capacity = `capacity_mult` x aggregate private L2 lines.
    pub capacity_mult: usize,
}

impl Default for DirectoryConfig {
    fn default() -> Self {
        DirectoryConfig { infinite: false, ways: 8, capacity_mult: 2 }
    }
}

/// Access latencies in cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub l1_hit: u64,
    pub l2_hit: u64,
    /// LLC / directory / remote-forward access.
    pub llc: u64,
    pub dram_fast: u64,
    pub dram_slow: u64,
    /// Second-level TLB probe after a first-level miss.
    pub l2_tlb_probe: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { l1_hit: 4, l2_hit: 12, llc: 40, dram_fast: 120, dram_slow: 200, l2_tlb_probe: 2 }
    }
}

/// Cycle costs of translation-coherence mechanics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Sending one inter-processor interrupt (initiator side, per target).
    pub ipi: u64,
    /// One VM exit + re-entry at a target running guest code.
    pub vm_exit: u64,
    /// Host interrupt delivery (guest-side remap costs; kept for
    /// completeness, no stock workload emits guest-initiated remaps).
    pub interrupt: u64,
    /// Probing one structure's CAM during a selective invalidation.
    pub probe: u64,
    /// Per entry actually invalidated.
    pub per_inv: u64,
    /// One directed coherence/network message.
    pub message: u64,
    /// Guest-OS page-fault handling (first touch of an unmapped page).
    pub guest_fault: u64,
    /// Hypervisor fault-handler fixed work (besides the VM exit and copy).
    pub fault_fixed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            ipi: 1500,
            vm_exit: 1300,
            interrupt: 640,
            probe: 2,
            per_inv: 2,
            message: 20,
            guest_fault: 300,
            fault_fixed: 500,
        }
    }
}

/// Dynamic per-event and static per-cycle energy (abstract nJ units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub tstruct_probe: f64,
    /// Per entry scanned during a CAM invalidation probe.
    pub cam_entry: f64,
    pub cache_probe: f64,
    pub directory_probe: f64,
    pub message: f64,
    pub dram_access: f64,
    /// Baseline static power, per cycle.
    pub static_base: f64,
    /// Translation-structure static power, per cycle, before tag overhead.
    pub tstruct_static: f64,
    /// Added tstruct static power per byte of co-tag, as a fraction of
    /// `tstruct_static` (0.02 = 2% per byte).
    pub cotag_static_per_byte: f64,
    /// Equivalent tag bytes of the reverse-lookup CAM in tlb-only mode.
    pub unitd_cam_bytes: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            tstruct_probe: 0.01,
            // A single tag compare is orders of magnitude cheaper than a
            // full cache-array probe.
            cam_entry: 0.0002,
            cache_probe: 0.02,
            directory_probe: 0.05,
            message: 0.5,
            dram_access: 10.0,
            // Leakage-dominated accounting: wasted cycles burn static
            // power, which is how narrow aliasing tags lose on energy
            // despite storing fewer bits.
            static_base: 2.0,
            tstruct_static: 0.25,
            cotag_static_per_byte: 0.02,
            unitd_cam_bytes: 8.0,
        }
    }
}

/// Physical-memory geometry: die-stacked fast DRAM in front of slow DRAM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemConfig {
    pub fast_bytes: u64,
    pub slow_bytes: u64,
    /// Sustained bandwidth, bytes per cycle (fast defaults to 4x slow).
    pub fast_bw: u64,
    pub slow_bw: u64,
    /// Allocate page-table pages from the fast region instead of slow.
    pub tables_fast: bool,
    /// Frames reserved for tables at the top of fast when `tables_fast`.
    pub fast_table_reserve: u64,
}

impl Default for MemConfig {
    fn default() -> Self {
        MemConfig {
            fast_bytes: 2 << 30,
            slow_bytes: 8 << 30,
            fast_bw: 32,
            slow_bw: 8,
            tables_fast: false,
            fast_table_reserve: 0,
        }
    }
}

/// Hypervisor paging-engine settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PagingConfig {
    /// When disabled, pages stay where first mapped (all-slow baseline).
    pub enabled: bool,
    pub policy: PagingPolicy,
    pub low_watermark: u64,
    pub high_watermark: u64,
    /// Engine turns (trace records) between daemon wake-ups.
    pub daemon_period: u64,
}

impl Default for PagingConfig {
    fn default() -> Self {
        PagingConfig {
            enabled: true,
            policy: PagingPolicy { order: EvictOrder::Lru, daemon: false, prefetch: 0 },
            low_watermark: 64,
            high_watermark: 128,
            daemon_period: 256,
        }
    }
}

/// Complete simulator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cpus: usize,
    /// vCPUs the workload generator spreads each VM across.
    pub vcpus: usize,
    pub mode: CoherenceMode,
    /// Two-dimensional (guest + nested) paging; false models a bare-metal
    /// host with a single radix table.
    pub virtualized: bool,
    /// Co-tag width in bits: 8, 16 or 24.
    pub cotag_bits: u32,
    pub tstruct: TstructConfig,
    pub cache: CacheConfig,
    pub directory: DirectoryConfig,
    pub latency: LatencyModel,
    pub cost: CostModel,
    pub energy: EnergyModel,
    pub mem: MemConfig,
    pub paging: PagingConfig,
    /// Defragmentation-style remaps per million trace records.
    pub background_remaps_per_m: u64,
    pub seed: u64,
    /// Verify global invariants after every record (slow; tests).
    pub debug_checks: bool,
    /// With `debug_checks`, run the whole-system scan (coherence
    /// invariants, directory conservatism) every this many records.
    pub debug_full_audit_every: u64,
    /// Collect a line-per-event debug log.
    pub log_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cpus: 16,
            vcpus: 16,
            mode: CoherenceMode::Hatric,
            virtualized: true,
            cotag_bits: 16,
            tstruct: TstructConfig::default(),
            cache: CacheConfig::default(),
            directory: DirectoryConfig::default(),
            latency: LatencyModel::default(),
            cost: CostModel::default(),
            energy: EnergyModel::default(),
            mem: MemConfig::default(),
            paging: PagingConfig::default(),
            background_remaps_per_m: 0,
            seed: 1,
            debug_checks: false,
            debug_full_audit_every: 1024,
            log_events: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}` (expected {expect})")]
    BadValue { key: String, value: String, expect: &'static str },
    #[error("{0}")]
    Invalid(String),
}

fn is_pow2(v: u64) -> bool {
    v != 0 && v & (v - 1) == 0
}

impl SimConfig {
    /// Sanity-check cross-field constraints. Called by the engine before a
    /// run; exposed so the CLI can fail fast.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = |m: String| Err(ConfigError::Invalid(m));
        if self.cpus == 0 || self.cpus > 64 {
            return e(format!("cpus = {} out of range 1..=64", self.cpus));
        }
        if self.vcpus == 0 || self.vcpus > self.cpus {
            return e(format!("vcpus = {} must be in 1..=cpus ({})", self.vcpus, self.cpus));
        }
        if !matches!(self.cotag_bits, 8 | 16 | 24) {
            return e(format!("cotag_bits = {} not one of 8|16|24", self.cotag_bits));
        }
        if !matches!(self.tstruct.size_mult, 1 | 2 | 4) {
            return e(format!("tstruct_mult = {} not one of 1|2|4", self.tstruct.size_mult));
        }
        for (name, entries, ways) in [
            ("l1_tlb", self.tstruct.l1_tlb_entries, self.tstruct.l1_tlb_ways),
            ("l2_tlb", self.tstruct.l2_tlb_entries, self.tstruct.l2_tlb_ways),
        ] {
            if entries % ways != 0 || !is_pow2((entries / ways) as u64) {
                return e(format!("{name}: sets must be a power of two ({entries}/{ways})"));
            }
        }
        for (name, lines, ways) in [
            ("l1 cache", self.cache.l1_lines, self.cache.l1_ways),
            ("l2 cache", self.cache.l2_lines, self.cache.l2_ways),
            ("llc", self.cache.llc_lines, self.cache.llc_ways),
        ] {
            if lines == 0 || lines % ways != 0 {
                return e(format!("{name}: lines ({lines}) must divide by ways ({ways})"));
            }
        }
        if self.mem.fast_bytes % PAGE_BYTES != 0 || self.mem.slow_bytes % PAGE_BYTES != 0 {
            return e("memory region sizes must be page multiples".into());
        }
        if self.mem.fast_bytes == 0 || self.mem.slow_bytes == 0 {
            return e("memory regions must be non-empty".into());
        }
        if self.mem.fast_bw == 0 || self.mem.slow_bw == 0 {
            return e("memory bandwidth must be non-zero".into());
        }
        if self.mem.tables_fast && self.mem.fast_table_reserve == 0 {
            return e("tables_fast requires fast_table_reserve > 0".into());
        }
        if self.paging.low_watermark >= self.paging.high_watermark {
            return e(format!(
                "watermarks: low ({}) must be < high ({})",
                self.paging.low_watermark, self.paging.high_watermark
            ));
        }
        if self.paging.daemon_period == 0 {
            return e("daemon_period must be > 0".into());
        }
        if self.debug_full_audit_every == 0 {
            return e("debug_full_audit_every must be > 0".into());
        }
        Ok(())
    }

    /// Parse a key=value config file body over `self` (later keys win).
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, key, value) in kv_lines(text)? {
            self.apply_kv(&key, &value).map_err(|err| match err {
                ConfigError::UnknownKey(k) => {
                    ConfigError::Invalid(format!("line {lineno}: unknown key `{k}`"))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Apply one key/value pair (the CLI funnels flags through here too).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str, expect: &'static str) -> Result<T, ConfigError> {
            parse_scaled(v)
                .and_then(|n| T::from_str(&n.to_string()).ok())
                .ok_or_else(|| ConfigError::BadValue { key: key.into(), value: v.into(), expect })
        }
        fn flag(key: &str, v: &str) -> Result<bool, ConfigError> {
            match v {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(ConfigError::BadValue { key: key.into(), value: v.into(), expect: "bool" }),
            }
        }
        fn float(key: &str, v: &str) -> Result<f64, ConfigError> {
            v.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: v.into(), expect: "number" })
        }
        match key {
            "cpus" => self.cpus = num(key, value, "integer")?,
            "vcpus" => self.vcpus = num(key, value, "integer")?,
            "mode" => self.mode = CoherenceMode::parse(value)?,
            "virtualized" => self.virtualized = flag(key, value)?,
            "cotag_bits" => self.cotag_bits = num(key, value, "8|16|24")?,
            "cotag_bytes" => self.cotag_bits = 8 * num::<u32>(key, value, "1|2|3")?,
            "tstruct_mult" => self.tstruct.size_mult = num(key, value, "1|2|4")?,
            "l1_tlb_entries" => self.tstruct.l1_tlb_entries = num(key, value, "integer")?,
            "l1_tlb_ways" => self.tstruct.l1_tlb_ways = num(key, value, "integer")?,
            "l2_tlb_entries" => self.tstruct.l2_tlb_entries = num(key, value, "integer")?,
            "l2_tlb_ways" => self.tstruct.l2_tlb_ways = num(key, value, "integer")?,
            "ntlb_entries" => self.tstruct.ntlb_entries = num(key, value, "integer")?,
            "mmu_cache_entries" => self.tstruct.mmu_cache_entries = num(key, value, "integer")?,
            "l1_lines" => self.cache.l1_lines = num(key, value, "integer")?,
            "l1_ways" => self.cache.l1_ways = num(key, value, "integer")?,
            "l2_lines" => self.cache.l2_lines = num(key, value, "integer")?,
            "l2_ways" => self.cache.l2_ways = num(key, value, "integer")?,
            "llc_lines" => self.cache.llc_lines = num(key, value, "integer")?,
            "llc_ways" => self.cache.llc_ways = num(key, value, "integer")?,
            "directory_infinite" => self.directory.infinite = flag(key, value)?,
            "directory_ways" => self.directory.ways = num(key, value, "integer")?,
            "directory_capacity_mult" => self.directory.capacity_mult = num(key, value, "integer")?,
            "lat_l1" => self.latency.l1_hit = num(key, value, "cycles")?,
            "lat_l2" => self.latency.l2_hit = num(key, value, "cycles")?,
            "lat_llc" => self.latency.llc = num(key, value, "cycles")?,
            "lat_dram_fast" => self.latency.dram_fast = num(key, value, "cycles")?,
            "lat_dram_slow" => self.latency.dram_slow = num(key, value, "cycles")?,
            "lat_l2_tlb" => self.latency.l2_tlb_probe = num(key, value, "cycles")?,
            "cost_ipi" => self.cost.ipi = num(key, value, "cycles")?,
            "cost_vm_exit" => self.cost.vm_exit = num(key, value, "cycles")?,
            "cost_interrupt" => self.cost.interrupt = num(key, value, "cycles")?,
            "cost_probe" => self.cost.probe = num(key, value, "cycles")?,
            "cost_per_inv" => self.cost.per_inv = num(key, value, "cycles")?,
            "cost_message" => self.cost.message = num(key, value, "cycles")?,
            "cost_guest_fault" => self.cost.guest_fault = num(key, value, "cycles")?,
            "cost_fault_fixed" => self.cost.fault_fixed = num(key, value, "cycles")?,
            "energy_tstruct_probe" => self.energy.tstruct_probe = float(key, value)?,
            "energy_cam_entry" => self.energy.cam_entry = float(key, value)?,
            "energy_cache_probe" => self.energy.cache_probe = float(key, value)?,
            "energy_directory_probe" => self.energy.directory_probe = float(key, value)?,
            "energy_message" => self.energy.message = float(key, value)?,
            "energy_dram_access" => self.energy.dram_access = float(key, value)?,
            "energy_static_base" => self.energy.static_base = float(key, value)?,
            "energy_tstruct_static" => self.energy.tstruct_static = float(key, value)?,
            "energy_cotag_static_per_byte" => self.energy.cotag_static_per_byte = float(key, value)?,
            "energy_unitd_cam_bytes" => self.energy.unitd_cam_bytes = float(key, value)?,
            "fast_bytes" => self.mem.fast_bytes = num(key, value, "bytes")?,
            "slow_bytes" => self.mem.slow_bytes = num(key, value, "bytes")?,
            "fast_bw" => self.mem.fast_bw = num(key, value, "bytes/cycle")?,
            "slow_bw" => self.mem.slow_bw = num(key, value, "bytes/cycle")?,
            "tables_fast" => self.mem.tables_fast = flag(key, value)?,
            "fast_table_reserve" => self.mem.fast_table_reserve = num(key, value, "pages")?,
            "paging" => self.paging.enabled = flag(key, value)?,
            "policy" => self.paging.policy = PagingPolicy::parse(value)?,
            "low_watermark" => self.paging.low_watermark = num(key, value, "frames")?,
            "high_watermark" => self.paging.high_watermark = num(key, value, "frames")?,
            "daemon_period" => self.paging.daemon_period = num(key, value, "records")?,
            "background_remaps_per_m" => self.background_remaps_per_m = num(key, value, "integer")?,
            "seed" => self.seed = num(key, value, "integer")?,
            "debug_checks" => self.debug_checks = flag(key, value)?,
            "debug_full_audit_every" => {
                self.debug_full_audit_every = num(key, value, "records")?;
            }
            "log_events" => self.log_events = flag(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Canonical listing: one `key = value` line per knob, fixed order.
    /// Feeding this back through [`SimConfig::apply_kv_text`] reproduces the
    /// config; its hash labels result rows.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("cpus", self.cpus.to_string());
        put("vcpus", self.vcpus.to_string());
        put("mode", self.mode.as_str().into());
        put("virtualized", self.virtualized.to_string());
        put("cotag_bits", self.cotag_bits.to_string());
        put("tstruct_mult", self.tstruct.size_mult.to_string());
        put("l1_tlb_entries", self.tstruct.l1_tlb_entries.to_string());
        put("l1_tlb_ways", self.tstruct.l1_tlb_ways.to_string());
        put("l2_tlb_entries", self.tstruct.l2_tlb_entries.to_string());
        put("l2_tlb_ways", self.tstruct.l2_tlb_ways.to_string());
        put("ntlb_entries", self.tstruct.ntlb_entries.to_string());
        put("mmu_cache_entries", self.tstruct.mmu_cache_entries.to_string());
        put("l1_lines", self.cache.l1_lines.to_string());
        put("l1_ways", self.cache.l1_ways.to_string());
        put("l2_lines", self.cache.l2_lines.to_string());
        put("l2_ways", self.cache.l2_ways.to_string());
        put("llc_lines", self.cache.llc_lines.to_string());
        put("llc_ways", self.cache.llc_ways.to_string());
        put("directory_infinite", self.directory.infinite.to_string());
        put("directory_ways", self.directory.ways.to_string());
        put("directory_capacity_mult", self.directory.capacity_mult.to_string());
        put("lat_l1", self.latency.l1_hit.to_string());
        put("lat_l2", self.latency.l2_hit.to_string());
        put("lat_llc", self.latency.llc.to_string());
        put("lat_dram_fast", self.latency.dram_fast.to_string());
        put("lat_dram_slow", self.latency.dram_slow.to_string());
        put("lat_l2_tlb", self.latency.l2_tlb_probe.to_string());
        put("cost_ipi", self.cost.ipi.to_string());
        put("cost_vm_exit", self.cost.vm_exit.to_string());
        put("cost_interrupt", self.cost.interrupt.to_string());
        put("cost_probe", self.cost.probe.to_string());
        put("cost_per_inv", self.cost.per_inv.to_string());
        put("cost_message", self.cost.message.to_string());
        put("cost_guest_fault", self.cost.guest_fault.to_string());
        put("cost_fault_fixed", self.cost.fault_fixed.to_string());
        put("energy_tstruct_probe", fmt_f64(self.energy.tstruct_probe));
        put("energy_cam_entry", fmt_f64(self.energy.cam_entry));
        put("energy_cache_probe", fmt_f64(self.energy.cache_probe));
        put("energy_directory_probe", fmt_f64(self.energy.directory_probe));
        put("energy_message", fmt_f64(self.energy.message));
        put("energy_dram_access", fmt_f64(self.energy.dram_access));
        put("energy_static_base", fmt_f64(self.energy.static_base));
        put("energy_tstruct_static", fmt_f64(self.energy.tstruct_static));
        put("energy_cotag_static_per_byte", fmt_f64(self.energy.cotag_static_per_byte));
        put("energy_unitd_cam_bytes", fmt_f64(self.energy.unitd_cam_bytes));
        put("fast_bytes", self.mem.fast_bytes.to_string());
        put("slow_bytes", self.mem.slow_bytes.to_string());
        put("fast_bw", self.mem.fast_bw.to_string());
        put("slow_bw", self.mem.slow_bw.to_string());
        put("tables_fast", self.mem.tables_fast.to_string());
        put("fast_table_reserve", self.mem.fast_table_reserve.to_string());
        put("paging", self.paging.enabled.to_string());
        put("policy", self.paging.policy.as_string());
        put("low_watermark", self.paging.low_watermark.to_string());
        put("high_watermark", self.paging.high_watermark.to_string());
        put("daemon_period", self.paging.daemon_period.to_string());
        put("background_remaps_per_m", self.background_remaps_per_m.to_string());
        put("seed", self.seed.to_string());
        s
    }

    /// Short stable identifier of this configuration.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical().as_bytes()))
    }
}

/// Render a float without losing information but with stable formatting.
pub fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Split key=value text into `(line_number, key, value)` triples.
pub fn kv_lines(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.trim().into() });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse an unsigned integer with optional `k`/`m`/`g` (binary) suffix.
pub fn parse_scaled(v: &str) -> Option<u64> {
    let v = v.trim();
    let (digits, mult) = match v.chars().last()? {
        'k' | 'K' => (&v[..v.len() - 1], 1u64 << 10),
        'm' | 'M' => (&v[..v.len() - 1], 1 << 20),
        'g' | 'G' => (&v[..v.len() - 1], 1 << 30),
        _ => (v, 1),
    };
    digits.trim().parse::<u64>().ok().map(|n| n * mult)
}

/// FNV-1a 64-bit hash; stable across runs and platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}
