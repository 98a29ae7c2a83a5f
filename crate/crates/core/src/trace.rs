//! Memory-access traces: the record type, a diffable text format, a compact
//! binary format, and a seeded workload generator.
//!
//! Text format is one record per line, `cpu vm op gvp [pid]`, with the GVP
//! in hex and `op` one of `l`/`s` (load/store). `#` starts a comment.
//! Records are page-granular: a record touches byte 0 of its page.
//!
//! Multiprogrammed workloads tag records with a process id; processes of
//! one VM use per-process guest table roots and must cover disjoint GVP
//! ranges (the generator guarantees this; hand-written traces that overlap
//! ranges across pids are unsupported).

use crate::addr::Gvp;
use crate::config::{kv_lines, parse_scaled, ConfigError};
use rand::distributions::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Zipf;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Magic prefix of the binary trace format (version 1).
pub const BIN_MAGIC: &[u8; 8] = b"TCTRACE1";
/// Bytes per record in the binary format.
pub const BIN_RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Load,
    Store,
}

/// One memory access executed by a virtual CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    /// Physical CPU executing the access (vCPUs are pinned 1:1).
    pub cpu: u16,
    pub vm: u16,
    /// Process within the VM; 0 unless multiprogrammed.
    pub pid: u16,
    pub op: Op,
    pub gvp: Gvp,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("record {index}: {msg}")]
    Malformed { index: usize, msg: String },
    #[error("binary trace truncated at record {0}")]
    Truncated(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("workload spec: {0}")]
    Spec(#[from] ConfigError),
}

impl TraceRecord {
    pub fn to_text(&self) -> String {
        let op = match self.op {
            Op::Load => 'l',
            Op::Store => 's',
        };
        if self.pid == 0 {
            format!("{} {} {} {:#x}", self.cpu, self.vm, op, self.gvp.0)
        } else {
            format!("{} {} {} {:#x} {}", self.cpu, self.vm, op, self.gvp.0, self.pid)
        }
    }

    /// Parse one text line; `index` is the 0-based record number used in
    /// error messages.
    pub fn from_text(line: &str, index: usize) -> Result<Self, TraceError> {
        let bad = |msg: String| TraceError::Malformed { index, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(bad(format!("expected `cpu vm op gvp [pid]`, got {} fields", fields.len())));
        }
        let cpu = fields[0].parse().map_err(|_| bad(format!("bad cpu `{}`", fields[0])))?;
        let vm = fields[1].parse().map_err(|_| bad(format!("bad vm `{}`", fields[1])))?;
        let op = match fields[2] {
            "l" | "L" => Op::Load,
            "s" | "S" => Op::Store,
            other => return Err(bad(format!("bad op `{other}` (expected l|s)"))),
        };
        let g = fields[3];
        let gvp = if let Some(hex) = g.strip_prefix("0x").or_else(|| g.strip_prefix("0X")) {
            u64::from_str_radix(hex, 16).map_err(|_| bad(format!("bad gvp `{g}`")))?
        } else {
            return Err(bad(format!("bad gvp `{g}` (expected 0x-prefixed hex)")));
        };
        let pid = if fields.len() == 5 {
            fields[4].parse().map_err(|_| bad(format!("bad pid `{}`", fields[4])))?
        } else {
            0
        };
        Ok(TraceRecord { cpu, vm, pid, op, gvp: Gvp(gvp) })
    }

    fn to_bin(&self) -> [u8; BIN_RECORD_BYTES] {
        let mut b = [0u8; BIN_RECORD_BYTES];
        b[0..2].copy_from_slice(&self.cpu.to_le_bytes());
        b[2..4].copy_from_slice(&self.vm.to_le_bytes());
        b[4..6].copy_from_slice(&self.pid.to_le_bytes());
        b[6] = match self.op {
            Op::Load => 0,
            Op::Store => 1,
        };
        b[8..16].copy_from_slice(&self.gvp.0.to_le_bytes());
        b
    }

    fn from_bin(b: &[u8; BIN_RECORD_BYTES], index: usize) -> Result<Self, TraceError> {
        let op = match b[6] {
            0 => Op::Load,
            1 => Op::Store,
            other => {
                return Err(TraceError::Malformed { index, msg: format!("bad op byte {other}") })
            }
        };
        Ok(TraceRecord {
            cpu: u16::from_le_bytes([b[0], b[1]]),
            vm: u16::from_le_bytes([b[2], b[3]]),
            pid: u16::from_le_bytes([b[4], b[5]]),
            op,
            gvp: Gvp(u64::from_le_bytes(b[8..16].try_into().unwrap())),
        })
    }
}

/// Write records as text, one per line.
pub fn write_text<W: Write>(mut w: W, records: impl IntoIterator<Item = TraceRecord>) -> Result<(), TraceError> {
    for r in records {
        writeln!(w, "{}", r.to_text())?;
    }
    Ok(())
}

/// Write records in the length-prefixed binary format.
pub fn write_binary<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<(), TraceError> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&r.to_bin())?;
    }
    Ok(())
}

/// Read a whole trace file, sniffing text vs binary by magic.
pub fn read_file(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    let n = f.read(&mut magic)?;
    if n == 8 && &magic == BIN_MAGIC {
        let mut countb = [0u8; 8];
        f.read_exact(&mut countb)?;
        let count = u64::from_le_bytes(countb) as usize;
        let mut out = Vec::with_capacity(count);
        let mut rec = [0u8; BIN_RECORD_BYTES];
        for i in 0..count {
            f.read_exact(&mut rec).map_err(|_| TraceError::Truncated(i))?;
            out.push(TraceRecord::from_bin(&rec, i)?);
        }
        return Ok(out);
    }
    // Text: reopen from the start.
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let idx = out.len();
        out.push(TraceRecord::from_text(body, idx)?);
    }
    Ok(out)
}

/// Reject records that do not fit the machine (`cpu` out of range); returns
/// the index of the first offending record.
pub fn validate(records: &[TraceRecord], cpus: usize) -> Result<(), TraceError> {
    for (i, r) in records.iter().enumerate() {
        if (r.cpu as usize) >= cpus {
            return Err(TraceError::Malformed {
                index: i,
                msg: format!("cpu {} out of range (machine has {cpus})", r.cpu),
            });
        }
    }
    Ok(())
}

/// Synthetic access-pattern families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    /// Sequential sweep over the footprint (copy/scan-like).
    Streaming,
    /// Uniform random pages (graph-analytics-like).
    Uniform,
    /// Zipf-distributed pages (key-value-cache-like).
    Zipfian,
    /// Uniform over a footprint intended to fit fast memory.
    SmallFootprint,
}

impl Archetype {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "streaming" => Ok(Archetype::Streaming),
            "uniform" | "pseudo-random" => Ok(Archetype::Uniform),
            "zipfian" => Ok(Archetype::Zipfian),
            "small-footprint" | "small" => Ok(Archetype::SmallFootprint),
            other => Err(ConfigError::BadValue {
                key: "archetype".into(),
                value: other.into(),
                expect: "streaming | uniform | zipfian | small-footprint",
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Streaming => "streaming",
            Archetype::Uniform => "uniform",
            Archetype::Zipfian => "zipfian",
            Archetype::SmallFootprint => "small-footprint",
        }
    }
}

/// Declarative description of a synthetic workload.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub archetype: Archetype,
    pub records: u64,
    /// Total pages touched, across all processes.
    pub footprint_pages: u64,
    pub vcpus: u16,
    /// Processes sharing the VM; >1 enables multiprogram interleaving with
    /// disjoint per-process GVP ranges and disjoint CPU subsets.
    pub processes: u16,
    pub store_ratio: f64,
    pub zipf_exponent: f64,
    /// Defragmentation-style remaps per million records, applied by the
    /// engine (traces stay pure load/store streams).
    pub background_remaps_per_m: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            archetype: Archetype::Zipfian,
            records: 100_000,
            footprint_pages: 4096,
            vcpus: 16,
            processes: 1,
            store_ratio: 0.3,
            zipf_exponent: 0.99,
            background_remaps_per_m: 0,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    /// Parse a key=value workload spec file body.
    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut spec = WorkloadSpec::default();
        for (_line, key, value) in kv_lines(text)? {
            spec.apply_kv(&key, &value)?;
        }
        Ok(spec)
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |expect: &'static str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expect,
        };
        match key {
            "archetype" => self.archetype = Archetype::parse(value)?,
            "records" => self.records = parse_scaled(value).ok_or(bad("integer"))?,
            "footprint_pages" => self.footprint_pages = parse_scaled(value).ok_or(bad("pages"))?,
            "footprint_bytes" => {
                self.footprint_pages = parse_scaled(value).ok_or(bad("bytes"))? / crate::addr::PAGE_BYTES
            }
            "vcpus" => self.vcpus = parse_scaled(value).ok_or(bad("integer"))? as u16,
            "processes" => self.processes = parse_scaled(value).ok_or(bad("integer"))? as u16,
            "store_ratio" => self.store_ratio = value.parse().map_err(|_| bad("0.0..1.0"))?,
            "zipf_exponent" => self.zipf_exponent = value.parse().map_err(|_| bad("float"))?,
            "background_remaps_per_m" => {
                self.background_remaps_per_m = parse_scaled(value).ok_or(bad("integer"))?
            }
            "seed" => self.seed = parse_scaled(value).ok_or(bad("integer"))?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn validate(&self, cpus: usize) -> Result<(), ConfigError> {
        if self.vcpus == 0 || self.vcpus as usize > cpus {
            return Err(ConfigError::Invalid(format!(
                "workload vcpus {} must be in 1..=cpus ({cpus})",
                self.vcpus
            )));
        }
        if self.processes == 0 || self.processes > self.vcpus {
            return Err(ConfigError::Invalid(format!(
                "processes {} must be in 1..=vcpus ({})",
                self.processes, self.vcpus
            )));
        }
        if self.footprint_pages == 0 {
            return Err(ConfigError::Invalid("footprint_pages must be > 0".into()));
        }
        if self.footprint_pages.div_ceil(self.processes as u64) > PROC_GVP_STRIDE {
            return Err(ConfigError::Invalid(format!(
                "per-process footprint exceeds the {PROC_GVP_STRIDE}-page range per process"
            )));
        }
        if !(0.0..=1.0).contains(&self.store_ratio) {
            return Err(ConfigError::Invalid("store_ratio must be in 0..=1".into()));
        }
        if self.zipf_exponent <= 0.0 {
            return Err(ConfigError::Invalid("zipf_exponent must be > 0".into()));
        }
        Ok(())
    }

    /// Canonical key=value rendering (same shape `from_kv_text` accepts).
    pub fn canonical(&self) -> String {
        format!(
            "archetype = {}\nrecords = {}\nfootprint_pages = {}\nvcpus = {}\nprocesses = {}\nstore_ratio = {}\nzipf_exponent = {}\nbackground_remaps_per_m = {}\nseed = {}\n",
            self.archetype.as_str(),
            self.records,
            self.footprint_pages,
            self.vcpus,
            self.processes,
            self.store_ratio,
            self.zipf_exponent,
            self.background_remaps_per_m,
            self.seed
        )
    }

    /// Deterministic record stream for this spec. Same spec, same bytes.
    pub fn generate(&self) -> WorkloadGen {
        let per_proc = self.footprint_pages / self.processes as u64;
        WorkloadGen {
            spec: self.clone(),
            rng: ChaCha12Rng::seed_from_u64(self.seed),
            store: Bernoulli::new(self.store_ratio.clamp(0.0, 1.0)).expect("ratio validated"),
            zipf: Zipf::new(per_proc.max(1), self.zipf_exponent).expect("exponent validated"),
            per_proc_pages: per_proc.max(1),
            next: 0,
        }
    }
}

/// Iterator producing the records of a [`WorkloadSpec`].
pub struct WorkloadGen {
    spec: WorkloadSpec,
    rng: ChaCha12Rng,
    store: Bernoulli,
    zipf: Zipf<f64>,
    per_proc_pages: u64,
    next: u64,
}

/// Per-process GVP ranges start at multiples of this stride, keeping them
/// disjoint for any footprint the generator accepts while staying well
/// inside the page-number space four table levels cover.
const PROC_GVP_STRIDE: u64 = 1 << 28;

impl Iterator for WorkloadGen {
    type Item = TraceRecord;

    fn next(&mut self) -> Option<TraceRecord> {
        if self.next >= self.spec.records {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let procs = self.spec.processes as u64;
        let pid = (i % procs) as u16;
        // Each process round-robins over its own CPU subset.
        let vcpus_per_proc = (self.spec.vcpus as u64 / procs).max(1);
        let cpu = (pid as u64 * vcpus_per_proc + (i / procs) % vcpus_per_proc) as u16;
        let page = match self.spec.archetype {
            Archetype::Streaming => (i / procs) % self.per_proc_pages,
            Archetype::Uniform | Archetype::SmallFootprint => {
                self.rng.gen_range(0..self.per_proc_pages)
            }
            Archetype::Zipfian => self.zipf.sample(&mut self.rng) as u64 - 1,
        };
        let op = if self.store.sample(&mut self.rng) { Op::Store } else { Op::Load };
        Some(TraceRecord {
            cpu,
            vm: 0,
            pid: if procs > 1 { pid + 1 } else { 0 },
            op,
            gvp: Gvp(pid as u64 * PROC_GVP_STRIDE + page),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(archetype: Archetype) -> WorkloadSpec {
        WorkloadSpec { archetype, records: 64, footprint_pages: 16, vcpus: 4, ..Default::default() }
    }

    #[test]
    fn text_roundtrip_with_and_without_pid() {
        let r = TraceRecord { cpu: 3, vm: 0, pid: 0, op: Op::Load, gvp: Gvp(0x1a2b) };
        assert_eq!(r.to_text(), "3 0 l 0x1a2b");
        assert_eq!(TraceRecord::from_text(&r.to_text(), 0).unwrap(), r);
        let r = TraceRecord { cpu: 1, vm: 2, pid: 7, op: Op::Store, gvp: Gvp(0xfff) };
        assert_eq!(r.to_text(), "1 2 s 0xfff 7");
        assert_eq!(TraceRecord::from_text(&r.to_text(), 0).unwrap(), r);
    }

    #[test]
    fn malformed_text_reports_record_index() {
        let err = TraceRecord::from_text("1 2 x 0x10", 41).unwrap_err();
        assert!(err.to_string().contains("record 41"));
        assert!(TraceRecord::from_text("1 2 l 10", 0).is_err(), "gvp must be hex");
        assert!(TraceRecord::from_text("1 2 l", 0).is_err());
    }

    #[test]
    fn file_roundtrips_both_formats() {
        let recs: Vec<TraceRecord> = spec(Archetype::Zipfian).generate().collect();
        let dir = std::env::temp_dir().join(format!("tcsim-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let txt = dir.join("t.trace");
        write_text(std::fs::File::create(&txt).unwrap(), recs.iter().copied()).unwrap();
        assert_eq!(read_file(&txt).unwrap(), recs);

        let bin = dir.join("t.bin");
        write_binary(std::fs::File::create(&bin).unwrap(), &recs).unwrap();
        assert_eq!(read_file(&bin).unwrap(), recs);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validate_rejects_out_of_range_cpu() {
        let recs = vec![TraceRecord { cpu: 9, vm: 0, pid: 0, op: Op::Load, gvp: Gvp(0) }];
        let err = validate(&recs, 8).unwrap_err();
        assert!(err.to_string().contains("record 0"));
        assert!(validate(&recs, 10).is_ok());
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let a: Vec<_> = spec(Archetype::Zipfian).generate().collect();
        let b: Vec<_> = spec(Archetype::Zipfian).generate().collect();
        assert_eq!(a, b);
        let mut other = spec(Archetype::Zipfian);
        other.seed = 2;
        let c: Vec<_> = other.generate().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn streaming_sweeps_sequentially() {
        let recs: Vec<_> = spec(Archetype::Streaming).generate().collect();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.gvp.0, (i as u64) % 16);
            assert_eq!(r.cpu as u64, (i as u64) % 4);
            assert_eq!(r.vm, 0);
        }
    }

    #[test]
    fn footprint_and_cpu_bounds_hold() {
        for arche in [Archetype::Streaming, Archetype::Uniform, Archetype::Zipfian, Archetype::SmallFootprint] {
            for r in spec(arche).generate() {
                assert!(r.gvp.0 < 16, "{arche:?} leaked past footprint: {:#x}", r.gvp.0);
                assert!(r.cpu < 4);
            }
        }
    }

    #[test]
    fn multiprogram_ranges_and_cpus_are_disjoint() {
        let mut s = spec(Archetype::Uniform);
        s.processes = 2;
        s.records = 200;
        for r in s.generate() {
            assert!(r.pid == 1 || r.pid == 2);
            let base = (r.pid - 1) as u64 * PROC_GVP_STRIDE;
            assert!(r.gvp.0 >= base && r.gvp.0 < base + 8, "gvp in process range");
            // Process 1 on cpus {0,1}, process 2 on {2,3}.
            assert_eq!(r.cpu / 2, r.pid - 1);
        }
    }

    #[test]
    fn spec_kv_roundtrip() {
        let mut s = WorkloadSpec::default();
        s.archetype = Archetype::Streaming;
        s.footprint_pages = 99;
        s.processes = 2;
        assert_eq!(WorkloadSpec::from_kv_text(&s.canonical()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn binary_roundtrip_any_record(cpu in 0u16..64, vm in 0u16..4, pid in 0u16..8, store in any::<bool>(), gvp in 0u64..(1 << 48)) {
            let r = TraceRecord { cpu, vm, pid, op: if store { Op::Store } else { Op::Load }, gvp: Gvp(gvp) };
            let b = r.to_bin();
            prop_assert_eq!(TraceRecord::from_bin(&b, 0).unwrap(), r);
        }
    }
}
