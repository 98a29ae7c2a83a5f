//! Experiment harness over the simulator core.
//!
//! Four subcommands: `run` simulates one trace under one configuration,
//! `sweep` runs a cross product of configurations (with per-group
//! baselines for normalization), `gen` materializes synthetic traces from
//! workload specs, and `plot` renders static SVG figures from a result
//! table. Sweep cells execute in parallel but the result table is written
//! in enumeration order, so identical invocations produce byte-identical
//! `results.csv`, `events.log` and figure files.

mod plot;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tcsim_core::config::SimConfig;
use tcsim_core::engine;
use tcsim_core::stats::Report;
use tcsim_core::trace::{self, TraceRecord, WorkloadSpec};

#[derive(Parser)]
#[command(
    name = "tcsim",
    version,
    about = "Trace-driven simulator of translation coherence in virtualized memory hierarchies"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one trace under one configuration.
    Run(RunArgs),
    /// Run a configuration cross product with per-group baselines.
    Sweep(SweepArgs),
    /// Generate a synthetic trace from a workload spec.
    Gen(GenArgs),
    /// Render SVG figures from a results.csv.
    Plot(PlotArgs),
}

/// Inputs and outputs shared by `run` and `sweep`.
#[derive(Args, Clone)]
struct IoArgs {
    /// Simulator config file, line-oriented `key = value`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file, text or binary. Mutually exclusive with --workload.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Workload spec file(s); traces are generated deterministically.
    #[arg(long)]
    workload: Vec<PathBuf>,
    /// Record budget override for generated workloads.
    #[arg(long)]
    records: Option<u64>,
    /// Simulator RNG seed (workload seeds live in their specs).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for results.csv and friends.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Render the default figure set after writing results.csv.
    #[arg(long)]
    emit_plots: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Coherence mode: sw | hatric | tlb-only | ideal.
    #[arg(long)]
    mode: Option<String>,
    /// vCPUs of the guest VM (defaults to the workload spec's value).
    #[arg(long)]
    vcpus: Option<usize>,
    /// Co-tag width in bytes: 1 | 2 | 3.
    #[arg(long)]
    cotag_bytes: Option<u32>,
    /// Translation-structure size multiplier: 1 | 2 | 4.
    #[arg(long)]
    tstruct_mult: Option<usize>,
    /// Paging policy: lru|fifo[,daemon][,prefetchN].
    #[arg(long)]
    policy: Option<String>,
    /// Write an events.log next to results.csv.
    #[arg(long)]
    debug_events: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Coherence modes to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    mode: Vec<String>,
    /// vCPU counts to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    vcpus: Vec<usize>,
    /// Co-tag widths in bytes to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    cotag_bytes: Vec<u32>,
    /// Structure size multipliers to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    tstruct_mult: Vec<usize>,
    /// Paging policies to sweep (repeat the flag; values contain commas).
    #[arg(long)]
    policy: Vec<String>,
    /// Refuse cross products larger than this many cells.
    #[arg(long, default_value_t = 96)]
    cap: usize,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct GenArgs {
    /// Workload spec file to start from (defaults otherwise).
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Archetype override: streaming | uniform | zipfian | small.
    #[arg(long)]
    archetype: Option<String>,
    #[arg(long)]
    records: Option<u64>,
    #[arg(long)]
    footprint_pages: Option<u64>,
    #[arg(long)]
    vcpus: Option<u16>,
    #[arg(long)]
    processes: Option<u16>,
    #[arg(long)]
    store_ratio: Option<f64>,
    #[arg(long)]
    zipf_exponent: Option<f64>,
    #[arg(long)]
    background_remaps_per_m: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trace file to write.
    #[arg(long)]
    out: PathBuf,
    /// Write the length-prefixed binary format instead of text.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Result table to read.
    #[arg(long, default_value = "out/results.csv")]
    csv: PathBuf,
    /// Figure specs: bars:<group>,<series>,<value> |
    /// lines:<x>,<series>,<y> | scatter:<x>,<y>[,<label>].
    /// Defaults to a standard set when omitted.
    #[arg(long)]
    figure: Vec<String>,
    /// Directory for the SVG files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Plot(a) => cmd_plot(a),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_kv_text(&text).with_context(|| format!("parsing {}", p.display()))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_workload(path: &Path) -> Result<WorkloadSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    WorkloadSpec::from_kv_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "trace".into(), |s| s.to_string_lossy().into_owned())
}

/// One simulation to run: a named configuration over a shared trace.
struct Cell {
    name: String,
    workload: String,
    /// Baseline lookup key: cells normalize within (workload, vcpus).
    group: (String, usize),
    is_baseline: bool,
    cfg: SimConfig,
    trace: Arc<Vec<TraceRecord>>,
}

const EXTRA_HEADER: &str = "cell,workload";

fn results_header(rep: &Report) -> String {
    format!("{EXTRA_HEADER},{},norm_cycles,norm_energy", rep.csv_header())
}

fn results_row(cell: &Cell, rep: &Report, norm_cycles: f64, norm_energy: f64) -> String {
    format!(
        "{},{},{},{norm_cycles:.6},{norm_energy:.6}",
        cell.name,
        cell.workload,
        rep.csv_row()
    )
}

/// Run every cell (in parallel), normalize each group against its
/// baseline, and write `results.csv` in enumeration order.
fn run_cells(cells: &[Cell], out_dir: &Path) -> Result<PathBuf> {
    let reports: Vec<Report> = cells
        .par_iter()
        .map(|c| {
            let out = engine::run(&c.cfg, &c.trace)
                .with_context(|| format!("cell {} ({})", c.name, c.workload))?;
            Ok(Report::new(&c.cfg, out.stats))
        })
        .collect::<Result<_>>()?;

    let mut baselines: BTreeMap<&(String, usize), (f64, f64)> = BTreeMap::new();
    for (cell, rep) in cells.iter().zip(&reports) {
        if cell.is_baseline {
            baselines.insert(&cell.group, (rep.stats.cycles as f64, rep.energy.total));
        }
    }

    fs::create_dir_all(out_dir)?;
    let mut csv = String::new();
    csv.push_str(&results_header(&reports[0]));
    csv.push('\n');
    println!("{:<28} {:<12} {:>14} {:>12}", "cell", "workload", "cycles", "norm_cycles");
    for (cell, rep) in cells.iter().zip(&reports) {
        let Some(&(base_cycles, base_energy)) = baselines.get(&cell.group) else {
            bail!("no baseline cell for group {}/v{}", cell.group.0, cell.group.1);
        };
        let nc = rep.stats.cycles as f64 / base_cycles;
        let ne = rep.energy.total / base_energy;
        csv.push_str(&results_row(cell, rep, nc, ne));
        csv.push('\n');
        println!("{:<28} {:<12} {:>14} {:>12.4}", cell.name, cell.workload, rep.stats.cycles, nc);
    }
    let path = out_dir.join("results.csv");
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn policy_label(s: &str) -> String {
    s.replace(',', "+")
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(a.io.config.as_deref(), a.io.seed)?;
    for (key, val) in [
        ("mode", a.mode.clone()),
        ("cotag_bytes", a.cotag_bytes.map(|v| v.to_string())),
        ("tstruct_mult", a.tstruct_mult.map(|v| v.to_string())),
        ("policy", a.policy.clone()),
    ] {
        if let Some(v) = val {
            cfg.apply_kv(key, &v)?;
        }
    }

    let (workload, records) = match (&a.io.trace, a.io.workload.as_slice()) {
        (Some(path), []) => {
            if let Some(v) = a.vcpus {
                cfg.apply_kv("vcpus", &v.to_string())?;
            }
            (stem(path), trace::read_file(path)?)
        }
        (None, [path]) => {
            let mut spec = load_workload(path)?;
            if let Some(n) = a.io.records {
                spec.records = n;
            }
            if let Some(v) = a.vcpus {
                spec.vcpus = v as u16;
            }
            cfg.vcpus = spec.vcpus as usize;
            spec.validate(cfg.cpus.max(cfg.vcpus))?;
            (stem(path), spec.generate().collect())
        }
        (None, []) => bail!("provide --trace or --workload"),
        _ => bail!("--trace and --workload are mutually exclusive (and run takes one workload)"),
    };
    cfg.cpus = cfg.cpus.max(cfg.vcpus);
    cfg.log_events |= a.debug_events;

    let cell = Cell {
        name: cfg.mode.as_str().to_string(),
        workload,
        group: (String::new(), 0),
        is_baseline: true, // a single run normalizes to itself
        cfg,
        trace: Arc::new(records),
    };
    let out = engine::run(&cell.cfg, &cell.trace)?;
    if let Some(events) = &out.events {
        let path = a.io.out.join("events.log");
        fs::create_dir_all(&a.io.out)?;
        fs::write(&path, events)?;
        println!("wrote {}", path.display());
    }
    let rep = Report::new(&cell.cfg, out.stats);
    fs::create_dir_all(&a.io.out)?;
    let csv = format!(
        "{}\n{}\n",
        results_header(&rep),
        results_row(&cell, &rep, 1.0, 1.0)
    );
    let csv_path = a.io.out.join("results.csv");
    fs::write(&csv_path, csv)?;
    print!("{}", rep.kv_dump());
    println!("wrote {}", csv_path.display());
    if a.io.emit_plots {
        render_figures(&csv_path, &[], &a.io.out)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    if let Some(jobs) = a.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
    }
    let base = load_config(a.io.config.as_deref(), a.io.seed)?;

    // Axes default to the base configuration's single value.
    let modes = if a.mode.is_empty() { vec![base.mode.as_str().to_string()] } else { a.mode };
    let cotags = if a.cotag_bytes.is_empty() { vec![base.cotag_bits / 8] } else { a.cotag_bytes };
    let mults =
        if a.tstruct_mult.is_empty() { vec![base.tstruct.size_mult] } else { a.tstruct_mult };
    let policies =
        if a.policy.is_empty() { vec![base.paging.policy.as_string()] } else { a.policy };

    // Inputs: one fixed trace, or one generated trace per (workload, vcpus).
    enum Input {
        Fixed(String, Arc<Vec<TraceRecord>>),
        Spec(String, WorkloadSpec),
    }
    let inputs: Vec<Input> = match (&a.io.trace, a.io.workload.as_slice()) {
        (Some(path), []) => vec![Input::Fixed(stem(path), Arc::new(trace::read_file(path)?))],
        (None, specs) if !specs.is_empty() => specs
            .iter()
            .map(|p| {
                let mut spec = load_workload(p)?;
                if let Some(n) = a.io.records {
                    spec.records = n;
                }
                Ok(Input::Spec(stem(p), spec))
            })
            .collect::<Result<_>>()?,
        _ => bail!("provide --trace or at least one --workload (not both)"),
    };

    let requested =
        inputs.len() * a.vcpus.len().max(1) * modes.len() * cotags.len() * mults.len() * policies.len();
    if requested > a.cap {
        bail!("sweep would run {requested} cells, over the --cap of {}", a.cap);
    }

    let mut cells = Vec::new();
    for input in &inputs {
        let (workload, vcpus_list): (&str, Vec<usize>) = match input {
            Input::Fixed(name, _) => {
                (name, if a.vcpus.is_empty() { vec![base.vcpus] } else { a.vcpus.clone() })
            }
            Input::Spec(name, spec) => (
                name,
                if a.vcpus.is_empty() { vec![spec.vcpus as usize] } else { a.vcpus.clone() },
            ),
        };
        for &v in &vcpus_list {
            let shared: Arc<Vec<TraceRecord>> = match input {
                Input::Fixed(_, t) => Arc::clone(t),
                Input::Spec(_, spec) => {
                    let mut spec = spec.clone();
                    spec.vcpus = v as u16;
                    spec.validate(base.cpus.max(v))?;
                    Arc::new(spec.generate().collect())
                }
            };
            let group = (workload.to_string(), v);
            let at = |cfg: &mut SimConfig| -> Result<()> {
                cfg.vcpus = v;
                cfg.cpus = cfg.cpus.max(v);
                Ok(())
            };

            // The normalization baseline: same trace and machine, paging
            // off, software coherence — data stays in slow memory.
            let mut bcfg = base.clone();
            at(&mut bcfg)?;
            bcfg.apply_kv("mode", "sw")?;
            bcfg.paging.enabled = false;
            cells.push(Cell {
                name: format!("base-v{v}"),
                workload: workload.to_string(),
                group: group.clone(),
                is_baseline: true,
                cfg: bcfg,
                trace: Arc::clone(&shared),
            });

            for mode in &modes {
                for &bytes in &cotags {
                    for &mult in &mults {
                        for policy in &policies {
                            let mut cfg = base.clone();
                            at(&mut cfg)?;
                            cfg.apply_kv("mode", mode)?;
                            cfg.apply_kv("cotag_bytes", &bytes.to_string())?;
                            cfg.apply_kv("tstruct_mult", &mult.to_string())?;
                            cfg.apply_kv("policy", policy)?;
                            cells.push(Cell {
                                name: format!(
                                    "{mode}-v{v}-b{bytes}-m{mult}-{}",
                                    policy_label(policy)
                                ),
                                workload: workload.to_string(),
                                group: group.clone(),
                                is_baseline: false,
                                cfg,
                                trace: Arc::clone(&shared),
                            });
                        }
                    }
                }
            }
        }
    }

    let csv_path = run_cells(&cells, &a.io.out)?;
    if a.io.emit_plots {
        render_figures(&csv_path, &[], &a.io.out)?;
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut spec = match &a.workload {
        Some(p) => load_workload(p)?,
        None => WorkloadSpec::default(),
    };
    for (key, val) in [
        ("archetype", a.archetype.clone()),
        ("records", a.records.map(|v| v.to_string())),
        ("footprint_pages", a.footprint_pages.map(|v| v.to_string())),
        ("vcpus", a.vcpus.map(|v| v.to_string())),
        ("processes", a.processes.map(|v| v.to_string())),
        ("store_ratio", a.store_ratio.map(|v| v.to_string())),
        ("zipf_exponent", a.zipf_exponent.map(|v| v.to_string())),
        ("background_remaps_per_m", a.background_remaps_per_m.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ] {
        if let Some(v) = val {
            spec.apply_kv(key, &v)?;
        }
    }
    spec.validate(spec.vcpus as usize)?;
    let records: Vec<TraceRecord> = spec.generate().collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(&a.out)?;
    let mut w = std::io::BufWriter::new(file);
    if a.binary || a.out.extension().is_some_and(|e| e == "bin") {
        trace::write_binary(&mut w, &records)?;
    } else {
        trace::write_text(&mut w, records.iter().copied())?;
    }
    drop(w);
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    render_figures(&a.csv, &a.figure, &a.out)
}

fn render_figures(csv: &Path, specs: &[String], out: &Path) -> Result<()> {
    let figures = if specs.is_empty() {
        plot::default_figures()
    } else {
        specs.iter().map(|s| plot::Figure::parse(s)).collect::<Result<_>>()?
    };
    for path in plot::render_all(csv, &figures, out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
