//! Command implementations behind the `asyncsim` binary. Each `cmd_*`
//! returns the text the command prints so it can be exercised without a
//! subprocess.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use asyncsim::bench_ingest::{self, Averaging};
use asyncsim::machine_model::{byte_per_flop, compute_density, expected_speedup, Grade};
use asyncsim::microbench::{
    self, build_workload, starve_occupancy, Coordinate, OccupancyMode, SweepConfig, SWEEP_CSV_HEADER,
};
use asyncsim::plot;
use asyncsim::sim::run_repeated;
use asyncsim::{Grid, MachineParams, PatternKind, Precision, RooflinePoint, SpecDatabase, WaitKind};

pub mod report;

pub use report::{Cell, Format, Report};

#[derive(Debug, Parser)]
#[command(name = "asyncsim", version, about = "Async-copy pipeline simulator and GPU balance toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derived metrics of a GPU spec table.
    Specs(SpecsArgs),
    /// Roofline of a machine profile, optionally with measured points.
    Roofline(RooflineArgs),
    /// Simulate one pattern on one grid.
    Simulate(SimulateArgs),
    /// Run a parameter sweep and write its CSV.
    Sweep(SweepArgs),
    /// Aggregate benchmark timings.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    /// Bytes of bandwidth per FLOP.
    Bf,
    /// GFLOP/s per mm² of die.
    Density,
    /// Expected speedup between device pairs.
    Upgrade,
}

#[derive(Debug, Args)]
pub struct SpecsArgs {
    /// Spec CSV path, or `builtin` for the embedded table.
    #[arg(long, default_value = "builtin")]
    pub specs: String,
    #[arg(long, value_enum, default_value = "bf")]
    pub metric: Metric,
    #[arg(long, default_value = "fp32")]
    pub precision: Precision,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// `OLD:NEW` device pair for `--metric upgrade`; repeatable. Defaults to
    /// consecutive devices of the same grade.
    #[arg(long = "pair")]
    pub pairs: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RooflineArgs {
    /// Builtin profile (`a100-like`, `v100-like`) or a JSON file.
    #[arg(long, default_value = "a100-like")]
    pub machine: String,
    /// Sweep CSV or roofline CSV whose points are overlaid.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Output file; `.svg` or `.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "overlap")]
    pub pattern: PatternKind,
    #[arg(long, default_value = "pipeline")]
    pub wait: WaitKind,
    /// Total fp32 elements processed.
    #[arg(long, default_value_t = 1 << 20)]
    pub elements: u64,
    #[arg(long, default_value_t = 256)]
    pub tile_elements: usize,
    #[arg(long, default_value_t = 1)]
    pub iterations: u32,
    /// Copies in flight (Overlap).
    #[arg(long, default_value_t = 2)]
    pub inflight: usize,
    #[arg(long, default_value_t = 216)]
    pub blocks: usize,
    #[arg(long, default_value_t = 256)]
    pub threads: usize,
    #[arg(long, value_enum, default_value = "full")]
    pub occupancy: Occupancy,
    #[arg(long, default_value = "a100-like")]
    pub machine: String,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Uniform extra copy latency bound in cycles.
    #[arg(long, default_value_t = 0)]
    pub jitter: u32,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Occupancy {
    Full,
    Starved,
}

impl From<Occupancy> for OccupancyMode {
    fn from(o: Occupancy) -> Self {
        match o {
            Occupancy::Full => OccupancyMode::Full,
            Occupancy::Starved => OccupancyMode::Starved,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep config JSON.
    #[arg(long)]
    pub sweep: PathBuf,
    #[arg(long, default_value = "a100-like")]
    pub machine: String,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mean {
    Arithmetic,
    Geometric,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["order", "baseline_variant"])))]
pub struct CompareArgs {
    /// Results CSV (`device,benchmark,variant,input,time_s`).
    #[arg(long)]
    pub results: PathBuf,
    /// Devices oldest first; summarizes each consecutive pair.
    #[arg(long, value_delimiter = ',')]
    pub order: Vec<String>,
    /// Compare every variant against `baseline` instead.
    #[arg(long)]
    pub baseline_variant: bool,
    /// Restrict a variant comparison to one device.
    #[arg(long, requires = "baseline_variant")]
    pub device: Option<String>,
    /// Restrict a variant comparison to one benchmark.
    #[arg(long, requires = "baseline_variant")]
    pub benchmark: Option<String>,
    #[arg(long, value_enum, default_value = "arithmetic")]
    pub averaging: Mean,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

/// Runs a parsed command and returns what it prints.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Specs(a) => {
            let format = a.format;
            specs_report(&a)?.render(format)
        }
        Command::Roofline(a) => cmd_roofline(&a),
        Command::Simulate(a) => {
            let format = a.format;
            simulate_report(&a)?.render(format)
        }
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Compare(a) => {
            let format = a.format;
            compare_report(&a)?.render(format)
        }
    }
}

fn load_specs(source: &str) -> Result<SpecDatabase> {
    if source == "builtin" {
        return Ok(SpecDatabase::builtin());
    }
    SpecDatabase::load(source).with_context(|| format!("loading spec table {source}"))
}

fn default_pairs(db: &SpecDatabase) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for grade in [Grade::Tesla, Grade::Consumer] {
        let line: Vec<_> = db.sorted().into_iter().filter(|s| s.grade == grade).collect();
        out.extend(line.windows(2).map(|w| (w[0].name.clone(), w[1].name.clone())));
    }
    out
}

pub fn specs_report(args: &SpecsArgs) -> Result<Report> {
    let db = load_specs(&args.specs)?;
    let p = args.precision;
    if args.metric == Metric::Upgrade {
        let pairs = if args.pairs.is_empty() {
            default_pairs(&db)
        } else {
            args.pairs
                .iter()
                .map(|s| match s.split_once(':') {
                    Some((a, b)) => Ok((a.trim().to_string(), b.trim().to_string())),
                    None => bail!("pair `{s}` is not of the form OLD:NEW"),
                })
                .collect::<Result<_>>()?
        };
        let mut r = Report::new(&["from", "to", "precision", "flop_ratio", "bw_ratio", "t_speedup"]);
        for (old, new) in pairs {
            let e = expected_speedup(db.require(&old)?, db.require(&new)?, p);
            r.push(vec![
                old.into(),
                new.into(),
                p.to_string().into(),
                Cell::num(e.flop_ratio, 2),
                Cell::num(e.bw_ratio, 2),
                Cell::num(e.t_speedup, 2),
            ]);
        }
        return Ok(r);
    }
    let (col, f): (String, fn(&asyncsim::GpuSpec, Precision) -> f64) = match args.metric {
        Metric::Bf => (format!("bf_{p}"), byte_per_flop),
        Metric::Density => (format!("density_{p}"), compute_density),
        Metric::Upgrade => unreachable!(),
    };
    let mut r = Report::new(&["name", "year", "arch", "grade", &col]);
    for s in db.sorted() {
        r.push(vec![
            s.name.as_str().into(),
            s.year.as_str().into(),
            s.architecture.as_str().into(),
            format!("{:?}", s.grade).into(),
            Cell::num(f(s, p), 4),
        ]);
    }
    Ok(r)
}

/// Points from either a sweep CSV or a roofline CSV.
pub fn read_points(path: &Path) -> Result<Vec<RooflinePoint>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let context = path.display().to_string();
    let first = text.lines().next().unwrap_or_default();
    if first == plot::ROOFLINE_CSV_HEADER {
        return Ok(plot::read_roofline_points(text.as_bytes(), &context)?);
    }
    if first != SWEEP_CSV_HEADER {
        bail!("{context}: header matches neither a sweep nor a roofline CSV");
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).expect("sweep header column");
    let (pattern, wait, ai, gflops) = (col("pattern"), col("wait"), col("ai"), col("gflops"));
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec[gflops].is_empty() {
            continue; // error row
        }
        let label = match &rec[wait] {
            "none" => rec[pattern].to_string(),
            w => format!("{}-{w}", &rec[pattern]),
        };
        let parse = |c: usize| -> Result<f64> {
            rec[c].parse().with_context(|| format!("{context}: line {}", i + 2))
        };
        out.push(RooflinePoint::new(parse(ai)?, parse(gflops)?, label)?);
    }
    Ok(out)
}

pub fn cmd_roofline(args: &RooflineArgs) -> Result<String> {
    let machine = MachineParams::resolve(&args.machine)?;
    let roof = machine.roofline();
    let points = match &args.points {
        Some(p) => read_points(p)?,
        None => Vec::new(),
    };
    let body = match args.out.extension().and_then(|e| e.to_str()) {
        Some("svg") => plot::roofline_svg(&roof, &points, &format!("Roofline: {}", args.machine)),
        Some("csv") => plot::roofline_csv(&roof, &points)?,
        _ => bail!("--out must end in .svg or .csv: {}", args.out.display()),
    };
    std::fs::write(&args.out, body).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(format!(
        "wrote {} ({} points, ridge at {:.2} flop/byte)\n",
        args.out.display(),
        points.len(),
        roof.ridge_point()
    ))
}

pub fn simulate_report(args: &SimulateArgs) -> Result<Report> {
    let machine = MachineParams::resolve(&args.machine)?;
    let coord = Coordinate {
        iterations: args.iterations,
        tile_elements: args.tile_elements,
        blocks: args.blocks,
        threads: args.threads,
        inflight: args.inflight,
        occupancy: args.occupancy.into(),
    };
    let wait = args.pattern.takes_wait_kind().then_some(args.wait);
    let w = build_workload(args.pattern, wait, args.elements, &coord)?.with_jitter(args.jitter);
    let mut grid = Grid::new(args.blocks, args.threads);
    if coord.occupancy == OccupancyMode::Starved {
        grid = starve_occupancy(&w, grid, &machine)?;
    }
    let run = run_repeated(&w, &machine, grid, args.repeats, args.warmup, args.seed)?;
    let first = run.runs[0];
    let mut r = Report::new(&["metric", "value"]);
    let mut kv = |k: &str, v: Cell| r.push(vec![k.into(), v]);
    kv("pattern", args.pattern.as_str().into());
    kv("wait", wait.map_or("none", WaitKind::as_str).into());
    kv("tiles", Cell::Int(w.n_tiles as u64));
    kv("ai_flop_per_byte", Cell::num(microbench::arithmetic_intensity(args.iterations), 3));
    kv("blocks_per_sm", Cell::Int(u64::from(first.blocks_resident_per_sm)));
    kv("elapsed_cycles_mean", Cell::num(run.summary.mean, 1));
    kv("elapsed_cycles_stddev", Cell::num(run.summary.stddev, 1));
    kv("elapsed_us", Cell::num(run.summary.mean / machine.clock / 1e3, 3));
    kv("bytes_moved", Cell::Int(first.bytes_moved));
    kv("flops", Cell::Int(first.flops));
    kv("gflops", Cell::num(first.achieved_gflops, 2));
    kv("gbs", Cell::num(first.achieved_bw, 2));
    Ok(r)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<String> {
    let mut cfg = SweepConfig::load(&args.sweep)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let machine = MachineParams::resolve(&args.machine)?;
    let rows = microbench::speedup_table(&microbench::run_sweep(&cfg, &machine)?)?;
    let csv = microbench::sweep_csv(&rows)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            let errors = rows.iter().filter(|r| r.error.is_some()).count();
            Ok(format!("wrote {} rows ({errors} flagged) to {}\n", rows.len(), path.display()))
        }
        None => Ok(csv),
    }
}

pub fn compare_report(args: &CompareArgs) -> Result<Report> {
    let records = bench_ingest::load_results(&args.results)?;
    if args.baseline_variant {
        let mut keys: Vec<(String, String)> = records
            .iter()
            .filter(|r| args.device.as_ref().is_none_or(|d| &r.device == d))
            .filter(|r| args.benchmark.as_ref().is_none_or(|b| &r.benchmark == b))
            .map(|r| (r.device.clone(), r.benchmark.clone()))
            .collect();
        keys.sort();
        keys.dedup();
        if keys.is_empty() {
            bail!("no records match the requested device/benchmark");
        }
        let mut r = Report::new(&["device", "benchmark", "input", "variant", "speedup"]);
        for (device, benchmark) in keys {
            for (input, variants) in bench_ingest::strategy_comparison(&records, &device, &benchmark)? {
                for (variant, ratio) in variants {
                    r.push(vec![
                        device.as_str().into(),
                        benchmark.as_str().into(),
                        input.as_str().into(),
                        variant.into(),
                        Cell::num(ratio, 3),
                    ]);
                }
            }
        }
        return Ok(r);
    }
    let averaging = match args.averaging {
        Mean::Arithmetic => Averaging::Arithmetic,
        Mean::Geometric => Averaging::Geometric,
    };
    let summary = bench_ingest::generation_summary(&records, &args.order, averaging)?;
    let mut r = Report::new(&["from", "to", "benchmark", "speedup"]);
    for pair in &summary.pairs {
        let row = |name: String, v: f64| {
            vec![pair.from_device.as_str().into(), pair.to_device.as_str().into(), name.into(), Cell::num(v, 3)]
        };
        for (bench, ratio) in &pair.per_benchmark {
            r.push(row(bench.clone(), *ratio));
        }
        r.push(row("mean".into(), pair.mean));
        r.push(row("stddev".into(), pair.stddev));
    }
    Ok(r)
}
