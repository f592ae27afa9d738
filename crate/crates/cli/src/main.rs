use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aegisnet_core::config::{dump_config, parse_config, resolve_seed, ScenarioConfig, SEED_ENV};
use aegisnet_core::crypto::vectors;
use aegisnet_core::network::NodeId;
use aegisnet_core::sim::{exact_joules, Energy, MetricsRecord, RunOutput, Simulation};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "aegisnet", version, about = "Secure clustered sensor-network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario (or a seed sweep) and write metrics CSVs.
    Run(RunArgs),
    /// Write crypto test vectors.
    Vectors {
        #[arg(long, default_value = "vectors.tsv")]
        out: PathBuf,
    },
    /// Dump one node's key ring after some rounds.
    Keys(KeysArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scenario file; all defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Inclusive range, e.g. `1..10`.
    #[arg(long, value_parser = parse_seed_range)]
    seeds: Option<(u64, u64)>,
    /// Metrics CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    auth_log: Option<PathBuf>,
    #[arg(long)]
    dump_topology: Option<PathBuf>,
    /// Store-and-forward collection without in-network aggregation.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    rounds: Option<u64>,
    /// Print the fully-defaulted config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct KeysArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    node: u32,
    /// Show key bytes instead of redacting them.
    #[arg(long)]
    reveal: bool,
    #[arg(long, default_value_t = 1)]
    rounds: u64,
}

/// Usage and configuration problems exit 1; anything else exits 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn usage(e: impl Into<anyhow::Error>) -> Self {
        Failure::Usage(e.into())
    }
    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Failure::Runtime(e.into())
    }
}

fn parse_seed_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let a: u64 = a.trim().parse().map_err(|_| format!("bad start {a:?}"))?;
    let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| format!("bad end {b:?}"))?;
    if a > b {
        return Err(format!("empty range {s}"));
    }
    Ok((a, b))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Vectors { out } => cmd_vectors(&out),
        Command::Keys(args) => cmd_keys(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig, Failure> {
    let Some(path) = path else {
        return Ok(ScenarioConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(Failure::Usage)?;
    parse_config(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::Usage)
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

/// `dir/stem.ext` becomes `dir/stem_<tag>.ext`.
fn tagged(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{tag}"),
    };
    path.with_file_name(name)
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(Failure::Runtime)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::Runtime)
}

struct Outputs {
    metrics: PathBuf,
    trace: Option<PathBuf>,
    auth_log: Option<PathBuf>,
    topology: Option<PathBuf>,
}

impl Outputs {
    fn for_seed(&self, seed: u64) -> Outputs {
        let tag = format!("seed{seed}");
        Outputs {
            metrics: tagged(&self.metrics, &tag),
            trace: self.trace.as_deref().map(|p| tagged(p, &tag)),
            auth_log: self.auth_log.as_deref().map(|p| tagged(p, &tag)),
            topology: self.topology.as_deref().map(|p| tagged(p, &tag)),
        }
    }

    fn write(&self, out: &RunOutput) -> Result<(), Failure> {
        write(&self.metrics, &out.metrics_csv())?;
        if let Some(p) = &self.trace {
            write(p, &out.trace_text())?;
        }
        if let Some(p) = &self.auth_log {
            write(p, &out.auth_log_text())?;
        }
        if let Some(p) = &self.topology {
            write(p, &out.topology)?;
        }
        Ok(())
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.baseline {
        cfg.run.baseline = true;
    }
    if let Some(r) = args.rounds {
        cfg.run.rounds = r;
    }
    cfg.validate().map_err(Failure::usage)?;
    if args.print_config {
        print!("{}", dump_config(&cfg));
        return Ok(());
    }
    let outputs = Outputs {
        metrics: args
            .out
            .or_else(|| cfg.run.metrics.clone())
            .unwrap_or_else(|| PathBuf::from("metrics.csv")),
        trace: args.trace.or_else(|| cfg.run.trace.clone()),
        auth_log: args.auth_log.or_else(|| cfg.run.auth_log.clone()),
        topology: args.dump_topology.or_else(|| cfg.run.topology.clone()),
    };

    let Some((first, last)) = args.seeds else {
        let seed = resolve_seed(args.seed, cfg.run.seed, env_seed().as_deref()).map_err(Failure::usage)?;
        let out = run_one(&cfg, seed).map_err(Failure::Runtime)?;
        outputs.write(&out)?;
        eprintln!("seed {seed}: {} rounds -> {}", out.metrics.len(), outputs.metrics.display());
        return Ok(());
    };

    let seeds: Vec<u64> = (first..=last).collect();
    let results = sweep(&cfg, &seeds);
    let mut runs = Vec::with_capacity(seeds.len());
    for (seed, res) in seeds.iter().zip(results) {
        runs.push((*seed, res.map_err(Failure::Runtime)?));
    }
    for (seed, out) in &runs {
        outputs.for_seed(*seed).write(out)?;
    }
    let all: Vec<&[MetricsRecord]> = runs.iter().map(|(_, o)| o.metrics.as_slice()).collect();
    let agg_path = tagged(&outputs.metrics, "aggregate");
    write(&agg_path, &aggregate_csv(&all))?;
    eprintln!("{} seeds -> {}", runs.len(), agg_path.display());
    Ok(())
}

fn run_one(cfg: &ScenarioConfig, seed: u64) -> anyhow::Result<RunOutput> {
    Simulation::new(cfg, seed)
        .map(Simulation::run_to_end)
        .with_context(|| format!("seed {seed}"))
}

/// Runs seeds on scoped worker threads; results come back in seed order.
fn sweep(cfg: &ScenarioConfig, seeds: &[u64]) -> Vec<anyhow::Result<RunOutput>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len()).max(1);
    let mut slots: Vec<Option<anyhow::Result<RunOutput>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..seeds.len())
                        .step_by(workers)
                        .map(|i| (i, run_one(cfg, seeds[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.unwrap_or_else(|| Err(anyhow!("run missing")))).collect()
}

const AGGREGATE_HEADER: &str =
    "round,runs,alive,total_energy_j,sent,delivered,pdr,mean_delay_ms,bytes_tx,attack_attempts,attack_accepted";

/// Per-round means across runs. A round only counts runs that reached it;
/// pdr and delay average over the runs where they are defined.
fn aggregate_csv(runs: &[&[MetricsRecord]]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    let longest = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let fmt = |v: Option<f64>, prec: usize| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.prec$}"));
    for i in 0..longest {
        let rows: Vec<&MetricsRecord> = runs.iter().filter_map(|r| r.get(i)).collect();
        let n = rows.len() as f64;
        let avg = |f: &dyn Fn(&MetricsRecord) -> u64| rows.iter().map(|r| f(r) as f64).sum::<f64>() / n;
        let energy_fj: u128 = rows.iter().map(|r| u128::from(r.total_energy.femtojoules())).sum();
        let mean_energy = Energy::from_femtojoules((energy_fj / rows.len() as u128) as u64);
        let pdrs: Vec<f64> = rows.iter().filter_map(|r| r.pdr()).collect();
        let delays: Vec<f64> = rows.iter().filter_map(|r| r.mean_delay_ms()).collect();
        let _ = writeln!(
            out,
            "{},{},{:.3},{},{:.3},{:.3},{},{},{:.1},{:.3},{:.3}",
            rows[0].round,
            rows.len(),
            avg(&|r| r.alive),
            exact_joules(mean_energy),
            avg(&|r| r.sent),
            avg(&|r| r.delivered),
            fmt(mean(&pdrs), 6),
            fmt(mean(&delays), 3),
            avg(&|r| r.bytes_tx),
            avg(&|r| r.attack_attempts),
            avg(&|r| r.attack_accepted),
        );
    }
    out
}

fn cmd_vectors(out: &Path) -> Result<(), Failure> {
    let text = vectors::render();
    write(out, &text)?;
    eprintln!("{} records -> {}", text.lines().count(), out.display());
    Ok(())
}

fn cmd_keys(args: KeysArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.rounds == 0 {
        return Err(Failure::usage(anyhow!("--rounds must be at least 1")));
    }
    cfg.run.rounds = args.rounds;
    cfg.validate().map_err(Failure::usage)?;
    let node = NodeId(args.node);
    if args.node > cfg.network.nodes {
        return Err(Failure::usage(anyhow!("no node {node}; ids run 0..={}", cfg.network.nodes)));
    }
    let seed = resolve_seed(args.seed, cfg.run.seed, env_seed().as_deref()).map_err(Failure::usage)?;
    let mut sim = Simulation::new(&cfg, seed).map_err(Failure::runtime)?;
    while sim.step().is_some() {}
    println!("node={node} rounds={} seed={seed}", args.rounds);
    match sim.rings().get(&node) {
        Some(ring) if !ring.is_empty() => print!("{}", ring.dump(args.reveal)),
        _ => println!("(no links)"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seed_range("1..10"), Ok((1, 10)));
        assert_eq!(parse_seed_range("3..=3"), Ok((3, 3)));
        assert!(parse_seed_range("5..2").is_err());
        assert!(parse_seed_range("7").is_err());
    }

    #[test]
    fn tagged_paths() {
        assert_eq!(tagged(Path::new("out/m.csv"), "seed4"), PathBuf::from("out/m_seed4.csv"));
        assert_eq!(tagged(Path::new("trace"), "aggregate"), PathBuf::from("trace_aggregate"));
    }
}
