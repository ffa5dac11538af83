//! `privstream` command-line driver.
//!
//! Exit codes: 0 success, 1 a check of the workload failed, 2 usage error.

mod settings;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use privstream::ids::{PartyId, StreamId};
use privstream::policy::{parse_query, parse_schema, QueryPlanner, StreamAnnotation, StreamSchema};
use privstream::ring_crypto::PrfKind;
use privstream::secure_agg::bench::{bench_party, bench_totals, resolve_protocol, BenchConfig, BenchRound, ProtocolChoice};
use privstream::secure_agg::{optimize_b, SecAggError, PRF_OUTPUT_BITS};
use privstream::sim::{default_annotation, run_scenario, scenario_presets, SimReport};
use thiserror::Error;

use settings::{overlay_sim, Settings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Failed(String),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) | CliError::Io(_) => 1,
        }
    }
}

fn failed<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Failed(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "privstream", version, about = "Encrypted stream transformations: optimizer, benchmarks, planner, simulation")]
struct Cli {
    /// TOML settings file; flags and PRIVSTREAM_* variables take precedence.
    #[arg(long, global = true, env = "PRIVSTREAM_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Choose the epoch segment width b for N controllers.
    Optimize(OptimizeArgs),
    /// Per-round PRF and addition counts of one controller.
    BenchSecagg(BenchArgs),
    /// Run a simulated deployment and compare it with the plaintext shadow.
    Run(RunArgs),
    /// Plan a query against a schema and annotations.
    Plan(PlanArgs),
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[arg(long, env = "PRIVSTREAM_PARTIES")]
    parties: Option<u64>,
    /// Fraction of colluding controllers.
    #[arg(long, env = "PRIVSTREAM_ALPHA")]
    alpha: Option<f64>,
    /// Allowed failure probability per epoch.
    #[arg(long, env = "PRIVSTREAM_DELTA")]
    delta: Option<f64>,
    #[arg(long, env = "PRIVSTREAM_PRF_BITS")]
    prf_bits: Option<u32>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, env = "PRIVSTREAM_PARTIES")]
    parties: Option<u64>,
    #[arg(long, env = "PRIVSTREAM_ROUNDS")]
    rounds: Option<u64>,
    /// clique, dream or zeph.
    #[arg(long, env = "PRIVSTREAM_PROTOCOL")]
    protocol: Option<String>,
    /// Per-round probability that a peer is absent.
    #[arg(long, env = "PRIVSTREAM_DROPOUT")]
    dropout: Option<f64>,
    #[arg(long, env = "PRIVSTREAM_ALPHA")]
    alpha: Option<f64>,
    #[arg(long, env = "PRIVSTREAM_DELTA")]
    delta: Option<f64>,
    /// aes128 or mix.
    #[arg(long, env = "PRIVSTREAM_PRF")]
    prf: Option<String>,
    #[arg(long, env = "PRIVSTREAM_SEED")]
    seed: Option<u64>,
    /// CSV destination; stdout if absent.
    #[arg(long, env = "PRIVSTREAM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// fitness, web, car or custom.
    #[arg(long, env = "PRIVSTREAM_SCENARIO")]
    scenario: Option<String>,
    #[arg(long, env = "PRIVSTREAM_PRODUCERS")]
    producers: Option<usize>,
    #[arg(long, env = "PRIVSTREAM_CONTROLLERS")]
    controllers: Option<usize>,
    #[arg(long, env = "PRIVSTREAM_WINDOWS")]
    windows: Option<u64>,
    #[arg(long, env = "PRIVSTREAM_PROTOCOL")]
    protocol: Option<ProtocolChoice>,
    /// Per-window probability that a controller misses the heartbeat.
    #[arg(long, env = "PRIVSTREAM_DROPOUT")]
    dropout: Option<f64>,
    #[arg(long, env = "PRIVSTREAM_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "PRIVSTREAM_PARALLEL")]
    parallel: Option<bool>,
    /// Writes results.csv, summary.json and windows.json here; without it
    /// the CSV goes to stdout and the summary to stderr.
    #[arg(long, env = "PRIVSTREAM_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Exit 0 even if some windows fail; shadow mismatches still fail.
    #[arg(long, env = "PRIVSTREAM_ALLOW_FAILURES")]
    allow_failures: Option<bool>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long, env = "PRIVSTREAM_SCHEMA")]
    schema: Option<PathBuf>,
    #[arg(long, env = "PRIVSTREAM_QUERY")]
    query: Option<PathBuf>,
    /// YAML list of stream annotations.
    #[arg(long, env = "PRIVSTREAM_ANNOTATIONS")]
    annotations: Option<PathBuf>,
    /// Without annotations, generate this many streams.
    #[arg(long, env = "PRIVSTREAM_STREAMS")]
    streams: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Optimize(a) => optimize(a, &settings),
        Command::BenchSecagg(a) => bench(a, &settings),
        Command::Run(a) => run(a, &settings),
        Command::Plan(a) => plan(a, &settings),
    }
}

/// Prints a line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn optimize(a: OptimizeArgs, s: &Settings) -> Result<(), CliError> {
    let f = &s.optimize;
    let parties = required(a.parties.or(f.parties), "parties")?;
    let alpha = a.alpha.or(f.alpha).unwrap_or(0.5);
    let delta = a.delta.or(f.delta).unwrap_or(1e-7);
    let prf_bits = a.prf_bits.or(f.prf_bits).unwrap_or(PRF_OUTPUT_BITS);
    match optimize_b(parties, alpha, delta, prf_bits) {
        Ok(r) => {
            emit(&serde_json::to_string_pretty(&r).map_err(failed)?)
        }
        Err(e @ SecAggError::Infeasible { .. }) => Err(failed(e)),
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn bench(a: BenchArgs, s: &Settings) -> Result<(), CliError> {
    let f = &s.bench_secagg;
    let parties = required(a.parties.or(f.parties), "parties")?;
    let rounds = required(a.rounds.or(f.rounds), "rounds")?;
    let choice: ProtocolChoice = a
        .protocol
        .or(f.protocol.clone())
        .unwrap_or_else(|| "zeph".into())
        .parse()
        .map_err(CliError::Usage)?;
    let prf: PrfKind = a
        .prf
        .or(f.prf.clone())
        .unwrap_or_else(|| "aes128".into())
        .parse()
        .map_err(CliError::Usage)?;
    let alpha = a.alpha.or(f.alpha).unwrap_or(0.5);
    let delta = a.delta.or(f.delta).unwrap_or(1e-7);
    let (protocol, b) = resolve_protocol(choice, parties, alpha, delta).map_err(failed)?;
    let cfg = BenchConfig {
        parties,
        rounds,
        protocol,
        dropout: a.dropout.or(f.dropout).unwrap_or(0.0),
        seed: a.seed.or(f.seed).or(s.seed).unwrap_or(0),
        prf,
    };
    let per_round = bench_party(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;

    let out: Box<dyn Write> = match a.out.or(f.out.as_ref().map(|p| s.resolve(p))) {
        Some(p) => Box::new(File::create(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = io::BufWriter::new(out);
    writeln!(w, "{}", BenchRound::CSV_COLUMNS.join(","))?;
    for r in &per_round {
        writeln!(w, "{},{},{},{}", r.round, r.members, r.prf_calls, r.additions)?;
    }
    w.flush()?;
    let t = bench_totals(&per_round);
    eprintln!(
        "{choice} parties={parties} rounds={rounds} b={} prf_calls={} additions={}",
        b.map_or("-".into(), |b| b.to_string()),
        t.prf_calls,
        t.additions
    );
    Ok(())
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_schema(path: &Path) -> Result<StreamSchema, CliError> {
    parse_schema(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn run(a: RunArgs, s: &Settings) -> Result<(), CliError> {
    let f = &s.run;
    let name = a.scenario.or(f.scenario.clone()).unwrap_or_else(|| "fitness".into());
    let mut scenario = if name == "custom" {
        let schema_path = s.resolve(&required(f.schema.clone(), "config with [run] schema")?);
        let schema = load_schema(&schema_path)?;
        if f.queries.is_empty() {
            return Err(CliError::Usage("the custom scenario needs [run] queries".into()));
        }
        let mut queries = Vec::new();
        for q in &f.queries {
            let p = s.resolve(q);
            queries.push(parse_query(&read(&p)?, &schema).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?);
        }
        privstream::sim::Scenario {
            name: "custom".into(),
            schema,
            queries,
            config: Default::default(),
        }
    } else {
        scenario_presets(&name).map_err(|e| CliError::Usage(e.to_string()))?
    };
    if let Some(t) = &f.sim {
        scenario.config = overlay_sim(&scenario.config, t)?;
    }
    let c = &mut scenario.config;
    if let Some(seed) = a.seed.or(s.seed) {
        c.seed = seed;
    }
    c.producers = a.producers.unwrap_or(c.producers);
    c.controllers = a.controllers.unwrap_or(c.controllers);
    c.windows = a.windows.unwrap_or(c.windows);
    c.protocol = a.protocol.unwrap_or(c.protocol);
    c.dropout = a.dropout.unwrap_or(c.dropout);
    c.parallel = a.parallel.unwrap_or(c.parallel);

    let report = run_scenario(&scenario.config, &scenario.schema, &scenario.queries).map_err(|e| match e {
        privstream::sim::SimError::InvalidConfig(_) | privstream::sim::SimError::UnknownPreset(_) => {
            CliError::Usage(e.to_string())
        }
        other => failed(other),
    })?;
    write_report(&report, a.out_dir.or(f.out_dir.as_ref().map(|p| s.resolve(p))).as_deref())?;

    let allow_failures = a.allow_failures.or(f.allow_failures).unwrap_or(false);
    if !report.all_shadow_equal() {
        return Err(CliError::Failed("encrypted output differs from the plaintext shadow".into()));
    }
    let ok = report.succeeded();
    if ok < report.windows.len() && !allow_failures {
        return Err(CliError::Failed(format!("{} of {} windows failed", report.windows.len() - ok, report.windows.len())));
    }
    Ok(())
}

fn write_report(report: &SimReport, out_dir: Option<&Path>) -> Result<(), CliError> {
    let out = |e: privstream::sim::SimError| CliError::Failed(e.to_string());
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            report.write_csv(File::create(dir.join("results.csv"))?).map_err(out)?;
            report.write_summary_json(File::create(dir.join("summary.json"))?).map_err(out)?;
            report.write_results_json(File::create(dir.join("windows.json"))?).map_err(out)?;
            let sum = report.summary();
            emit(&format!(
                "{}: {}/{} windows succeeded, shadow_equal={}, overhead {:.2}x, results in {}",
                sum.scenario,
                sum.succeeded,
                sum.windows,
                sum.shadow_equal,
                sum.mean_overhead_factor,
                dir.display()
            ))?;
        }
        None => {
            report.write_csv(io::stdout().lock()).map_err(out)?;
            report.write_summary_json(io::stderr().lock()).map_err(out)?;
            eprintln!();
        }
    }
    Ok(())
}

fn plan(a: PlanArgs, s: &Settings) -> Result<(), CliError> {
    let f = &s.plan;
    let schema = load_schema(&s.resolve(&required(a.schema.or(f.schema.clone()), "schema")?))?;
    let qpath = s.resolve(&required(a.query.or(f.query.clone()), "query")?);
    let query = parse_query(&read(&qpath)?, &schema).map_err(|e| CliError::Usage(format!("{}: {e}", qpath.display())))?;
    let annotations: Vec<StreamAnnotation> = match a.annotations.or(f.annotations.clone()) {
        Some(p) => {
            let p = s.resolve(&p);
            let anns: Vec<StreamAnnotation> =
                serde_yaml::from_str(&read(&p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            for ann in &anns {
                ann.validate(&schema).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            anns
        }
        None => {
            let n = a.streams.or(f.streams).unwrap_or(100);
            (0..n)
                .map(|i| {
                    let owner = PartyId::from_public_key(&i.to_le_bytes());
                    default_annotation(&schema, std::slice::from_ref(&query), StreamId::new(format!("stream-{i:05}")), owner)
                })
                .collect()
        }
    };
    let plans = QueryPlanner::default().plan_query(&query, &schema, &annotations, 0).map_err(failed)?;
    let summary: Vec<BTreeMap<&str, serde_json::Value>> = plans
        .iter()
        .map(|p| {
            BTreeMap::from([
                ("plan", serde_json::to_value(p).unwrap_or_default()),
                ("population", p.population().into()),
            ])
        })
        .collect();
    emit(&serde_json::to_string_pretty(&summary).map_err(failed)?)
}
