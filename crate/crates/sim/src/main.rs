use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abcast_core::tcrypto::KeySet;
use abcast_sim::harness::{self, RunResult, CSV_HEADER};
use abcast_sim::scenario::{default_fairness_debt, Faults, Policy, RunSpec, ScenarioError, Stop, Workload};
use abcast_sim::trace::Trace;
use abcast_sim::{checker, simnet};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_VIOLATION: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "abcast", version, about = "Simulate, check and measure the atomic broadcast protocol")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more seeds of a single configuration.
    Run(RunArgs),
    /// Run the cross product of several configurations.
    Sweep(SweepArgs),
    /// Re-verify the safety properties of stored traces.
    CheckTrace { traces: Vec<PathBuf> },
    /// Re-run stored traces from their manifests and compare digests.
    Replay { traces: Vec<PathBuf> },
    /// Write dealt key material for a configuration.
    Dealer {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        f: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 250)]
    tx_size: usize,
    /// single:COUNT, rate:EVERY:COUNT or full:OUTSTANDING:BATCHES.
    #[arg(long, default_value = "full:1:4")]
    workload: String,
    /// Comma-separated seeds or a range A..B.
    #[arg(long, alias = "seed", default_value = "0")]
    seeds: String,
    /// Step cap. The run stops earlier once quiescent unless --exact-steps.
    #[arg(long, default_value_t = 2_000_000)]
    steps: u64,
    #[arg(long)]
    exact_steps: bool,
    #[arg(long)]
    fairness_debt: Option<u64>,
    /// Defaults to $ABCAST_OUT_DIR, then ./out.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Do not write trace files.
    #[arg(long)]
    no_trace: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long)]
    f: Option<usize>,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// fair, fifo or adversarial[:FRACTION].
    #[arg(long, default_value = "fair")]
    policy: String,
    /// none, KIND, KIND:COUNT or KIND@I,J with KIND one of crash, silent,
    /// invalid, equivocator, fuzzer.
    #[arg(long, default_value = "none")]
    faults: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "4,7,10,13")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    batch_size: Vec<usize>,
    #[arg(long, value_delimiter = ';', default_value = "fair")]
    policy: Vec<String>,
    #[arg(long, value_delimiter = ';', default_value = "none")]
    faults: Vec<String>,
    #[command(flatten)]
    common: Common,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, ScenarioError> {
    let bad = || ScenarioError::Parse(format!("bad seeds {s:?}"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn build(n: usize, f: Option<usize>, b: usize, policy: &str, faults: &str, c: &Common) -> Result<Vec<RunSpec>, ScenarioError> {
    let f = f.unwrap_or(n.saturating_sub(1) / 3);
    let policy: Policy = policy.parse()?;
    let faults = Faults::parse(faults, n, f)?;
    let workload: Workload = c.workload.parse()?;
    let stop = if c.exact_steps { Stop::Steps { cap: c.steps } } else { Stop::Quiescence { cap: c.steps } };
    let specs: Vec<RunSpec> = parse_seeds(&c.seeds)?
        .into_iter()
        .map(|seed| RunSpec {
            n,
            f,
            batch_size: b,
            tx_size: c.tx_size,
            seed,
            policy: policy.clone(),
            faults: faults.clone(),
            workload: workload.clone(),
            stop,
            fairness_debt: c.fairness_debt.unwrap_or_else(|| default_fairness_debt(n)),
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

fn out_dir(c: &Common) -> PathBuf {
    c.out_dir.clone().or_else(|| std::env::var_os("ABCAST_OUT_DIR").map(PathBuf::from)).unwrap_or_else(|| "out".into())
}

fn stem(s: &RunSpec) -> String {
    let clean = |x: String| x.replace([':', ',', '@', '.'], "-");
    format!(
        "n{}-b{}-{}-{}-{}-s{}",
        s.n,
        s.batch_size,
        clean(s.policy.name()),
        clean(s.faults.name()),
        clean(s.workload.name()),
        s.seed
    )
}

fn execute(specs: Vec<RunSpec>, c: &Common, csv_name: &str) -> Result<bool, String> {
    let dir = out_dir(c);
    fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let write_trace = !c.no_trace;
    let format = c.format;
    let results = harness::run_many_summarized(&specs, |r: RunResult| {
        let path = dir.join(stem(&r.spec));
        let saved = if write_trace { r.trace.save(&path.with_extension("trace")).map_err(|e| e.to_string()) } else { Ok(()) };
        let json = matches!(format, Format::Json)
            .then(|| fs::write(path.with_extension("json"), serde_json::to_string_pretty(&r.to_json()).expect("json")));
        let row = harness::csv_row(&r);
        let line = format!(
            "{}: quiescent={} check={} sigma_mean={} messages_per_batch={} goodput={:.2} digest={}",
            r.spec,
            r.trace.outcome.quiescent,
            if r.report.ok() { "ok".to_string() } else { format!("{} violation(s)", r.report.total) },
            r.metrics.sigma_mean.map_or("-".into(), |x| format!("{x:.3}")),
            r.metrics.messages_per_batch.map_or("-".into(), |x| format!("{x:.1}")),
            r.metrics.goodput,
            r.trace.digest.to_hex()
        );
        (saved, json.map(|j| j.map_err(|e| e.to_string())), row, line, r.report.ok(), r.report.to_string())
    });
    let mut all_ok = true;
    let mut rows = Vec::new();
    for r in results {
        let (saved, json, row, line, ok, report) = r.map_err(|e| e.to_string())?;
        saved?;
        if let Some(j) = json {
            j?;
        }
        println!("{line}");
        if !ok {
            eprint!("{report}");
            all_ok = false;
        }
        rows.push(row);
    }
    if matches!(c.format, Format::Csv) {
        rows.sort();
        let mut body = String::from(CSV_HEADER);
        body.push('\n');
        for r in rows {
            body.push_str(&r);
            body.push('\n');
        }
        let path = dir.join(csv_name);
        fs::write(&path, body).map_err(|e| format!("{}: {e}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(all_ok)
}

fn load(path: &Path) -> Result<Trace, String> {
    Trace::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config_error = |e: String| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG)
    };
    match cli.command {
        Command::Run(a) => {
            let specs = match build(a.n, a.f, a.batch_size, &a.policy, &a.faults, &a.common) {
                Ok(s) => s,
                Err(e) => return config_error(e.to_string()),
            };
            match execute(specs, &a.common, "run.csv") {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(EXIT_VIOLATION),
                Err(e) => config_error(e),
            }
        }
        Command::Sweep(a) => {
            let mut specs = Vec::new();
            for &n in &a.n {
                for &b in &a.batch_size {
                    for p in &a.policy {
                        for fl in &a.faults {
                            match build(n, None, b, p, fl, &a.common) {
                                Ok(s) => specs.extend(s),
                                Err(e) => return config_error(e.to_string()),
                            }
                        }
                    }
                }
            }
            match execute(specs, &a.common, "sweep.csv") {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(EXIT_VIOLATION),
                Err(e) => config_error(e),
            }
        }
        Command::CheckTrace { traces } => {
            let mut worst = ExitCode::SUCCESS;
            for p in &traces {
                match load(p) {
                    Ok(t) => {
                        let r = checker::check(&t);
                        println!("{}: {r}", p.display());
                        if !r.ok() {
                            worst = ExitCode::from(EXIT_VIOLATION);
                        }
                    }
                    Err(e) => return config_error(e),
                }
            }
            worst
        }
        Command::Replay { traces } => {
            let mut worst = ExitCode::SUCCESS;
            for p in &traces {
                let t = match load(p) {
                    Ok(t) => t,
                    Err(e) => return config_error(e),
                };
                let again = match simnet::run(&t.manifest) {
                    Ok(x) => x,
                    Err(e) => return config_error(e.to_string()),
                };
                let matches = again.digest == t.digest && again.digest == t.recompute_digest();
                println!(
                    "{}: {} (stored {}, replayed {})",
                    p.display(),
                    if matches { "match" } else { "MISMATCH" },
                    t.digest.to_hex(),
                    again.digest.to_hex()
                );
                if !matches {
                    worst = ExitCode::from(EXIT_MISMATCH);
                }
            }
            worst
        }
        Command::Dealer { n, f, seed, out } => {
            let f = f.unwrap_or(n.saturating_sub(1) / 3);
            let cfg = match abcast_core::Config::new(n, f, 1, 1) {
                Ok(c) => c,
                Err(e) => return config_error(e.to_string()),
            };
            let keys = match KeySet::for_config(&cfg, seed) {
                Ok(k) => k,
                Err(e) => return config_error(e.to_string()),
            };
            let out = out.unwrap_or_else(|| PathBuf::from(format!("keys-n{n}-f{f}-s{seed}.bin")));
            if let Err(e) = fs::write(&out, keys.to_bytes()) {
                return config_error(format!("{}: {e}", out.display()));
            }
            println!(
                "wrote {} (broadcast threshold {}, coin threshold {})",
                out.display(),
                cfg.vcbc_threshold(),
                cfg.coin_threshold()
            );
            ExitCode::SUCCESS
        }
    }
}
