//! Operator entry point: run simulations, serve datasets, retrieve privately,
//! audit privacy, and emit rate reports.
//!
//! Every command is deterministic given its flags and seed. Flags may also be
//! supplied through a JSON config file (`--config`); explicit flags win.

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use privcomp::analysis;
use privcomp::client::{retrieve, RetrievalConfig, Transport};
use privcomp::gf::FieldContext;
use privcomp::model::{
    generate_datasets, generate_matrix, read_dataset_file, read_matrix_file, DatasetStore,
};
use privcomp::planner::Mutation;
use privcomp::privacy::{
    enumeration_audit, sampled_audit, structural_audit, AuditOutcome, PrivacyError,
    DEFAULT_ENUMERATION_BUDGET,
};
use privcomp::server::{serve, ServerEngine};
use privcomp::Matrix;

#[derive(Parser)]
#[command(
    name = "privcomp",
    about = "Private retrieval of linear combinations of replicated datasets at the optimal download rate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate data, run a full in-process retrieval, and report the rate.
    Demo(CommonArgs),
    /// Serve a dataset file over TCP using the binary wire format.
    Serve(CommonArgs),
    /// Retrieve one combination from running servers.
    Retrieve(CommonArgs),
    /// Run the privacy audits (structural, enumeration, statistical).
    Audit(CommonArgs),
    /// Print a plan's query tables (requires the identity randomizer).
    Table(CommonArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct CommonArgs {
    /// Number of servers.
    #[arg(long)]
    n: Option<usize>,
    /// Number of independent datasets.
    #[arg(long)]
    k: Option<usize>,
    /// Number of public combinations (messages).
    #[arg(long)]
    m: Option<usize>,
    /// Prime field modulus.
    #[arg(long)]
    p: Option<u64>,
    /// Which combination to retrieve (1-based).
    #[arg(long)]
    theta: Option<usize>,
    /// Master seed for data generation and query randomization.
    #[arg(long)]
    seed: Option<u64>,
    /// Transport: "inprocess" or "socket".
    #[arg(long)]
    transport: Option<String>,
    /// Server endpoints, comma-separated host:port (socket transport), or the
    /// bind address for `serve`.
    #[arg(long, value_delimiter = ',')]
    endpoints: Option<Vec<String>>,
    /// JSON config file supplying any of these flags; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report/transcript here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file (`serve`): header `K L p`, then K symbol rows.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Combination-matrix file: M rows of K entries.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Store length per dataset (for `retrieve` against live servers).
    #[arg(long)]
    length: Option<u64>,
    /// Run the default parameter grid instead of a single configuration.
    #[arg(long)]
    grid: bool,
    /// Disable the private permutation and signs (plan inspection only).
    #[arg(long)]
    identity_randomizer: bool,
    /// Statistical audit sample count.
    #[arg(long)]
    samples: Option<u64>,
    /// Negative control: audit a build that leaks one sign.
    #[arg(long)]
    mutant: bool,
}

/// File-backed counterpart of the flags; any present field fills in a flag
/// the user did not pass explicitly.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    n: Option<usize>,
    k: Option<usize>,
    m: Option<usize>,
    p: Option<u64>,
    theta: Option<usize>,
    seed: Option<u64>,
    transport: Option<String>,
    endpoints: Option<Vec<String>>,
    out: Option<PathBuf>,
    dataset: Option<PathBuf>,
    matrix: Option<PathBuf>,
    length: Option<u64>,
    grid: Option<bool>,
    identity_randomizer: Option<bool>,
    samples: Option<u64>,
    mutant: Option<bool>,
}

impl CommonArgs {
    fn merged(mut self) -> Result<CommonArgs> {
        let Some(path) = self.config.take() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file: FileConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        self.n = self.n.or(file.n);
        self.k = self.k.or(file.k);
        self.m = self.m.or(file.m);
        self.p = self.p.or(file.p);
        self.theta = self.theta.or(file.theta);
        self.seed = self.seed.or(file.seed);
        self.transport = self.transport.or(file.transport);
        self.endpoints = self.endpoints.or(file.endpoints);
        self.out = self.out.or(file.out);
        self.dataset = self.dataset.or(file.dataset);
        self.matrix = self.matrix.or(file.matrix);
        self.length = self.length.or(file.length);
        self.grid = self.grid || file.grid.unwrap_or(false);
        self.identity_randomizer =
            self.identity_randomizer || file.identity_randomizer.unwrap_or(false);
        self.samples = self.samples.or(file.samples);
        self.mutant = self.mutant || file.mutant.unwrap_or(false);
        Ok(self)
    }

    fn n(&self) -> usize {
        self.n.unwrap_or(2)
    }
    fn k(&self) -> usize {
        self.k.unwrap_or(2)
    }
    fn m(&self) -> usize {
        self.m.unwrap_or(4)
    }
    fn p(&self) -> u64 {
        self.p.unwrap_or(65537)
    }
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn validate_shape(&self) -> Result<()> {
        if self.k() == 0 || self.m() < self.k() {
            bail!("need M >= K >= 1, got M={}, K={}", self.m(), self.k());
        }
        if let Some(theta) = self.theta {
            if theta == 0 || theta > self.m() {
                bail!("theta must be in 1..={}, got {theta}", self.m());
            }
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Demo(args) => args.merged().and_then(cmd_demo),
        Cmd::Serve(args) => args.merged().and_then(cmd_serve),
        Cmd::Retrieve(args) => args.merged().and_then(cmd_retrieve),
        Cmd::Audit(args) => args.merged().and_then(cmd_audit),
        Cmd::Table(args) => args.merged().and_then(cmd_table),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_demo(args: CommonArgs) -> Result<()> {
    if args.grid {
        // N in {2,3}, K in 1..=3, M in K..=K+3: small enough for seconds,
        // wide enough to cover every level/compression shape.
        let mut reports = Vec::new();
        for n in [2usize, 3] {
            for k in 1..=3usize {
                for m in k..=k + 3 {
                    let sub = CommonArgs {
                        n: Some(n),
                        k: Some(k),
                        m: Some(m),
                        grid: false,
                        ..args.clone()
                    };
                    reports.push(demo_once(&sub)?);
                }
            }
        }
        if let Some(out) = &args.out {
            std::fs::write(out, serde_json::to_string_pretty(&reports)?)?;
        }
        println!("grid: {} configurations, all decoded correctly at capacity", reports.len());
        return Ok(());
    }
    let report = demo_once(&args)?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

/// One in-process retrieval over generated data; errors if the decoded
/// message differs from ground truth or the rate misses the optimum.
fn demo_once(args: &CommonArgs) -> Result<analysis::RateReport> {
    args.validate_shape()?;
    let (n, k, m) = (args.n(), args.k(), args.m());
    let ctx = FieldContext::new(args.p())?;
    let seed = args.seed();
    let raw = generate_matrix(seed, m, k, &ctx)?;
    let l_total = if n == 1 { 4 } else { (n as u64).pow(m as u32) };
    let store = generate_datasets(seed ^ 0x00da_7a5e, k, l_total, &ctx)?;
    let engines: Vec<Arc<ServerEngine>> = (0..n)
        .map(|_| Ok(Arc::new(ServerEngine::new(&raw, &store, n, ctx)?)))
        .collect::<Result<_>>()?;
    let transport = Transport::InProcess(engines);
    let cfg = RetrievalConfig {
        seed,
        identity_randomizer: args.identity_randomizer,
        ..Default::default()
    };
    let thetas: Vec<usize> = match args.theta {
        Some(t) => vec![t],
        None => (1..=m).collect(),
    };
    let mut last = None;
    for theta in thetas {
        let (got, transcript) = retrieve(&raw, theta, l_total, &ctx, &cfg, &transport)?;
        let expected = ground_truth(&raw, theta, &store, &ctx);
        if got != expected {
            bail!("decode mismatch for combination {theta} at N={n}, K={k}, M={m}");
        }
        let report = analysis::report(&transcript)?;
        if n > 1 && !report.optimal {
            bail!(
                "rate {}/{} misses the optimum {}/{} at N={n}, K={k}, M={m}",
                report.measured_num,
                report.measured_den,
                report.capacity_num,
                report.capacity_den
            );
        }
        println!(
            "N={n} K={k} M={m} combination {theta}: decode OK, rate {}/{}{}",
            report.measured_num,
            report.measured_den,
            if report.optimal { " (optimal)" } else { "" }
        );
        last = Some(report);
    }
    let report = last.expect("at least one retrieval ran");
    print!("{}", report.render_text());
    Ok(report)
}

fn ground_truth(raw: &Matrix, theta: usize, store: &DatasetStore, ctx: &FieldContext) -> Vec<u64> {
    (1..=store.symbols_per_message())
        .map(|pos| {
            (1..=store.dataset_count()).fold(0u64, |acc, k| {
                ctx.add(acc, ctx.mul(raw.get(theta - 1, k - 1), store.symbol(k, pos)))
            })
        })
        .collect()
}

fn cmd_serve(args: CommonArgs) -> Result<()> {
    let dataset = args
        .dataset
        .as_ref()
        .context("serve requires --dataset")?;
    let matrix = args.matrix.as_ref().context("serve requires --matrix")?;
    let bind = args
        .endpoints
        .as_ref()
        .and_then(|e| e.first())
        .context("serve requires --endpoints with the bind address")?;
    let (store, ctx) = read_dataset_file(dataset)
        .with_context(|| format!("reading dataset {}", dataset.display()))?;
    let raw = read_matrix_file(matrix)
        .with_context(|| format!("reading matrix {}", matrix.display()))?;
    let engine = Arc::new(ServerEngine::new(&raw, &store, args.n(), ctx)?);
    let listener = TcpListener::bind(bind).with_context(|| format!("binding {bind}"))?;
    println!("listening on {}", listener.local_addr()?);
    serve(engine, listener)?;
    Ok(())
}

fn cmd_retrieve(args: CommonArgs) -> Result<()> {
    let matrix = args.matrix.as_ref().context("retrieve requires --matrix")?;
    let theta = args.theta.context("retrieve requires --theta")?;
    let endpoints = args
        .endpoints
        .clone()
        .context("retrieve requires --endpoints")?;
    let l_total = args.length.context("retrieve requires --length")?;
    let raw = read_matrix_file(matrix)?;
    let ctx = FieldContext::new(args.p())?;
    let transport = Transport::Socket(endpoints);
    let cfg = RetrievalConfig {
        seed: args.seed(),
        identity_randomizer: args.identity_randomizer,
        ..Default::default()
    };
    let (values, transcript) = retrieve(&raw, theta, l_total, &ctx, &cfg, &transport)?;
    let report = analysis::report(&transcript)?;
    print!("{}", report.render_text());
    if let Some(out) = &args.out {
        #[derive(serde::Serialize)]
        struct Output<'a> {
            transcript: &'a privcomp::client::Transcript,
            report: &'a analysis::RateReport,
            values: &'a [u64],
        }
        std::fs::write(
            out,
            serde_json::to_string_pretty(&Output {
                transcript: &transcript,
                report: &report,
                values: &values,
            })?,
        )?;
    } else {
        let rendered: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        println!("values: {}", rendered.join(" "));
    }
    Ok(())
}

fn cmd_audit(args: CommonArgs) -> Result<()> {
    args.validate_shape()?;
    let (n, m, p) = (args.n(), args.m(), args.p());
    let samples = args.samples.unwrap_or(10_000);
    let mutation = if args.mutant {
        Mutation::LeakSign
    } else {
        Mutation::None
    };
    let mut failed = false;

    match structural_audit(n, m, p) {
        Ok(()) => println!("structural audit (N={n}, M={m}): PASS"),
        Err(e) => {
            failed = true;
            println!("structural audit (N={n}, M={m}): FAIL ({e})");
        }
    }

    match enumeration_audit(n, m, p, DEFAULT_ENUMERATION_BUDGET) {
        Ok(()) => println!("enumeration audit: PASS (all randomizer views compared)"),
        Err(PrivacyError::BudgetExceeded { required, budget }) => {
            println!("enumeration audit: SKIPPED ({required} views exceed budget {budget})")
        }
        Err(e) => {
            failed = true;
            println!("enumeration audit: FAIL ({e})");
        }
    }

    for theta in 2..=m {
        match sampled_audit(n, m, p, 1, theta, samples, mutation, args.seed())? {
            AuditOutcome::Pass => {
                println!("sampled audit 1 vs {theta} ({samples} samples): PASS")
            }
            AuditOutcome::Inconclusive => {
                println!("sampled audit 1 vs {theta}: INCONCLUSIVE (no samples)")
            }
            AuditOutcome::Reject {
                statistic,
                threshold,
                detail,
            } => {
                failed = true;
                println!(
                    "sampled audit 1 vs {theta}: REJECT ({detail}; statistic {statistic:.2} > {threshold:.2})"
                );
            }
        }
    }

    if failed {
        bail!("privacy audit failed");
    }
    Ok(())
}

fn cmd_table(args: CommonArgs) -> Result<()> {
    if !args.identity_randomizer {
        bail!("tables are a presentation of the unrandomized plan; pass --identity-randomizer");
    }
    args.validate_shape()?;
    let (n, m, p) = (args.n(), args.m(), args.p());
    let theta = args.theta.unwrap_or(1);
    let plan = privcomp::client::cached_plan(theta, n, m, p)?;
    let text = if n == 2 {
        plan.render_sign_table()
    } else {
        plan.render_tree()
    };
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, text)?;
    }
    Ok(())
}
