//! Command-line front end: run simulations, make one-shot allocation
//! decisions, score hypothetical allocations, fit the bandwidth model,
//! generate workloads, and summarize logs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};

use patalloc::appgraph::{default_mix, generate_jobs, parse_jobs, render_jobs, AppPattern};
use patalloc::matcher::{link_census, Match};
use patalloc::policies::{AllocationDecision, DecideOptions};
use patalloc::scoring::{aggregated_bw, fit_effbw_model, parse_samples, preserved_bw, EffBwModel};
use patalloc::simulator::{
    parse_log, render_log, run_simulation, summarize_log, GroupBy, SimConfig,
};
use patalloc::topology::{AllocationState, DeviceId, HardwareGraph};
use patalloc::PatternShape;
use patalloc::Policy;

#[derive(Parser)]
#[command(
    name = "patalloc",
    version,
    about = "Topology-aware multi-accelerator allocation and scheduling simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a job file against a topology under one policy, writing a log
    Simulate(SimulateArgs),
    /// Make a one-shot allocation decision and print all three scores
    Allocate(AllocateArgs),
    /// Score a hypothetical allocation of explicit devices
    Score(ScoreArgs),
    /// Fit the effective-bandwidth model from a measurement file
    Fit(FitArgs),
    /// Generate a seeded synthetic job file
    GenJobs(GenJobsArgs),
    /// Summarize a simulation log
    Report(ReportArgs),
    /// Inspect or serialize a topology
    Topo(TopoArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Builtin topology name or path to a topology file
    #[arg(long)]
    topology: String,
    /// Allocation policy: baseline | topo | greedy | preserve
    #[arg(long)]
    policy: Policy,
    /// Job file to replay
    #[arg(long)]
    jobs: PathBuf,
    /// Log file to write
    #[arg(long)]
    out: PathBuf,
    /// Model file; the builtin coefficient table when omitted
    #[arg(long)]
    model: Option<PathBuf>,
    /// Worker threads for match scoring (results identical for any value)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    topology: String,
    #[arg(long)]
    policy: Policy,
    /// Number of GPUs the job requests
    #[arg(long)]
    gpus: u16,
    /// Communication shape: ring | tree | ringtree | full
    #[arg(long)]
    shape: PatternShape,
    /// Whether the job is bandwidth sensitive
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    sensitive: bool,
    /// Devices already claimed, as +-joined ids (e.g. 1+2+5)
    #[arg(long)]
    busy: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    topology: String,
    /// Devices of the hypothetical allocation, as +-joined ids
    #[arg(long)]
    devices: String,
    #[arg(long)]
    shape: PatternShape,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Measurement file: rows `x,y,z,measured_effbw_gbps`
    #[arg(long)]
    samples: PathBuf,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenJobsArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 5)]
    max_gpus: u16,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    log: PathBuf,
    /// Grouping: all | network | gpus | sensitive
    #[arg(long, default_value = "all")]
    group_by: GroupBy,
    /// Also write the summary as TOML
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TopoArgs {
    /// Builtin topology name or path to a topology file
    #[arg(long)]
    name: String,
    /// Serialize to stdout instead of printing the inventory
    #[arg(long)]
    dump: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if err.use_stderr() => {
            let _ = err.print();
            return ExitCode::from(1);
        }
        Err(help_or_version) => {
            let _ = help_or_version.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => simulate(args),
        Command::Allocate(args) => allocate(args),
        Command::Score(args) => score(args),
        Command::Fit(args) => fit(args),
        Command::GenJobs(args) => gen_jobs(args),
        Command::Report(args) => report(args),
        Command::Topo(args) => topo(args),
    }
}

/// Resolve a builtin name first, then fall back to reading a file.
fn load_topology(spec: &str) -> Result<HardwareGraph> {
    if HardwareGraph::builtin_names().contains(&spec) {
        return Ok(HardwareGraph::builtin(spec)?);
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!(
            "`{spec}` is neither a builtin topology ({}) nor an existing file",
            HardwareGraph::builtin_names().join(", ")
        );
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    HardwareGraph::from_toml_str(&text).with_context(|| format!("parsing {spec}"))
}

fn load_model(path: Option<&Path>) -> Result<EffBwModel> {
    match path {
        None => Ok(EffBwModel::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(EffBwModel::from_toml_str(&text)
                .with_context(|| format!("parsing {}", p.display()))?)
        }
    }
}

fn parse_device_list(token: &str) -> Result<Vec<DeviceId>> {
    token
        .split('+')
        .map(|part| {
            part.parse::<DeviceId>()
                .with_context(|| format!("invalid device id `{part}` in `{token}`"))
        })
        .collect()
}

/// Write via a temp file in the same directory so failures never leave a
/// partial output behind.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn print_decision(decision: &AllocationDecision) {
    let devices: Vec<String> = decision.devices.iter().map(|d| d.to_string()).collect();
    println!("policy        {}", decision.policy);
    println!("devices       {}", devices.join("+"));
    println!(
        "census        x={} y={} z={}",
        decision.census.double_nvlink, decision.census.single_nvlink, decision.census.pcie
    );
    println!("agg_bw        {:.3}", decision.agg_bw);
    print!("pred_effbw    {:.3}", decision.predicted_eff_bw);
    if decision.predicted_eff_bw < 0.0 {
        print!("  (negative: model extrapolation, ranking only)");
    }
    println!();
    println!("preserved_bw  {:.3}", decision.preserved_bw);
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let graph = load_topology(&args.topology)?;
    let jobs_text = fs::read_to_string(&args.jobs)
        .with_context(|| format!("reading {}", args.jobs.display()))?;
    let jobs = parse_jobs(&jobs_text)?;
    if jobs.is_empty() {
        bail!("job file {} contains no jobs", args.jobs.display());
    }
    let mut config = SimConfig::new(args.policy, load_model(args.model.as_deref())?);
    config.scoring_threads = args.threads;
    let records = run_simulation(&graph, &jobs, &config)?;
    write_atomic(&args.out, &render_log(&records))?;
    println!(
        "simulated {} jobs on {} under {}; log written to {}",
        records.len(),
        graph.name(),
        args.policy,
        args.out.display()
    );
    let summary = summarize_log(&records, GroupBy::All)?;
    print!("{}", summary.render_table());
    Ok(())
}

fn allocate(args: AllocateArgs) -> Result<()> {
    let graph = load_topology(&args.topology)?;
    let mut state = AllocationState::new(graph);
    if let Some(busy) = &args.busy {
        state.allocate(&parse_device_list(busy)?)?;
    }
    let model = load_model(args.model.as_deref())?;
    let opts = DecideOptions {
        scoring_threads: args.threads,
        ..DecideOptions::default()
    };
    let job = adhoc_job(&args);
    match args.policy.decide(&state, &job, &model, &opts)? {
        Some(d) => {
            print_decision(&d);
            Ok(())
        }
        None => bail!(
            "no capacity: {} free devices cannot host a {}-GPU job",
            state.free_count(),
            args.gpus
        ),
    }
}

fn adhoc_job(args: &AllocateArgs) -> patalloc::JobSpec {
    patalloc::JobSpec {
        job_id: "adhoc".into(),
        gpu_count: args.gpus,
        shape: args.shape,
        bw_sensitive: args.sensitive,
        duration_s: 1.0,
        network: "adhoc".into(),
        arrival_s: 0.0,
    }
}

fn score(args: ScoreArgs) -> Result<()> {
    let graph = load_topology(&args.topology)?;
    let devices = parse_device_list(&args.devices)?;
    if devices.is_empty() {
        bail!("device list is empty");
    }
    let model = load_model(args.model.as_deref())?;
    let pattern = AppPattern::for_job(args.shape, devices.len() as u16)?;
    // Pattern vertices map onto the given devices in ascending id order.
    let mut sorted = devices;
    sorted.sort_unstable();
    let m = Match::from_vertex_map(&pattern, sorted)?;
    let state = AllocationState::new(graph.clone());
    let census = link_census(&m, &graph)?;
    println!("devices       {m}");
    println!("shape         {}", args.shape);
    println!(
        "census        x={} y={} z={}",
        census.double_nvlink, census.single_nvlink, census.pcie
    );
    println!("agg_bw        {:.3}", aggregated_bw(&m, &graph)?);
    let pred = model.predict(&census);
    print!("pred_effbw    {pred:.3}");
    if pred < 0.0 {
        print!("  (negative: model extrapolation, ranking only)");
    }
    println!();
    println!("preserved_bw  {:.3}", preserved_bw(&state, &m)?);
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let text = fs::read_to_string(&args.samples)
        .with_context(|| format!("reading {}", args.samples.display()))?;
    let samples = parse_samples(&text)?;
    let fitted = fit_effbw_model(&samples)?;
    let d = &fitted.diagnostics;
    write_atomic(&args.out, &fitted.model.to_toml_string("fitted", Some(d)))?;
    println!(
        "fitted {} coefficients from {} samples",
        fitted.model.theta().len(),
        d.samples
    );
    println!("relative_error    {:.6}", d.relative_error);
    println!("rmse              {:.6}", d.rmse);
    println!("condition_number  {:.3e}", d.condition_number);
    if d.condition_warning {
        println!("warning: condition number exceeds 1e8; coefficients may be unreliable");
    }
    println!("model written to {}", args.out.display());
    Ok(())
}

fn gen_jobs(args: GenJobsArgs) -> Result<()> {
    let jobs = generate_jobs(args.seed, args.count, args.max_gpus, &default_mix())?;
    write_atomic(&args.out, &render_jobs(&jobs))?;
    println!(
        "wrote {} jobs (seed {}, max {} GPUs) to {}",
        jobs.len(),
        args.seed,
        args.max_gpus,
        args.out.display()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let text =
        fs::read_to_string(&args.log).with_context(|| format!("reading {}", args.log.display()))?;
    let records = parse_log(&text)?;
    let summary = summarize_log(&records, args.group_by)?;
    print!("{}", summary.render_table());
    if let Some(out) = &args.out {
        write_atomic(out, &summary.to_toml_string())?;
        println!("summary written to {}", out.display());
    }
    Ok(())
}

fn topo(args: TopoArgs) -> Result<()> {
    let graph = load_topology(&args.name)?;
    if args.dump {
        print!("{}", graph.to_toml_string());
        return Ok(());
    }
    println!("name     {}", graph.name());
    println!("devices  {}", graph.device_count());
    for (i, group) in graph.sockets().iter().enumerate() {
        let ids: Vec<String> = group.iter().map(|d| d.to_string()).collect();
        println!("socket{}  {{{}}}", i, ids.join(", "));
    }
    let mut by_class: Vec<(String, Vec<String>)> = Vec::new();
    for ((a, b), class) in graph.nvlink_edges() {
        let token = class.token().to_string();
        match by_class.iter_mut().find(|(t, _)| *t == token) {
            Some((_, edges)) => edges.push(format!("{a}-{b}")),
            None => by_class.push((token, vec![format!("{a}-{b}")])),
        }
    }
    for (token, edges) in &by_class {
        println!("{}    {}", token, edges.join(" "));
    }
    let nvlink_count = graph.nvlink_edges().count();
    let total_pairs = usize::from(graph.device_count()) * usize::from(graph.device_count() - 1) / 2;
    println!(
        "links    {nvlink_count} nvlink, {} pcie fallback",
        total_pairs - nvlink_count
    );
    Ok(())
}
