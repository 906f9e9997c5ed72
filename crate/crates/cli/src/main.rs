//! `bpcal`: fit calibration models, report DIA breakpoints, run simulation
//! studies, export plot data, and serve the exploration API.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bpcal_core::artifact::{BreakpointReport, FitArtifact, PlotData, RunManifest};
use bpcal_core::breakpoints::{analyze_samples, SearchRange};
use bpcal_core::data::{AssayDataset, MicBreakpoints, DEFAULT_SIGMA_D, DEFAULT_SIGMA_M};
use bpcal_core::sampler::{run_chain, ModelKind, SamplerConfig};
use bpcal_core::sim::{
    breakpoint_summary_csv, fit_summary_csv, replicate_csv, run_study, scenario, summarize_breakpoints,
    summarize_fits, Scenario, StudyPlan, SIM_SEARCH,
};
use bpcal_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bpcal", version, about = "Model-based DIA breakpoint calibration")]
struct Cli {
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a dataset and write the fit artifact.
    Fit(FitArgs),
    /// Posterior distribution of DIA breakpoints for a fit.
    Breakpoints(BreakpointArgs),
    /// Simulation study on a built-in or JSON-described scenario.
    Simulate(SimulateArgs),
    /// CSVs for plotting a fit: curve band, density band and scatter counts.
    Plotdata(PlotArgs),
    /// Serve the HTTP exploration API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SamplerArgs {
    /// logistic4, spline-rw or spline-rj.
    #[arg(long, default_value = "logistic4")]
    model: ModelKind,
    #[arg(long, default_value_t = 12_000)]
    iters: usize,
    #[arg(long, default_value_t = 6_000)]
    burnin: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1_000)]
    grid_points: usize,
    /// Maximum number of interior knots for spline-rj.
    #[arg(long, default_value_t = 20)]
    kmax: usize,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        let mut c = SamplerConfig::new(self.model, self.seed);
        c.iterations = self.iters;
        c.burn_in = self.burnin;
        c.thin = self.thin;
        c.grid_points = self.grid_points;
        c.kmax = self.kmax;
        c
    }
}

#[derive(Args)]
struct FitArgs {
    /// CSV with columns mic,dia[,count,mic_censored,dia_censored].
    data: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = DEFAULT_SIGMA_M)]
    sigma_m: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_D)]
    sigma_d: f64,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 6)]
    d_min: i32,
    #[arg(long, default_value_t = 40)]
    d_max: i32,
}

#[derive(Args)]
struct BreakpointArgs {
    /// Fit directory or its fit.json.
    fit: PathBuf,
    /// MIC breakpoints as two log2 dilutions, e.g. `--mic-bp -1 1`.
    #[arg(long, num_args = 2, allow_negative_numbers = true, value_names = ["LOWER", "UPPER"], required = true)]
    mic_bp: Vec<i32>,
    #[command(flatten)]
    search: SearchArgs,
    /// Also write the posterior-mean loss for every breakpoint pair.
    #[arg(long)]
    loss_grid: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in scenario name or a scenario JSON file.
    scenario: String,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Isolates per replicate; defaults to the scenario's own size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 12_000)]
    iters: usize,
    #[arg(long, default_value_t = 6_000)]
    burnin: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    /// Models to fit to every replicate.
    #[arg(long, value_delimiter = ',', default_value = "logistic4,spline-rw")]
    models: Vec<ModelKind>,
    #[arg(long, env = "BPCAL_JOBS", default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct PlotArgs {
    fit: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory for datasets and fit artifacts.
    #[arg(long, default_value = "bpcal-data")]
    data_dir: PathBuf,
    #[arg(long, env = "BPCAL_JOBS", default_value_t = 1)]
    jobs: usize,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Artifact(_) | Error::Parse { .. } => 1,
            Error::Validation(_) => 2,
            Error::Contract(_) | Error::Init { .. } | Error::Numerical(_) => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>, manifest: &mut RunManifest) -> CliResult<PathBuf> {
    let path = out.join(name);
    std::fs::write(&path, contents)?;
    manifest.add_file(out, &path)?;
    Ok(path)
}

fn finish(out: &Path, mut manifest: RunManifest, start: Instant) -> CliResult<()> {
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.save(out)?;
    Ok(())
}

fn command_line() -> Vec<String> {
    std::env::args().collect()
}

fn cmd_fit(out: &Path, args: &FitArgs) -> CliResult<()> {
    let start = Instant::now();
    let data = AssayDataset::load(&args.data, args.sigma_m, args.sigma_d)?;
    let config = args.sampler.config();
    config.validate()?;
    let trace = run_chain(&config, &data)?;
    let art = FitArtifact::from_trace(&config, &data, &trace);
    let mut manifest = RunManifest::new(command_line(), &config)?;
    manifest.dataset_digest = Some(art.dataset_digest.clone());
    manifest.seed = Some(config.seed);
    for path in art.save(out, &trace, &data)? {
        manifest.add_file(out, &path)?;
    }
    println!("fit {} ({}, {} isolates, {} draws)", art.fit_id, config.model, data.n_isolates(), trace.n_samples());
    println!("acceptance rates:");
    for (name, r) in trace.acceptance.named() {
        if let Some(rate) = r.rate() {
            println!("  {name:<11} {rate:.3}  ({} proposals)", r.proposed);
        }
    }
    finish(out, manifest, start)
}

fn cmd_breakpoints(out: &Path, args: &BreakpointArgs) -> CliResult<()> {
    let start = Instant::now();
    let bp = MicBreakpoints::new(args.mic_bp[0], args.mic_bp[1])?;
    let search = SearchRange::new(args.search.d_min, args.search.d_max)?;
    let (art, trace) = FitArtifact::load(&args.fit)?;
    let analysis =
        analyze_samples(&trace.grid, &trace.g_matrix(), &trace.f_matrix(), bp, art.sigma_m, art.sigma_d, search)?;
    let report = BreakpointReport::new(&art.fit_id, bp, search, &analysis, args.loss_grid)?;

    println!("DIA breakpoints for MIC ({}, {}), posterior top 95%:", bp.lower, bp.upper);
    println!("  {:>9}  {:>6}  {:>8}", "DIA", "%", "cumul %");
    for row in &report.table {
        let mark = if (row.d_lower, row.d_upper) == (report.map.lower, report.map.upper) { "  MAP" } else { "" };
        println!("  ({:>2}, {:>2})  {:>6.1}  {:>8.1}{mark}", row.d_lower, row.d_upper, row.pct, row.cum_pct);
    }

    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(command_line(), &(bp, search, &art.fit_id))?;
    manifest.dataset_digest = Some(art.dataset_digest.clone());
    let stem = format!("breakpoints_{}_{}", bp.lower, bp.upper);
    write(out, &format!("{stem}.json"), serde_json::to_vec_pretty(&report).map_err(Error::from)?, &mut manifest)?;
    write(out, &format!("{stem}.csv"), report.to_csv()?, &mut manifest)?;
    if let Some(lg) = &report.mean_loss {
        write(out, &format!("{stem}_loss.csv"), lg.to_csv(), &mut manifest)?;
    }
    finish(out, manifest, start)
}

fn load_scenario(spec: &str) -> CliResult<Scenario> {
    let path = Path::new(spec);
    if path.is_file() {
        let s: Scenario = serde_json::from_slice(&std::fs::read(path)?).map_err(Error::from)?;
        s.validate()?;
        Ok(s)
    } else {
        Ok(scenario(spec)?)
    }
}

fn cmd_simulate(out: &Path, args: &SimulateArgs) -> CliResult<()> {
    let start = Instant::now();
    let s = load_scenario(&args.scenario)?;
    let mut plan = StudyPlan::new(s, args.reps, args.seed);
    if let Some(n) = args.n {
        plan.n_isolates = n;
    }
    plan.models = args.models.clone();
    plan.sampler.iterations = args.iters;
    plan.sampler.burn_in = args.burnin;
    plan.sampler.thin = args.thin;
    plan.sampler.validate()?;
    plan.search = SIM_SEARCH;
    let results = run_study(&plan, args.jobs)?;

    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(
        command_line(),
        &(&plan.scenario, plan.replicates, plan.n_isolates, plan.base_seed, &plan.sampler, &plan.models),
    )?;
    manifest.seed = Some(plan.base_seed);
    let fits = summarize_fits(&results);
    let bps = summarize_breakpoints(&results);
    write(out, "replicates.csv", replicate_csv(&results), &mut manifest)?;
    write(out, "fit_summary.csv", fit_summary_csv(&fits)?, &mut manifest)?;
    write(out, "breakpoint_summary.csv", breakpoint_summary_csv(&bps)?, &mut manifest)?;

    println!("{}: {} replicates × {} models, {} isolates", plan.scenario.name, plan.replicates, plan.models.len(), plan.n_isolates);
    for f in &fits {
        println!(
            "  {:<10} curve SSE median {:.2} (mean {:.2}, sd {:.2}); density SSE median {:.2e}",
            f.model.as_str(),
            f.sse_curve_median,
            f.sse_curve_mean,
            f.sse_curve_sd,
            f.sse_density_median
        );
    }
    for b in &bps {
        println!(
            "  {:<10} MIC ({}, {}) true DIA ({}, {}): exact {:.0}%, within 1 {:.0}%",
            b.model.as_str(),
            b.mic_lower,
            b.mic_upper,
            b.true_lower,
            b.true_upper,
            b.exact_pct,
            b.within1_pct
        );
    }
    finish(out, manifest, start)
}

fn cmd_plotdata(out: &Path, args: &PlotArgs) -> CliResult<()> {
    let start = Instant::now();
    let (art, trace) = FitArtifact::load(&args.fit)?;
    let data = art.load_dataset(FitArtifact::dir_of(&args.fit))?;
    let plot = PlotData::new(&trace, &data)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(command_line(), &art.fit_id)?;
    manifest.dataset_digest = Some(art.dataset_digest.clone());
    write(out, "curve.csv", plot.curve_csv(), &mut manifest)?;
    write(out, "density.csv", plot.density_csv(), &mut manifest)?;
    write(out, "scatter.csv", plot.scatter_csv(), &mut manifest)?;
    finish(out, manifest, start)
}

fn cmd_serve(args: &ServeArgs) -> CliResult<()> {
    let addr: std::net::SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| Failure { code: 2, message: format!("bad listen address: {e}") })?;
    let state = bpcal_service::AppState::open(&args.data_dir, args.jobs)?;
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("listening on http://{addr}");
    rt.block_on(bpcal_service::serve(state, addr))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.as_path();
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(out, a),
        Command::Breakpoints(a) => cmd_breakpoints(out, a),
        Command::Simulate(a) => cmd_simulate(out, a),
        Command::Plotdata(a) => cmd_plotdata(out, a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
