use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use binfactor::factor_scores::{estimate_scores, ScoreConfig};
use binfactor::model_io::{read_binary_matrix, read_metrics, read_model, write_metrics, write_model, write_scores};
use binfactor::moment_estimation::BinaryMatrix;
use binfactor::selfcheck;
use binfactor::simulation_lab::{median_metric, run_replications, MetricsRecord, SimScenario};
use binfactor::spectral_subspace::{fit_model_with_floor, TAU2_FLOOR};

#[derive(Parser)]
#[command(name = "binfactor", version, about = "Latent probit factor model for binary data")]
struct Cli {
    /// Worker threads (default: all available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate thresholds, loadings and noise variances from a 0/1 CSV file
    Fit(FitArgs),
    /// Estimate per-row factor scores under a fitted model
    Score(ScoreArgs),
    /// Run Monte Carlo replications over a scenario grid
    Simulate(SimulateArgs),
    /// Summarise a metrics CSV by scenario
    Eval(EvalArgs),
    /// Run the numerical verification battery
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    out: PathBuf,
    /// Lower bound for estimated noise variances
    #[arg(long, default_value_t = TAU2_FLOOR)]
    tau_floor: f64,
    /// Recorded in the model file
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreOptions {
    /// Percentage of components kept in the likelihood
    #[arg(long, default_value_t = 90.0)]
    m: f64,
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Project iterates onto the ball of this radius
    #[arg(long)]
    z_box: Option<f64>,
}

impl ScoreOptions {
    fn config(&self) -> ScoreConfig {
        ScoreConfig { m_percent: self.m, grad_tol: self.grad_tol, max_iter: self.max_iter, z_box: self.z_box }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: ScoreOptions,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// p ∈ {20, 50}, n ∈ {1000, 2000, 4000}, 50 replications
    Desk,
    /// p ∈ {20, 50, 100}, n ∈ {4000, 6000, …, 14000}, 1000 replications
    Full,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    grid: Option<Grid>,
    /// Comma-separated feature dimensions
    #[arg(long, value_delimiter = ',')]
    p: Vec<usize>,
    /// Comma-separated sample sizes
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Comma-separated factor dimensions
    #[arg(long, value_delimiter = ',')]
    d: Vec<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Add rows to an existing metrics file
    #[arg(long)]
    append: bool,
    /// Include per-stage wall times (output is then no longer reproducible)
    #[arg(long)]
    timings: bool,
    /// Use the raw loadings without rescaling rows to unit latent variance
    #[arg(long)]
    literal_recipe: bool,
    /// Draw a fresh true model for every replication
    #[arg(long)]
    redraw_model: bool,
    #[command(flatten)]
    opts: ScoreOptions,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 1.0, hide = true)]
    tolerance_scale: f64,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn load_data(path: &Path) -> Result<BinaryMatrix, Failure> {
    read_binary_matrix(path).with_context(|| format!("reading {}", path.display())).map_err(usage)
}

fn cmd_fit(args: &FitArgs) -> CmdResult {
    if !(args.tau_floor > 0.0) {
        return Err(usage(anyhow!("--tau-floor must be positive")));
    }
    let y = load_data(&args.data)?;
    if args.d < 1 || args.d > y.p() {
        return Err(usage(anyhow!("--d must lie in 1..={} for this data, got {}", y.p(), args.d)));
    }
    let mut model = fit_model_with_floor(&y, args.d, args.tau_floor).map_err(runtime)?;
    model.info.seed = args.seed;
    write_model(&model, &args.out).with_context(|| format!("writing {}", args.out.display())).map_err(runtime)?;

    println!("p = {}, n = {}, d = {}", model.p, y.n(), model.d);
    let eig: Vec<String> = model.eigvals.iter().map(|v| format!("{v:.6}")).collect();
    println!("leading eigenvalues: {}", eig.join(" "));
    println!(
        "clamped marginals: {}, clamped pairs: {}, floored variances: {}",
        model.info.marginal_clamps, model.info.pair_clamps, model.info.tau2_floored
    );
    if let Some(w) = &model.info.eigengap_warning {
        eprintln!("warning: eigengap {:.3e} after component {} leaves the subspace poorly determined", w.gap, w.d);
    }
    println!("model written to {}", args.out.display());
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> CmdResult {
    let cfg = args.opts.config();
    cfg.validate().map_err(usage)?;
    let model = read_model(&args.model).with_context(|| format!("reading {}", args.model.display())).map_err(usage)?;
    let y = load_data(&args.data)?;
    if y.p() != model.p {
        return Err(usage(anyhow!("data has {} columns but the model was fitted with p = {}", y.p(), model.p)));
    }
    let scores = estimate_scores(&y, &model, &cfg).map_err(runtime)?;
    write_scores(&scores, &args.out).with_context(|| format!("writing {}", args.out.display())).map_err(runtime)?;

    let included = model.tau_hat().iter().filter(|&&t| t > scores.tau).count();
    let converged = scores.records.iter().filter(|r| r.converged).count();
    println!("rows = {}, components used = {included} of {}", y.n(), model.p);
    println!("converged rows: {converged} of {}", y.n());
    println!("scores written to {}", args.out.display());
    Ok(())
}

fn scenarios(args: &SimulateArgs) -> Result<Vec<SimScenario>, Failure> {
    let (mut ps, mut ns, mut reps) = match args.grid.unwrap_or(Grid::Desk) {
        Grid::Desk => (vec![20, 50], vec![1000, 2000, 4000], 50),
        Grid::Full => (vec![20, 50, 100], (0..6).map(|r| 4000 + 2000 * r).collect(), 1000),
    };
    if !args.p.is_empty() {
        ps = args.p.clone();
    }
    if !args.n.is_empty() {
        ns = args.n.clone();
    }
    if let Some(r) = args.reps {
        reps = r;
    }
    let ds = if args.d.is_empty() { vec![2] } else { args.d.clone() };

    let mut out = Vec::new();
    for &d in &ds {
        for &p in &ps {
            for &n in &ns {
                let scn = SimScenario {
                    d,
                    p,
                    n,
                    reps,
                    seed: args.seed,
                    normalize_rows: !args.literal_recipe,
                    redraw_model: args.redraw_model,
                };
                scn.validate().with_context(|| format!("scenario d={d}, p={p}, n={n}, reps={reps}")).map_err(usage)?;
                out.push(scn);
            }
        }
    }
    Ok(out)
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    let cfg = args.opts.config();
    cfg.validate().map_err(usage)?;
    let grid = scenarios(args)?;
    let mut failed = 0;
    for (k, scn) in grid.iter().enumerate() {
        eprintln!("[{}/{}] {} with {} replications", k + 1, grid.len(), scn.id(), scn.reps);
        let records = run_replications(scn, &cfg).map_err(runtime)?;
        for r in records.iter().filter(|r| !r.is_ok()) {
            eprintln!("  replication {} failed: {}", r.rep, r.error.as_deref().unwrap_or_default());
        }
        failed += records.iter().filter(|r| !r.is_ok()).count();
        write_metrics(&records, &args.out, args.append || k > 0, args.timings)
            .with_context(|| format!("writing {}", args.out.display()))
            .map_err(runtime)?;
    }
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} replication(s) failed; metrics for the rest are in {}", args.out.display())));
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let records = read_metrics(&args.metrics).with_context(|| format!("reading {}", args.metrics.display())).map_err(usage)?;
    let mut order: Vec<&str> = Vec::new();
    for r in &records {
        if !order.contains(&r.scenario.as_str()) {
            order.push(&r.scenario);
        }
    }
    println!("{:<18} {:>5} {:>6} {:>12} {:>12} {:>12} {:>12}", "scenario", "reps", "failed", "max_err", "subspace_d", "med_err", "tau_err");
    for name in order {
        let group: Vec<MetricsRecord> = records.iter().filter(|r| r.scenario == name).cloned().collect();
        let failed = group.iter().filter(|r| !r.is_ok()).count();
        println!(
            "{:<18} {:>5} {:>6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            name,
            group.len(),
            failed,
            median_metric(&group, |r| r.max_err),
            median_metric(&group, |r| r.subspace_d),
            median_metric(&group, |r| r.med_err),
            median_metric(&group, |r| r.tau_err),
        );
    }
    Ok(())
}

fn cmd_selfcheck(args: &SelfcheckArgs) -> CmdResult {
    let results = selfcheck::run(args.tolerance_scale);
    println!("{:<34} {:>12} {:>12}  result", "check", "max_error", "tolerance");
    for r in &results {
        println!("{:<34} {:>12.3e} {:>12.3e}  {}", r.name, r.max_error, r.tolerance, if r.passed { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} check(s) failed")));
    }
    Ok(())
}

fn dispatch(command: &Command) -> CmdResult {
    match command {
        Command::Fit(a) => cmd_fit(a),
        Command::Score(a) => cmd_score(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        pool = pool.num_threads(t);
    }
    let outcome = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(&cli.command)),
        Err(e) => Err(runtime(e)),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
