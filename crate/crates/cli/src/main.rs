mod lists;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rearrange_core::conley_taber::conley_taber_test;
use rearrange_core::estimators::{
    cluster_treatment_estimates, did_cluster_estimates, CrossSectionData, PanelData,
};
use rearrange_core::monte_carlo::{
    results_to_csv, run_grid, DgpConfig, Innovation, Method, SimGrid,
};
use rearrange_core::size_bound::size_bound;
use rearrange_core::test_engine::{robustness_rho, Direction, EstimateVector, RearrangementTest};
use rearrange_core::TightnessGrade;
use rearrange_core::weights::{
    default_cache_path, generate_table_with, write_atomic, WeightCache, WeightTable,
};

use lists::{parse_int_list, parse_list};

#[derive(Parser)]
#[command(name = "rearrange", version, about = "Rearrangement test for a single treated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate weights over grids of alpha, rho and q
    Weights(WeightsArgs),
    /// Evaluate the size bound and its parts at one (q, w, rho)
    Bound(BoundArgs),
    /// Run the rearrangement test on an estimates, panel or cross-section file
    Test(TestArgs),
    /// Largest rho at which the test still rejects
    Robustness(RobustnessArgs),
    /// Run the placebo-quantile comparison test on a panel file
    CtTest(CtArgs),
    /// Simulate rejection rates on two-way fixed-effects panels
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct WeightsArgs {
    /// Significance levels, e.g. `0.05` or `0.1,0.05`
    #[arg(long)]
    alpha: String,
    /// Heterogeneity caps, e.g. `2..9`
    #[arg(long)]
    rho: String,
    /// Control counts, e.g. `10,15,...,49`
    #[arg(long)]
    q: String,
    /// Write the table as CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    q: u32,
    #[arg(long)]
    w: f64,
    #[arg(long)]
    rho: f64,
    /// Also grade the slack against this level
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct InputArgs {
    /// Estimates (`cluster,estimate,treated`), panel
    /// (`unit,cluster,time,outcome[,x..]`) or cross-section
    /// (`unit,cluster,outcome[,x..]`) file
    #[arg(long = "in")]
    input: PathBuf,
    /// Treated cluster id (panel and cross-section files)
    #[arg(long)]
    treated: Option<String>,
    /// First post-treatment time (panel files)
    #[arg(long = "post-from")]
    post_from: Option<i64>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    rho: f64,
    #[arg(long, default_value = "upper")]
    direction: Direction,
    /// Null value of the treated-minus-control difference
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    /// Write the key-value report
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value = "upper")]
    direction: Direction,
    #[arg(long = "rho-max", default_value_t = 10.0)]
    rho_max: f64,
    #[arg(long, default_value_t = 0.001)]
    step: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CtArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    treated: String,
    #[arg(long = "post-from")]
    post_from: i64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// `null-study` or `power-study`; overrides the grid flags
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "50")]
    q: String,
    #[arg(long, default_value = "0.5")]
    gamma: String,
    #[arg(long, default_value = "1")]
    sigma: String,
    #[arg(long, default_value = "0")]
    delta: String,
    /// Comma-separated: gaussian, chi2
    #[arg(long, default_value = "gaussian")]
    innovation: String,
    #[arg(long, default_value_t = 10)]
    periods: usize,
    #[arg(long = "post-periods", default_value_t = 4)]
    post_periods: usize,
    /// Comma-separated: rearrangement, conley-taber
    #[arg(long, default_value = "rearrangement,conley-taber")]
    methods: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    rho: f64,
    #[arg(long, default_value = "upper")]
    direction: Direction,
    #[arg(long, default_value_t = 10_000)]
    reps: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_out(path: &Option<PathBuf>, text: &str) -> Result<()> {
    if let Some(p) = path {
        write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn load_estimates(args: &InputArgs) -> Result<EstimateVector> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let header: Vec<String> = text
        .lines()
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let starts = |cols: &[&str]| header.len() >= cols.len() && header.iter().zip(cols).all(|(h, c)| h == c);
    let treated = || {
        args.treated
            .as_deref()
            .ok_or_else(|| anyhow!("--treated is required for this input file"))
    };
    if starts(&["cluster", "estimate", "treated"]) {
        Ok(EstimateVector::parse_csv(&text)?)
    } else if starts(&["unit", "cluster", "time", "outcome"]) {
        let post = args
            .post_from
            .ok_or_else(|| anyhow!("--post-from is required for panel input"))?;
        let panel = PanelData::parse_csv(&text, treated()?, post)?;
        Ok(did_cluster_estimates(&panel)?)
    } else if starts(&["unit", "cluster", "outcome"]) {
        let data = CrossSectionData::parse_csv(&text, treated()?)?;
        Ok(cluster_treatment_estimates(&data)?)
    } else {
        bail!(
            "{}: unrecognised header; expected cluster,estimate,treated or unit,cluster,time,outcome or unit,cluster,outcome",
            args.input.display()
        )
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.5) {
        bail!("alpha must lie in (0, 0.5), got {alpha}");
    }
    Ok(())
}

fn cmd_weights(args: WeightsArgs) -> Result<String> {
    let alphas = parse_list(&args.alpha).context("--alpha")?;
    let rhos = parse_list(&args.rho).context("--rho")?;
    let qs = parse_int_list(&args.q).context("--q")?;
    for &a in &alphas {
        check_alpha(a)?;
    }
    let table = generate_table_with(&alphas, &rhos, &qs, &WeightTable::builtin())?;
    write_out(&args.out, &table.to_csv())?;
    let mut so = String::new();
    writeln!(so, "{:>8} {:>8} {:>4} {:>9}  grade", "alpha", "rho", "q", "weight")?;
    for row in &table.rows {
        let w = row.weight.map_or("-".to_string(), |w| format!("{w:.6}"));
        writeln!(
            so,
            "{:>8} {:>8} {:>4} {:>9}  {}",
            row.spec.alpha, row.spec.rho, row.spec.q, w, row.grade.grade
        )?;
    }
    Ok(so)
}

fn cmd_bound(args: BoundArgs) -> Result<String> {
    let b = size_bound(args.q, args.w, args.rho)?;
    let mut so = String::new();
    writeln!(so, "q={}", b.q)?;
    writeln!(so, "w={:.6}", b.w)?;
    writeln!(so, "rho={:.6}", b.rho)?;
    writeln!(so, "escape_term={:.6}", b.escape_term)?;
    writeln!(so, "oracle_integral={:.6}", b.oracle_integral)?;
    writeln!(so, "centering_adjustment={:.6}", b.centering_adjustment)?;
    writeln!(so, "total={:.6}", b.total)?;
    writeln!(so, "slack={:.6}", b.slack())?;
    if let Some(alpha) = args.alpha {
        check_alpha(alpha)?;
        let grade = TightnessGrade::from_slack(alpha, b.slack());
        writeln!(so, "grade={}", grade.grade)?;
    }
    Ok(so)
}

fn cached_test(alpha: f64, rho: f64, q: usize, direction: Direction) -> Result<RearrangementTest> {
    let mut cache = WeightCache::open(default_cache_path())?;
    Ok(RearrangementTest::from_source(alpha, rho, q, direction, |spec| {
        cache.weight(&spec)
    })?)
}

fn cmd_test(args: TestArgs) -> Result<String> {
    check_alpha(args.alpha)?;
    let x = load_estimates(&args.input)?;
    let test = cached_test(args.alpha, args.rho, x.q(), args.direction)?;
    let d = test.decide(&x, args.shift)?;
    let mut report = String::new();
    let decision = if d.reject { "reject" } else { "no_reject" };
    writeln!(report, "decision={decision}")?;
    writeln!(report, "direction={}", d.direction)?;
    writeln!(report, "alpha={:.6}", d.alpha)?;
    writeln!(report, "alpha_used={:.6}", d.alpha_used)?;
    writeln!(report, "rho={:.6}", d.rho)?;
    writeln!(report, "q={}", x.q())?;
    writeln!(report, "weight={:.6}", d.w_used)?;
    writeln!(report, "shift={:.6}", d.shift)?;
    writeln!(report, "delta={:.6}", d.diagnostics.delta)?;
    writeln!(report, "min_weighted_pair={:.6}", d.diagnostics.min_weighted_pair)?;
    writeln!(report, "max_recentered_control={:.6}", d.diagnostics.max_recentered_control)?;
    write_out(&args.out, &report)?;
    for w in &d.warnings {
        eprintln!("warning: {w}");
    }
    let mut so = report;
    writeln!(
        so,
        "{} H0 at level {} ({}, rho = {}, {} controls, weight {:.6})",
        if d.reject { "Reject" } else { "Do not reject" },
        d.alpha,
        d.direction,
        d.rho,
        x.q(),
        d.w_used
    )?;
    Ok(so)
}

fn cmd_robustness(args: RobustnessArgs) -> Result<String> {
    check_alpha(args.alpha)?;
    let x = load_estimates(&args.input)?;
    let r = robustness_rho(&x, args.alpha, args.direction, args.rho_max, args.step)?;
    let mut report = String::new();
    match r.rho {
        Some(rho) => {
            writeln!(report, "rho={rho:.6}")?;
            writeln!(report, "rho_squared={:.6}", rho * rho)?;
        }
        None => {
            writeln!(report, "rho=×")?;
            writeln!(report, "rho_squared=×")?;
        }
    }
    writeln!(report, "saturated={}", r.saturated)?;
    write_out(&args.out, &report)?;
    if r.saturated {
        eprintln!(
            "warning: the test still rejects at rho-max = {}; the largest rho is at least this value",
            args.rho_max
        );
    }
    let mut so = report;
    if r.rho.is_none() {
        writeln!(so, "The null is not rejected at any rho on the grid.")?;
    }
    Ok(so)
}

fn cmd_ct(args: CtArgs) -> Result<String> {
    let panel = PanelData::read_csv(&args.input, &args.treated, args.post_from)?;
    let r = conley_taber_test(&panel, args.alpha)?;
    let mut report = String::new();
    writeln!(report, "decision={}", if r.reject { "reject" } else { "no_reject" })?;
    writeln!(report, "alpha={:.6}", r.alpha)?;
    writeln!(report, "q={}", r.placebo_coefficients.len())?;
    writeln!(report, "delta_hat={:.6}", r.delta_hat)?;
    writeln!(report, "critical_value={:.6}", r.critical_value)?;
    write_out(&args.out, &report)?;
    Ok(report)
}

fn parse_methods(args: &SimulateArgs) -> Result<Vec<Method>> {
    args.methods
        .split(',')
        .map(|m| match m.trim() {
            "rearrangement" => Ok(Method::Rearrangement {
                alpha: args.alpha,
                rho: args.rho,
                direction: args.direction,
            }),
            "conley-taber" | "conley_taber" | "ct" => Ok(Method::ConleyTaber { alpha: args.alpha }),
            other => bail!("unknown method '{other}'"),
        })
        .collect()
}

fn cmd_simulate(args: SimulateArgs) -> Result<String> {
    check_alpha(args.alpha)?;
    let methods = parse_methods(&args)?;
    let grids = match args.preset.as_deref() {
        Some("null-study") => SimGrid::null_study(),
        Some("power-study") => SimGrid::power_study(),
        Some(other) => bail!("unknown preset '{other}'; use null-study or power-study"),
        None => {
            let mut base = DgpConfig::new(50);
            base.periods = args.periods;
            base.post_periods = args.post_periods;
            let innovations = args
                .innovation
                .split(',')
                .map(|s| s.trim().parse::<Innovation>().map_err(|e| anyhow!(e)))
                .collect::<Result<Vec<_>>>()?;
            vec![SimGrid {
                base,
                qs: parse_int_list(&args.q)?.into_iter().map(|q| q as usize).collect(),
                gammas: parse_list(&args.gamma)?,
                sigmas: parse_list(&args.sigma)?,
                deltas: parse_list(&args.delta)?,
                innovations,
            }]
        }
    };
    let results = run_grid(&grids, &methods, args.reps, args.seed)?;
    write_out(&args.out, &results_to_csv(&results))?;
    let mut so = String::new();
    writeln!(
        so,
        "{:<24} {:>4} {:>5} {:>6} {:>6} {:>14} {:>9} {:>9}",
        "method", "q", "gamma", "sigma", "delta", "innovation", "rate", "mc_se"
    )?;
    for r in &results {
        writeln!(
            so,
            "{:<24} {:>4} {:>5} {:>6} {:>6} {:>14} {:>9.6} {:>9.6}",
            r.method.name(),
            r.cfg.q,
            r.cfg.gamma,
            r.cfg.sigma_treated,
            r.cfg.delta,
            r.cfg.innovation.as_str(),
            r.reject_rate,
            r.mc_standard_error
        )?;
    }
    Ok(so)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Weights(a) => cmd_weights(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Test(a) => cmd_test(a),
        Command::Robustness(a) => cmd_robustness(a),
        Command::CtTest(a) => cmd_ct(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
