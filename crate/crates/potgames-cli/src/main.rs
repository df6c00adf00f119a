//! `potgames` — reproducible experiments for learning the rationality
//! parameters of quadratic potential games from observed equilibria.
//!
//! Subcommands: `generate` synthesizes a game form plus dataset, `train`
//! runs the stochastic active-set learner, `eval` reports the test error of
//! a parameter vector, and `gradcheck` compares the implicit gradient against
//! the finite-difference oracle.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 solver failure,
//! 3 verification failure. Set `POTGAMES_LOG` (e.g. `debug`) for logging.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use potgames::fileio;
use potgames::games::{
    congestion_form, cournot_form, generate_dataset, sample_congestion_spec, CournotSpec, Dataset,
};
use potgames::learner::{self, StepSchedule, ThetaInit, TrainConfig};
use potgames::model::{project_theta, AffineGameForm, RationalityVector};
use potgames::qp::{extract_active_sets, solve_potential};
use potgames::rules::RuleKind;
use potgames::verify;
use potgames::Error as PgError;

const EXIT_USAGE: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "potgames",
    version,
    about = "Learn rationality parameters of potential games from observed equilibria"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a game form and a synthetic dataset
    Generate(GenerateArgs),
    /// Run the stochastic active-set learner on a dataset
    Train(TrainArgs),
    /// Evaluate the test error of a parameter vector
    Eval(EvalArgs),
    /// Check the implicit gradient against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GameKind {
    Cournot,
    Congestion,
}

#[derive(Args)]
struct GenerateArgs {
    /// Game family
    #[arg(long, value_enum)]
    game: GameKind,
    /// Agent count for Cournot games
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Agent count for congestion games
    #[arg(long, default_value_t = 3)]
    agents: usize,
    /// Node count of the congestion graph
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    /// Edge probability of the congestion graph
    #[arg(long = "p-edge", default_value_t = 0.3)]
    p_edge: f64,
    /// Parameter dimension of the congestion cost factors
    #[arg(long = "theta-dim", default_value_t = 3)]
    theta_dim: usize,
    /// Number of datapoints (10% become the test split)
    #[arg(long = "K", default_value_t = 100)]
    count: usize,
    /// Standard deviation of the observation noise
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the sampled true parameters (comma-separated)
    #[arg(
        long = "theta-true",
        value_delimiter = ',',
        allow_negative_numbers = true
    )]
    theta_true: Option<Vec<f64>>,
    /// Output stem; writes `<out>.form`, `<out>.ds` (and `<out>.graph`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Sqrt,
    Constant,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Rule1,
    Rule2,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file
    #[arg(long)]
    data: PathBuf,
    /// Form file (defaults to the dataset path with extension `form`)
    #[arg(long)]
    form: Option<PathBuf>,
    /// Iteration budget
    #[arg(long = "T", default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    eta0: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Sqrt)]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = RuleArg::Rule1)]
    rule: RuleArg,
    /// Rule-2 ball radius scale (radius = epsilon · (1 + ‖θ‖))
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long = "eval-every", default_value_t = 50)]
    eval_every: usize,
    #[arg(long = "kkt-tol", default_value_t = 1e-8)]
    kkt_tol: f64,
    #[arg(long = "act-tol", default_value_t = 1e-7)]
    act_tol: f64,
    #[arg(long = "grad-clip", default_value_t = 1e3)]
    grad_clip: f64,
    /// Initial θ (comma-separated); defaults to a random positive draw
    #[arg(
        long = "theta-init",
        value_delimiter = ',',
        allow_negative_numbers = true
    )]
    theta_init: Option<Vec<f64>>,
    /// Record per-iteration wall times in the CSV (makes reruns differ)
    #[arg(long)]
    timing: bool,
    /// Output stem; writes `<out>.csv` and `<out>.summary`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset file
    #[arg(long)]
    data: PathBuf,
    /// Form file (defaults to the dataset path with extension `form`)
    #[arg(long)]
    form: Option<PathBuf>,
    /// Summary file holding the θ to evaluate
    #[arg(long, conflicts_with_all = ["theta", "true_theta"])]
    summary: Option<PathBuf>,
    /// Explicit θ (comma-separated)
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        conflicts_with = "true_theta"
    )]
    theta: Option<Vec<f64>>,
    /// Evaluate at the generating parameters stored in the dataset
    #[arg(long = "true-theta")]
    true_theta: bool,
    /// Also write the result to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Dataset file
    #[arg(long)]
    data: PathBuf,
    /// Form file (defaults to the dataset path with extension `form`)
    #[arg(long)]
    form: Option<PathBuf>,
    /// Number of random (θ, datapoint) pairs
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Relative-error tolerance
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Testing only: tamper with the parameter map fed to the implicit
    /// gradient so the check must fail (negative control).
    #[arg(long = "corrupt-partials", hide = true)]
    corrupt_partials: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POTGAMES_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit_code)
        }
    }
}

struct CliError {
    exit_code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            exit_code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn solver(message: impl Into<String>) -> Self {
        Self {
            exit_code: EXIT_SOLVER,
            message: message.into(),
        }
    }
}

impl From<PgError> for CliError {
    fn from(e: PgError) -> Self {
        let exit_code = match &e {
            PgError::Parse { .. } | PgError::Dimension { .. } | PgError::ParamIndex { .. } => {
                EXIT_USAGE
            }
            _ => EXIT_SOLVER,
        };
        Self {
            exit_code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

type CliResult = Result<u8, CliError>;

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

fn derived_form_path(data: &Path, form: &Option<PathBuf>) -> PathBuf {
    form.clone().unwrap_or_else(|| data.with_extension("form"))
}

fn load_form_and_dataset(
    data: &Path,
    form: &Option<PathBuf>,
) -> Result<(AffineGameForm, Dataset), CliError> {
    let form_path = derived_form_path(data, form);
    let form = fileio::parse_form(&read_to_string(&form_path)?)?;
    let dataset = fileio::parse_dataset(&read_to_string(data)?)?;
    if dataset.meta.theta_dim != form.theta_dim()
        || dataset.meta.ctx_dim != form.ctx_dim
        || dataset.meta.agents != form.agents
        || dataset.meta.vars_per_agent != form.vars_per_agent
    {
        return Err(CliError::usage(
            "dataset and form disagree on dimensions".to_string(),
        ));
    }
    Ok((form, dataset))
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    if args.sigma < 0.0 {
        return Err(CliError::usage("--sigma must be nonnegative"));
    }
    if args.count == 0 {
        return Err(CliError::usage("--K must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (form, theta_true, graph_text, stem) = match args.game {
        GameKind::Cournot => {
            if args.n < 2 {
                return Err(CliError::usage("--n must be at least 2"));
            }
            let mut spec = CournotSpec::sample(args.n, &mut rng);
            if let Some(theta) = &args.theta_true {
                if theta.len() != 2 {
                    return Err(CliError::usage("cournot --theta-true needs 2 values"));
                }
                spec.theta_true = DVector::from_row_slice(theta);
            }
            let form = cournot_form(args.n);
            let theta = project_theta(&form.rationality(spec.theta_true.clone()));
            (form, theta, None, "cournot".to_string())
        }
        GameKind::Congestion => {
            if args.nodes < 2 || args.agents == 0 || args.theta_dim == 0 {
                return Err(CliError::usage(
                    "--nodes, --agents and --theta-dim must be positive (nodes ≥ 2)",
                ));
            }
            if !(args.p_edge > 0.0 && args.p_edge <= 1.0) {
                return Err(CliError::usage("--p-edge must be in (0, 1]"));
            }
            let mut spec = sample_congestion_spec(
                args.nodes,
                args.p_edge,
                args.agents,
                args.theta_dim,
                &mut rng,
            )?;
            if let Some(theta) = &args.theta_true {
                if theta.len() != args.theta_dim {
                    return Err(CliError::usage(format!(
                        "congestion --theta-true needs {} values",
                        args.theta_dim
                    )));
                }
                spec.theta_true = DVector::from_row_slice(theta);
            }
            let form = congestion_form(&spec)?;
            let theta = project_theta(&form.rationality(spec.theta_true.clone()));
            let graph = fileio::write_graph(&spec);
            (form, theta, Some(graph), "congestion".to_string())
        }
    };

    let sampler_rng_seed = args.seed;
    let dataset = match args.game {
        GameKind::Cournot => {
            let spec = CournotSpec {
                agents: args.n,
                theta_true: theta_true.theta.clone(),
            };
            generate_dataset(
                &form,
                &theta_true,
                spec.context_sampler(),
                args.count,
                args.sigma,
                sampler_rng_seed,
            )?
        }
        GameKind::Congestion => {
            let spec = fileio::parse_graph(graph_text.as_ref().unwrap())?;
            let sampler = spec.context_sampler()?;
            generate_dataset(
                &form,
                &theta_true,
                sampler,
                args.count,
                args.sigma,
                sampler_rng_seed,
            )?
        }
    };

    let stem = args.out.unwrap_or_else(|| PathBuf::from(stem));
    let form_path = stem.with_extension("form");
    let data_path = stem.with_extension("ds");
    fs::write(&form_path, fileio::write_form(&form))?;
    fs::write(&data_path, fileio::write_dataset(&dataset))?;
    println!("seed {}", args.seed);
    println!("wrote {}", form_path.display());
    println!("wrote {}", data_path.display());
    if let Some(graph) = graph_text {
        let graph_path = stem.with_extension("graph");
        fs::write(&graph_path, graph)?;
        println!("wrote {}", graph_path.display());
    }
    println!(
        "points {} (train {}, test {}), sigma {}",
        dataset.len(),
        dataset.train_points().len(),
        dataset.test_idx.len(),
        dataset.meta.sigma
    );
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let (form, dataset) = load_form_and_dataset(&args.data, &args.form)?;
    let config = TrainConfig {
        iterations: args.iterations,
        eta0: args.eta0,
        schedule: match args.schedule {
            ScheduleArg::Sqrt => StepSchedule::InvSqrt,
            ScheduleArg::Constant => StepSchedule::Constant,
            ScheduleArg::Linear => StepSchedule::Inv,
        },
        seed: args.seed,
        kkt_tol: args.kkt_tol,
        act_tol: args.act_tol,
        rule: match args.rule {
            RuleArg::Rule1 => RuleKind::Rule1,
            RuleArg::Rule2 => RuleKind::Rule2,
        },
        epsilon_scale: args.epsilon,
        max_perturb_tries: potgames::rules::DEFAULT_MAX_TRIES,
        eval_every: args.eval_every.max(1),
        theta_init: match &args.theta_init {
            Some(v) => ThetaInit::Given(DVector::from_row_slice(v)),
            None => ThetaInit::Random,
        },
        batch_size: args.batch,
        grad_clip: args.grad_clip,
        measure_timing: args.timing,
    };

    let stem = args.out.clone().unwrap_or_else(|| {
        PathBuf::from(format!("{}_run", args.data.with_extension("").display()))
    });

    let started = Instant::now();
    let (theta, log) = match learner::train(&form, &dataset, &config) {
        Ok(result) => result,
        Err(e) => {
            if let PgError::Training {
                dump: Some(dump), ..
            } = &e
            {
                let dump_path = stem.with_extension("failure.problem");
                let _ = fs::write(&dump_path, dump);
                eprintln!("failing problem dumped to {}", dump_path.display());
            }
            return Err(e.into());
        }
    };
    let wall = started.elapsed().as_secs_f64();

    let csv_path = stem.with_extension("csv");
    let summary_path = stem.with_extension("summary");
    fs::write(&csv_path, log.to_csv())?;
    fs::write(
        &summary_path,
        fileio::write_summary(&log, &config, &form.game),
    )?;
    println!("seed {}", config.seed);
    println!("wrote {}", csv_path.display());
    println!("wrote {}", summary_path.display());
    println!(
        "final theta {}",
        theta
            .theta
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    if let Some(last) = log.records.last() {
        println!("last test error {}", last.test_error);
    }
    println!(
        "degeneracy events {}, gradient clips {}, wall {:.3}s",
        log.events.len(),
        log.grad_clips,
        wall
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let (form, dataset) = load_form_and_dataset(&args.data, &args.form)?;
    let theta_v = if let Some(path) = &args.summary {
        fileio::parse_summary(&read_to_string(path)?)?.theta_final
    } else if let Some(values) = &args.theta {
        DVector::from_row_slice(values)
    } else if args.true_theta {
        dataset
            .theta_true
            .clone()
            .ok_or_else(|| CliError::usage("dataset carries no theta_true"))?
    } else {
        return Err(CliError::usage(
            "pass one of --summary, --theta, --true-theta",
        ));
    };
    if theta_v.len() != form.theta_dim() {
        return Err(CliError::usage(format!(
            "theta has {} components, form needs {}",
            theta_v.len(),
            form.theta_dim()
        )));
    }
    let theta = RationalityVector::with_bounds(theta_v, form.bounds());
    let test_points = dataset.test_points();
    if test_points.is_empty() {
        return Err(CliError::usage("dataset has an empty test split"));
    }
    let err = learner::evaluate_test_error(&form, &theta, &test_points)?;
    println!("test_error {err}");
    if let Some(out) = &args.out {
        fs::write(
            out,
            format!(
                "format_version 1\nkind eval\ngame {}\ntest_error {err}\ntheta {}\nend\n",
                form.game,
                theta
                    .theta
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
        )?;
        println!("wrote {}", out.display());
    }
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    if args.samples == 0 || args.h <= 0.0 || args.tol <= 0.0 {
        return Err(CliError::usage("--samples, --h and --tol must be positive"));
    }
    let (form, dataset) = load_form_and_dataset(&args.data, &args.form)?;
    if dataset.is_empty() {
        return Err(CliError::usage("dataset is empty"));
    }
    // Negative control: the implicit gradient sees a tampered parameter map
    // while the finite differences run on the loaded form.
    let adjoint_form = if args.corrupt_partials {
        let mut corrupted = form.clone();
        corrupted.c_theta.base *= 1.5;
        corrupted
    } else {
        form.clone()
    };
    let p = form.theta_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut report = String::new();
    report.push_str("format_version 1\nkind gradcheck\n");
    let mut compared = 0usize;
    let mut skipped_components = 0usize;
    let mut degenerate_used = 0usize;
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;

    let mut attempts = 0usize;
    let max_attempts = args.samples * 20;
    while compared < args.samples && attempts < max_attempts {
        attempts += 1;
        let raw = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal).abs());
        let theta = project_theta(&form.rationality(raw));
        let k = rng.gen_range(0..dataset.len());
        let point = &dataset.points[k];
        let problem = adjoint_form.assemble(&theta, &point.mu)?;
        let sol = match solve_potential(&problem, potgames::qp::DEFAULT_KKT_TOL) {
            Ok(sol) => sol,
            Err(_) => continue,
        };
        let (z_raw, _, w) =
            extract_active_sets(&problem, &sol.x, &sol.lambda, potgames::qp::DEFAULT_ACT_TOL);
        // At a degenerate face the gradient pins a maximal independent
        // subset of the tight rows (dependent rows stay tight on their own).
        let z = if w.is_empty() {
            z_raw
        } else {
            degenerate_used += 1;
            potgames::diffgrad::independent_active_subset(&problem, &sol.active)
        };
        let adjoint = potgames::diffgrad::grad_theta(&adjoint_form, &theta, &z, point)?;
        let fd = verify::finite_diff_grad(&form, &theta, point, args.h)?;
        let mut sample_worst: f64 = 0.0;
        for (j, component) in fd.iter().enumerate() {
            if !component.stable {
                skipped_components += 1;
                continue;
            }
            let rel = (component.value - adjoint[j]).abs() / (1.0 + adjoint[j].abs());
            sample_worst = sample_worst.max(rel);
        }
        worst = worst.max(sample_worst);
        let ok = sample_worst <= args.tol;
        if !ok {
            failures += 1;
        }
        report.push_str(&format!(
            "sample {compared} datapoint {k} rel_err {sample_worst} {}\n",
            if ok { "ok" } else { "FAIL" }
        ));
        compared += 1;
    }

    report.push_str(&format!(
        "compared {compared} skipped_components {skipped_components} degenerate_faces {degenerate_used}\n"
    ));
    report.push_str(&format!("worst_rel_err {worst}\ntol {}\n", args.tol));
    let pass = failures == 0 && compared > 0;
    report.push_str(if pass {
        "verdict pass\n"
    } else {
        "verdict fail\n"
    });
    report.push_str("end\n");
    print!("{report}");
    if let Some(out) = &args.out {
        fs::write(out, &report)?;
    }
    if compared == 0 {
        return Err(CliError::solver(
            "no non-degenerate sample could be checked",
        ));
    }
    if pass {
        Ok(0)
    } else {
        Ok(EXIT_VERIFY)
    }
}
