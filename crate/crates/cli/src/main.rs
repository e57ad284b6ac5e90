use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use factorshift::analysis::{
    all_themes, classify_interaction, compare_paired, drops_with_tol, holm, paired_csv, theme_aggregate,
    theme_means_csv, themes_csv, AccuracyTable, DEFAULT_ADDITIVITY_TOL,
};
use factorshift::driving_sim::SimParams;
use factorshift::factor_space::{enumerate_space, parse_tag, parse_tag_list, shell, Axis, EnvConfig, IdSupport};
use factorshift::policies::{ClipSpec, Driver, Expert, FrozenEncoder, Policy, PolicyKind};
use factorshift::rollout_eval::{evaluate, read_outcomes_by_tag, EvalOptions, EvalTable, EVAL_HEADER};
use factorshift::split_builder::{build_suite_with, check_leakage, SuiteOptions, TestSuite, DEFAULT_ROUTE_SET};
use factorshift::study_harness::{run_study, StudyOptions, StudySpec};
use factorshift::trainer::{collect_demos, train, DemoDataset, LossWeights, TrainConfig, DEFAULT_STEER_WEIGHT};

/// Factorized out-of-distribution evaluation of closed-loop driving policies.
#[derive(Parser, Debug)]
#[command(name = "factorshift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect the factor space.
    #[command(subcommand)]
    Space(SpaceCmd),
    /// Print the configurations at Hamming distance k from a support.
    Shell {
        /// ID support, tags separated by ',' or '+'.
        #[arg(long)]
        support: String,
        #[arg(long)]
        k: usize,
    },
    /// Build or check matched-budget test suites.
    #[command(subcommand)]
    Suite(SuiteCmd),
    /// Expert demonstrations.
    #[command(subcommand)]
    Demos(DemosCmd),
    /// Fit a policy to demonstrations.
    Train(TrainArgs),
    /// Run a policy on a suite and write the evaluation table.
    Eval(EvalArgs),
    /// Drops, themes, interactions and paired statistics.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Run a study recipe.
    #[command(subcommand)]
    Study(StudyCmd),
    /// Emit every analysis table for an evaluation.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand, Debug)]
enum SpaceCmd {
    /// All configurations, one tag per line, in canonical order.
    Enumerate,
}

#[derive(Subcommand, Debug)]
enum SuiteCmd {
    Build {
        #[arg(long)]
        support: String,
        /// Comma-separated shell radii; 0 is always included.
        #[arg(long, default_value = "1,2,3")]
        ks: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = DEFAULT_ROUTE_SET)]
        route_set: String,
        #[arg(long, default_value_t = 10)]
        route_pool: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify shell distances and ID/OOD separation.
    Check { suite: PathBuf },
}

#[derive(Subcommand, Debug)]
enum DemosCmd {
    Collect {
        #[arg(long)]
        support: String,
        #[arg(long, default_value_t = 5)]
        traces: usize,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    demos: PathBuf,
    /// linear, mlp, frozen_encoder_head or recurrent.
    #[arg(long)]
    kind: String,
    /// Seed of the frozen encoder for the encoder-head tier.
    #[arg(long)]
    encoder_seed: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = DEFAULT_STEER_WEIGHT)]
    steer_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    throttle_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the training manifest; defaults next to the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, conflicts_with = "expert", required_unless_present = "expert")]
    policy: Option<PathBuf>,
    /// Evaluate the privileged expert instead of a checkpoint.
    #[arg(long)]
    expert: bool,
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    episodes_out: Option<PathBuf>,
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Record mean inference time; makes the table non-reproducible.
    #[arg(long)]
    timing: bool,
    /// Worker threads, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Per-row drops and per-k means relative to a baseline row.
    Drops {
        #[command(flatten)]
        table: TableArgs,
        /// Also write per-k means here.
        #[arg(long)]
        per_k_out: Option<PathBuf>,
    },
    /// Mean drop grouped by the set of changed axes.
    Themes {
        #[command(flatten)]
        table: TableArgs,
        /// Axes of one theme, e.g. scene,time; all themes when omitted.
        #[arg(long)]
        theme: Option<String>,
        /// Write member rows here; the means go to standard output.
        #[arg(long)]
        members_out: Option<PathBuf>,
    },
    /// Classify a combined drop against its single-factor drops, or every
    /// multi-axis row of a table.
    Interactions {
        #[arg(long, requires = "combo", conflicts_with = "table")]
        singles: Option<String>,
        #[arg(long)]
        combo: Option<f64>,
        #[arg(long, requires = "baseline")]
        table: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value_t = DEFAULT_ADDITIVITY_TOL)]
        tol: f64,
    },
    /// Paired tests between two episode files, or Holm on given p-values.
    Stats {
        #[arg(long, requires = "b", conflicts_with = "p_values", required_unless_present = "p_values")]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        p_values: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

#[derive(Args, Debug)]
struct TableArgs {
    /// Evaluation table or accuracy table (policy,tag,k,accuracy).
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    baseline: String,
    #[arg(long, default_value_t = DEFAULT_ADDITIVITY_TOL)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum StudyCmd {
    Run {
        spec: PathBuf,
        /// Overrides the recipe's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the recipe's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

#[derive(Subcommand, Debug)]
enum ReportCmd {
    Emit {
        #[command(flatten)]
        table: TableArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Exit status 1: bad input. Exit status 2: failure while running.
enum Failure {
    Invalid(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn invalid(e: impl ToString) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write(path: &Path, body: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn emit(path: Option<&Path>, body: &str) -> Outcome {
    match path {
        Some(p) => write(p, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn support(tags: &str) -> Result<IdSupport, Failure> {
    let members = parse_tag_list(tags).map_err(invalid)?;
    IdSupport::new(members).map_err(invalid)
}

fn tag(s: &str) -> Result<EnvConfig, Failure> {
    parse_tag(s).map_err(|e| invalid(format!("{s:?}: {e}")))
}

fn numbers<T: std::str::FromStr>(list: &str, what: &str) -> Result<Vec<T>, Failure> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| invalid(format!("bad {what} {s:?}"))))
        .collect()
}

/// Accepts both evaluation tables and accuracy tables.
fn load_accuracy(path: &Path) -> Result<AccuracyTable, Failure> {
    let text = read(path)?;
    if text.lines().next() == Some(EVAL_HEADER) {
        let t = EvalTable::from_csv(&text).map_err(invalid)?;
        AccuracyTable::from_eval(&t).map_err(invalid)
    } else {
        AccuracyTable::from_csv(&text).map_err(invalid)
    }
}

fn drop_report(args: &TableArgs) -> Result<factorshift::analysis::DropReport, Failure> {
    let table = load_accuracy(&args.table)?;
    drops_with_tol(&table, &tag(&args.baseline)?, args.tol).map_err(invalid)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Space(SpaceCmd::Enumerate) => {
            for c in enumerate_space() {
                println!("{c}");
            }
            Ok(())
        }
        Command::Shell { support: s, k } => {
            for c in shell(&support(&s)?, k) {
                println!("{c}");
            }
            Ok(())
        }
        Command::Suite(SuiteCmd::Build { support: s, ks, episodes, seed, route_set, route_pool, out }) => {
            let mut ks: Vec<usize> = numbers(&ks, "k")?;
            ks.push(0);
            ks.sort_unstable();
            ks.dedup();
            let opts = SuiteOptions { route_set_id: route_set, route_pool_size: route_pool };
            let suite = build_suite_with(&support(&s)?, &ks, episodes, seed, &opts).map_err(invalid)?;
            write(&out, &suite.to_json())?;
            eprintln!("{} configs, {} episodes", suite.config_count(), suite.slots().len());
            Ok(())
        }
        Command::Suite(SuiteCmd::Check { suite }) => {
            let suite = TestSuite::from_json(&read(&suite)?).map_err(invalid)?;
            let report = check_leakage(&suite);
            if report.is_clean() {
                println!("OK");
                Ok(())
            } else {
                for v in &report.violations {
                    println!("{v}");
                }
                Err(invalid(format!("{} violations", report.violations.len())))
            }
        }
        Command::Demos(DemosCmd::Collect { support: s, traces, frames, stride, seed, out }) => {
            if traces == 0 {
                return Err(invalid("traces must be at least 1"));
            }
            let clip = ClipSpec::new(frames, stride).map_err(invalid)?;
            let data = collect_demos(&support(&s)?, traces, clip, seed, &SimParams::default());
            write(&out, &data.to_json())?;
            eprintln!("{} traces, {} samples", data.trace_count(), data.sample_count());
            Ok(())
        }
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(cmd) => run_analyze(cmd),
        Command::Study(StudyCmd::Run { spec, out, seed, jobs }) => {
            let mut spec = StudySpec::from_toml(&read(&spec)?).map_err(invalid)?;
            if let Some(o) = out {
                spec.output_dir = o;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let result = run_study(&spec, &StudyOptions { jobs, ..StudyOptions::default() }).map_err(runtime)?;
            for p in &result.points {
                match &p.result {
                    Ok(_) => println!("{} ok", p.point.dir_name()),
                    Err(e) => println!("{} failed: {e}", p.point.dir_name()),
                }
            }
            if result.failures() > 0 {
                return Err(runtime(format!("{} grid points failed", result.failures())));
            }
            Ok(())
        }
        Command::Report(ReportCmd::Emit { table, out_dir }) => {
            let accuracy = load_accuracy(&table.table)?;
            let report = drops_with_tol(&accuracy, &tag(&table.baseline)?, table.tol).map_err(invalid)?;
            let themes = all_themes(&report);
            let files = [
                ("accuracy.csv", accuracy.to_csv()),
                ("drops.csv", report.rows_csv()),
                ("per_k.csv", report.per_k_csv()),
                ("interactions.csv", report.interactions_csv()),
                ("themes.csv", themes_csv(&themes)),
                ("theme_means.csv", theme_means_csv(&themes)),
            ];
            for (name, body) in files {
                write(&out_dir.join(name), &body)?;
            }
            println!("{}", out_dir.display());
            Ok(())
        }
    }
}

fn run_train(a: TrainArgs) -> Outcome {
    let kind: PolicyKind = a.kind.parse().map_err(invalid)?;
    let data = DemoDataset::from_json(&read(&a.demos)?).map_err(invalid)?;
    let encoder = match (kind, a.encoder_seed) {
        (PolicyKind::FrozenEncoderHead, None) => return Err(invalid("frozen_encoder_head needs --encoder-seed")),
        (_, s) => s.map(FrozenEncoder::new),
    };
    let policy = Policy::new(kind, data.clip, encoder, a.seed).map_err(invalid)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        max_epochs: a.epochs,
        early_stop_patience: a.patience,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(invalid)?;
    let w = LossWeights { steer: a.steer_weight, throttle: a.throttle_weight };
    w.validate().map_err(invalid)?;
    let outcome = train(&policy, &data, &cfg, w).map_err(runtime)?;
    write(&a.out, &outcome.policy.to_json())?;
    let manifest = a.manifest.unwrap_or_else(|| a.out.with_extension("manifest.txt"));
    write(&manifest, &outcome.report.manifest())?;
    eprintln!("best validation loss {:.6} at step {}", outcome.report.best_val_loss, outcome.report.best_step);
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let suite = TestSuite::from_json(&read(&a.suite)?).map_err(invalid)?;
    let policy;
    let driver: &dyn Driver = match &a.policy {
        Some(p) => {
            policy = Policy::from_json(&read(p)?).map_err(invalid)?;
            &policy
        }
        None => &Expert,
    };
    let opts = EvalOptions { jobs: a.jobs, timing: a.timing, log_dir: a.log_dir, ..EvalOptions::default() };
    let table = evaluate(driver, &suite, &opts).map_err(runtime)?;
    write(&a.out, &table.to_csv())?;
    if let Some(p) = a.episodes_out {
        write(&p, &table.episodes_csv())?;
    }
    Ok(())
}

fn run_analyze(cmd: AnalyzeCmd) -> Outcome {
    match cmd {
        AnalyzeCmd::Drops { table, per_k_out } => {
            let report = drop_report(&table)?;
            emit(table.out.as_deref(), &report.rows_csv())?;
            if let Some(p) = per_k_out {
                write(&p, &report.per_k_csv())?;
            }
            Ok(())
        }
        AnalyzeCmd::Themes { table, theme, members_out } => {
            let report = drop_report(&table)?;
            let themes = match theme {
                Some(t) => {
                    let axes: Vec<Axis> = numbers(&t, "axis")?;
                    vec![theme_aggregate(&report, &axes)]
                }
                None => all_themes(&report),
            };
            if let Some(p) = members_out {
                write(&p, &themes_csv(&themes))?;
            }
            emit(table.out.as_deref(), &theme_means_csv(&themes))
        }
        AnalyzeCmd::Interactions { singles: Some(s), combo: Some(c), tol, .. } => {
            let singles: Vec<f64> = numbers(&s, "drop")?;
            println!("{}", classify_interaction(&singles, c, tol).map_err(invalid)?);
            Ok(())
        }
        AnalyzeCmd::Interactions { table: Some(t), baseline: Some(b), tol, .. } => {
            let args = TableArgs { table: t, baseline: b, tol, out: None };
            print!("{}", drop_report(&args)?.interactions_csv());
            Ok(())
        }
        AnalyzeCmd::Interactions { .. } => Err(invalid("give --singles with --combo, or --table with --baseline")),
        AnalyzeCmd::Stats { a: Some(a), b: Some(b), alpha, .. } => {
            let xa = read_outcomes_by_tag(&read(&a)?).map_err(invalid)?;
            let xb = read_outcomes_by_tag(&read(&b)?).map_err(invalid)?;
            let rows = compare_paired(&xa, &xb, alpha).map_err(invalid)?;
            print!("{}", paired_csv(&rows));
            Ok(())
        }
        AnalyzeCmd::Stats { p_values: Some(p), alpha, .. } => {
            let p: Vec<f64> = numbers(&p, "p-value")?;
            let flags = holm(&p, alpha).map_err(invalid)?;
            println!("p_value,holm_reject");
            for (v, f) in p.iter().zip(flags) {
                println!("{v},{f}");
            }
            Ok(())
        }
        AnalyzeCmd::Stats { .. } => Err(invalid("give --a with --b, or --p-values")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
