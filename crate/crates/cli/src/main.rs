mod output;
mod ranges;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use objflow_core::flow::{compare_regimes, CompareOptions, Task};
use objflow_core::ingest::{diagnose_path, ContinuumCuts, DiagnosticsOptions, Regime, DEFAULT_ASSUMPTION_CUT};
use objflow_core::objective::{thresholded, DEFAULT_GRID};
use objflow_core::plot::{Chart, Series};
use objflow_core::toy_train::{
    alpha_sweep, calibrate_budget, make_strong_flow_task, make_task, quantile_ablation, reversal_experiment,
    sweep_to_csv, train, AblationSide, MaskSource, ReversalConfig, ToyTask, TrainConfig, Winner,
};
use objflow_core::{verify, Objective, ObjectiveSpec};

use output::{csv_field, file_stem, Manifest, Outputs};

/// Seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "objflow", version, about = "Probability-based fine-tuning objectives: shapes, flow rates, toy training, log diagnostics")]
struct Cli {
    /// Output directory for CSV, SVG, JSON and manifest files
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,

    /// Worker threads for parallel runs (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gradient-weight curves W_f(p) for one or more objectives
    Shapes(ShapesArgs),
    /// Initial risk rates of two objectives on a task and the regime verdict
    Flow(FlowArgs),
    /// Train objectives on a toy task (or run the seeded reversal experiment)
    Train(TrainArgs),
    /// Convexity sweep over the (1 - p^alpha)/alpha family
    Sweep(SweepArgs),
    /// Hard-threshold ablation at base-model quantiles
    Ablate(AblateArgs),
    /// Diagnostics for a JSONL token-probability log
    Ingest(IngestArgs),
    /// Run the invariant and reproduction suite
    Verify(VerifyArgs),
}

fn objective_spec(s: &str) -> std::result::Result<ObjectiveSpec, String> {
    s.parse().map_err(|e: objflow_core::Error| e.to_string())
}

fn regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: objflow_core::Error| e.to_string())
}

#[derive(Args, Serialize)]
struct ShapesArgs {
    /// Objective specs, e.g. neg_log_p alpha:1 log_one_minus_p neg_p_pow:2 alpha:0.5@[0.1,1]
    #[arg(required = true, value_parser = objective_spec)]
    #[serde(serialize_with = "ser_specs")]
    objectives: Vec<ObjectiveSpec>,

    /// Number of interior grid points in the CSV
    #[arg(long, default_value_t = 999)]
    grid: usize,

    /// Grid used to locate the maximiser
    #[arg(long, default_value_t = DEFAULT_GRID)]
    argmax_grid: usize,
}

#[derive(Args, Serialize)]
struct FlowArgs {
    /// Task JSON file
    #[arg(long)]
    task: Option<PathBuf>,

    /// Two-context model-weak task with uniform predictions: V and noise rate
    #[arg(long, num_args = 2, value_names = ["V", "EPS"])]
    mw: Option<Vec<String>>,

    /// Seeded model-strong task with noise just above the sufficient bound
    #[arg(long)]
    ms: bool,

    /// Vocabulary size for --ms
    #[arg(long, default_value_t = 10)]
    vocab: usize,

    /// Base contexts for --ms (each is split into a clean and a flipped copy)
    #[arg(long, default_value_t = 50)]
    base_contexts: usize,

    /// Skip the finite-difference cross-check
    #[arg(long)]
    no_fd: bool,

    #[arg(value_parser = objective_spec)]
    #[serde(serialize_with = "ser_spec")]
    f1: ObjectiveSpec,

    #[arg(value_parser = objective_spec)]
    #[serde(serialize_with = "ser_spec")]
    f2: ObjectiveSpec,
}

#[derive(Args, Serialize, Clone)]
struct TaskArgs {
    /// Task JSON file; overrides the generator options
    #[arg(long)]
    task: Option<PathBuf>,

    /// Generated task regime: ms, mi or mw
    #[arg(long, default_value = "ms", value_parser = regime)]
    regime: Regime,

    #[arg(long, default_value_t = 20)]
    vocab: usize,

    #[arg(long, default_value_t = 200)]
    contexts: usize,

    /// Label noise rate of the generated task
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
}

#[derive(Args, Serialize, Clone)]
struct BudgetArgs {
    /// Fixed step count; when omitted the budget is calibrated on the task
    #[arg(long)]
    steps: Option<usize>,

    /// Cap for the calibrated budget
    #[arg(long, default_value_t = 200)]
    max_steps: usize,

    #[arg(long, default_value_t = 0.1)]
    lr: f64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MaskSourceArg {
    Base,
    Current,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,

    #[command(flatten)]
    budget: BudgetArgs,

    /// Objectives to train (repeatable); masks use the spec suffix @[lo,hi]
    #[arg(long = "objective", value_parser = objective_spec, default_values = ["neg_log_p", "alpha:1"])]
    #[serde(serialize_with = "ser_specs")]
    objectives: Vec<ObjectiveSpec>,

    /// Whether mask membership uses base-model or current probabilities
    #[arg(long, value_enum, default_value = "base")]
    mask_source: MaskSourceArg,

    #[arg(long, default_value_t = 1)]
    record_every: usize,

    /// Run the seeded -p versus -log p reversal on model-strong and model-weak tasks
    #[arg(long)]
    reversal: bool,

    /// Number of consecutive seeds for --reversal, starting at --seed
    #[arg(long, default_value_t = 10)]
    seeds: usize,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    task: TaskArgs,

    #[command(flatten)]
    budget: BudgetArgs,

    /// Alphas as numbers or start:end:step ranges
    #[arg(long, default_value = "0.1:1.0:0.1,1:10:1")]
    alphas: String,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SideArg {
    /// Keep tokens at or above the quantile
    #[value(name = "bottom_keep")]
    BottomKeep,
    /// Keep tokens at or below the quantile
    #[value(name = "top_keep")]
    TopKeep,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[command(flatten)]
    task: TaskArgs,

    #[command(flatten)]
    budget: BudgetArgs,

    #[arg(long, default_value = "neg_log_p", value_parser = objective_spec)]
    #[serde(serialize_with = "ser_spec")]
    objective: ObjectiveSpec,

    #[arg(long, value_enum, default_value = "bottom_keep")]
    side: SideArg,

    /// Percentiles in (0, 100], as numbers or start:end:step ranges
    #[arg(long, default_value = "5:100:5")]
    percentiles: String,
}

#[derive(Args, Serialize)]
struct IngestArgs {
    /// JSONL log with sample_id, token_index, prob and optional token_id
    path: PathBuf,

    #[arg(long, default_value = "10,50,90")]
    quantiles: String,

    /// Mean probability at or above which a log is model-strong
    #[arg(long, default_value_t = ContinuumCuts::default().strong)]
    strong_cut: f64,

    /// Mean probability at or below which a log is model-weak
    #[arg(long, default_value_t = ContinuumCuts::default().weak)]
    weak_cut: f64,

    #[arg(long, default_value_t = DEFAULT_ASSUMPTION_CUT)]
    assumption_cut: f64,

    /// Tokens held in memory before quantiles switch to a second pass over the file
    #[arg(long, default_value_t = 1_000_000)]
    memory_budget: usize,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    /// Smaller sample counts for a fast smoke run
    #[arg(long)]
    quick: bool,
}

fn ser_spec<S: serde::Serializer>(s: &ObjectiveSpec, ser: S) -> std::result::Result<S::Ok, S::Error> {
    ser.serialize_str(&s.to_string())
}

fn ser_specs<S: serde::Serializer>(s: &[ObjectiveSpec], ser: S) -> std::result::Result<S::Ok, S::Error> {
    ser.collect_seq(s.iter().map(|x| x.to_string()))
}

/// Bad arguments detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Marks a failure caused by input data.
#[derive(Debug)]
struct DataInput;

impl std::fmt::Display for DataInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("bad input data")
    }
}

/// Marks a run that completed but whose checks did not all pass.
#[derive(Debug)]
struct ChecksFailed(usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

/// Exit codes: 1 usage, 2 data, 3 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    use objflow_core::Error as E;
    if err.downcast_ref::<DataInput>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if cause.is::<ChecksFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Parameter(_) | E::Precondition(_) => 1,
                E::Dimension { .. } | E::Index { .. } | E::Parse { .. } | E::Task(_) | E::Io(_) | E::Json(_) => 2,
                E::Numerical(_) | E::Domain { .. } => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global()?;
    }
    match &cli.command {
        Command::Shapes(a) => cmd_shapes(&cli, a),
        Command::Flow(a) => cmd_flow(&cli, a),
        Command::Train(a) if a.reversal => cmd_reversal(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
        Command::Ablate(a) => cmd_ablate(&cli, a),
        Command::Ingest(a) => cmd_ingest(&cli, a),
        Command::Verify(a) => cmd_verify(&cli, a),
    }
}

fn finish<P: Serialize>(cli: &Cli, command: &'static str, params: P, mut out: Outputs) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cli.seed,
        params,
        outputs: out.names(),
    };
    out.add_json("manifest.json", &manifest)?;
    for p in out.write_all(&cli.out)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn interior_grid(n: usize) -> impl Iterator<Item = f64> {
    (1..=n).map(move |k| k as f64 / (n + 1) as f64)
}

fn spec_weight(spec: &ObjectiveSpec, p: f64) -> Result<f64> {
    Ok(match spec.mask {
        Some(m) => thresholded(spec.objective.clone(), m).weight(p)?,
        None => spec.objective.weight(p)?,
    })
}

fn cmd_shapes(cli: &Cli, a: &ShapesArgs) -> Result<()> {
    if a.grid == 0 || a.argmax_grid == 0 {
        return Err(usage("grid sizes must be positive"));
    }
    let names: Vec<String> = a.objectives.iter().map(|s| s.to_string()).collect();
    let mut csv = String::from("p");
    for n in &names {
        csv.push(',');
        csv.push_str(&csv_field(n));
    }
    csv.push('\n');
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(a.grid); names.len()];
    for p in interior_grid(a.grid) {
        csv.push_str(&format!("{p:?}"));
        for (k, spec) in a.objectives.iter().enumerate() {
            let w = spec_weight(spec, p)?;
            csv.push_str(&format!(",{w:?}"));
            series[k].push((p, w));
        }
        csv.push('\n');
    }

    let mut argmax_csv = String::from("objective,argmax,weight\n");
    let mut chart = Chart {
        title: "Gradient weight W_f(p)".into(),
        x_label: "p".into(),
        y_label: "W_f(p)".into(),
        vlines: vec![0.5],
        ..Default::default()
    };
    for (k, spec) in a.objectives.iter().enumerate() {
        let arg = match spec.mask {
            None => spec.objective.argmax_weight(a.argmax_grid)?,
            Some(_) => {
                let mut best = (f64::NEG_INFINITY, 0.0);
                for p in interior_grid(a.argmax_grid) {
                    let w = spec_weight(spec, p)?;
                    if w > best.0 {
                        best = (w, p);
                    }
                }
                best.1
            }
        };
        let w = spec_weight(spec, arg)?;
        println!("{:<24} argmax W = {arg:.6}  W = {w:.6}", names[k]);
        argmax_csv.push_str(&format!("{},{arg:?},{w:?}\n", csv_field(&names[k])));
        let mut s = Series::new(names[k].clone(), std::mem::take(&mut series[k]));
        s.marker = Some((arg, w));
        chart.series.push(s);
    }

    let mut out = Outputs::default();
    out.add("shapes.csv", csv);
    out.add("argmax.csv", argmax_csv);
    out.add("shapes.svg", chart.to_svg());
    finish(cli, "shapes", a, out)
}

fn unmasked<'a>(spec: &'a ObjectiveSpec, command: &str) -> Result<&'a Objective> {
    if spec.mask.is_some() {
        return Err(usage(format!("{command} does not take masked objectives ({spec})")));
    }
    Ok(&spec.objective)
}

#[derive(Serialize)]
struct FlowOutput<'a> {
    source: String,
    vocab: usize,
    eps: Option<f64>,
    eps_bound: Option<f64>,
    rate_difference: f64,
    report: &'a objflow_core::flow::FlowReport,
}

fn load_task(path: &Path) -> Result<Task> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read task {}", path.display()))
        .context(DataInput)?;
    Task::from_json(&text).with_context(|| format!("invalid task {}", path.display())).context(DataInput)
}

fn cmd_flow(cli: &Cli, a: &FlowArgs) -> Result<()> {
    let sources = a.task.is_some() as u8 + a.mw.is_some() as u8 + a.ms as u8;
    if sources != 1 {
        return Err(usage("flow needs exactly one of --task, --mw V EPS, --ms"));
    }
    let f1 = unmasked(&a.f1, "flow")?;
    let f2 = unmasked(&a.f2, "flow")?;
    let (task, source, eps, bound) = if let Some(p) = &a.task {
        (load_task(p)?, p.display().to_string(), None, None)
    } else if let Some(mw) = &a.mw {
        let v: usize = mw[0].parse().map_err(|_| usage(format!("--mw: bad vocabulary size {:?}", mw[0])))?;
        let e: f64 = mw[1].parse().map_err(|_| usage(format!("--mw: bad noise rate {:?}", mw[1])))?;
        (Task::model_weak(v, e)?, format!("model_weak V={v} eps={e}"), Some(e), None)
    } else {
        let s = make_strong_flow_task(a.vocab, a.base_contexts, cli.seed, f1, f2)?;
        (s.task, format!("model_strong V={} base={} seed={}", a.vocab, a.base_contexts, cli.seed), Some(s.eps), Some(s.eps_bound))
    };
    let opts = CompareOptions { finite_difference: !a.no_fd, ..Default::default() };
    let report = compare_regimes(&task, f1, f2, &opts)?;
    let diff = report.rate_f1 - report.rate_f2;
    println!("rate {:<20} {:.12}", report.f1, report.rate_f1);
    println!("rate {:<20} {:.12}", report.f2, report.rate_f2);
    println!("rate difference          {diff:.12}");
    println!("regime {:?}, ordering holds: {}", report.regime, report.ordering_holds);

    let fmt_opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    let csv = format!(
        "objective,rate,fd_rate\n{},{:?},{}\n{},{:?},{}\n",
        csv_field(&report.f1),
        report.rate_f1,
        fmt_opt(report.fd_rate_f1),
        csv_field(&report.f2),
        report.rate_f2,
        fmt_opt(report.fd_rate_f2)
    );
    let mut out = Outputs::default();
    out.add("flow.csv", csv);
    out.add_json(
        "flow.json",
        &FlowOutput { source, vocab: task.vocab(), eps, eps_bound: bound, rate_difference: diff, report: &report },
    )?;
    out.add("task.json", task.to_json()? + "\n");
    finish(cli, "flow", a, out)
}

fn build_task(cli: &Cli, t: &TaskArgs) -> Result<ToyTask> {
    match &t.task {
        Some(p) => Ok(ToyTask::from_task(&load_task(p)?)),
        None => Ok(make_task(t.regime, t.vocab, t.contexts, t.eps, cli.seed)?),
    }
}

#[derive(Serialize)]
struct Budget {
    steps: usize,
    source: &'static str,
}

fn resolve_budget(task: &ToyTask, b: &BudgetArgs) -> Result<Budget> {
    if let Some(s) = b.steps {
        return Ok(Budget { steps: s, source: "fixed" });
    }
    Ok(match calibrate_budget(task, b.lr, b.max_steps)? {
        Some(s) => Budget { steps: s, source: "calibrated" },
        None => Budget { steps: b.max_steps, source: "max_steps" },
    })
}

#[derive(Serialize)]
struct RunParams<'a, A: Serialize> {
    #[serde(flatten)]
    args: &'a A,
    resolved_budget: Budget,
    n_contexts: usize,
    realised_eps: f64,
    mean_true_prob: f64,
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let task = build_task(cli, &a.task)?;
    let budget = resolve_budget(&task, &a.budget)?;
    let mask_source = match a.mask_source {
        MaskSourceArg::Base => MaskSource::Base,
        MaskSourceArg::Current => MaskSource::Current,
    };
    let reports = a
        .objectives
        .par_iter()
        .map(|spec| {
            let cfg = TrainConfig {
                steps: budget.steps,
                lr: a.budget.lr,
                mask: spec.mask,
                mask_source,
                record_every: a.record_every,
            };
            train(&task, &spec.objective, &cfg)
        })
        .collect::<objflow_core::Result<Vec<_>>>()?;

    let mut out = Outputs::default();
    let mut summary = String::from("objective,steps,accuracy_final,likelihood_final,loss_final\n");
    let mut acc_chart = Chart {
        title: "Expected accuracy during training".into(),
        x_label: "step".into(),
        y_label: "accuracy".into(),
        ..Default::default()
    };
    for (k, (spec, r)) in a.objectives.iter().zip(&reports).enumerate() {
        let name = spec.to_string();
        println!("{name:<24} accuracy {:.6}  likelihood {:.6}", r.accuracy_final, r.likelihood_final);
        summary.push_str(&format!(
            "{},{},{:?},{:?},{:?}\n",
            csv_field(&name),
            r.steps,
            r.accuracy_final,
            r.likelihood_final,
            r.loss_final
        ));
        out.add(format!("curve_{k}_{}.csv", file_stem(&name)), r.to_csv());
        acc_chart.series.push(Series::new(name, r.curve.iter().map(|p| (p.step as f64, p.accuracy)).collect()));
    }
    out.add("summary.csv", summary);
    out.add("curves.svg", acc_chart.to_svg());
    out.add("task.json", task.to_task()?.to_json()? + "\n");
    let params = RunParams {
        args: a,
        n_contexts: task.n_contexts(),
        realised_eps: task.eps,
        mean_true_prob: task.mean_true_prob(),
        resolved_budget: budget,
    };
    finish(cli, "train", params, out)
}

fn cmd_reversal(cli: &Cli, a: &TrainArgs) -> Result<()> {
    if a.task.task.is_some() {
        return Err(usage("--reversal generates its own tasks; drop --task"));
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| cli.seed + k).collect();
    let cfg = ReversalConfig::new(a.task.vocab, a.task.contexts, a.task.eps, seeds, a.budget.max_steps, a.budget.lr);
    let s = reversal_experiment(&cfg)?;
    #[derive(Serialize)]
    struct Counts {
        regime: &'static str,
        leaning_wins: usize,
        averse_wins: usize,
        ties: usize,
    }
    let counts: Vec<Counts> = [Regime::ModelStrong, Regime::ModelWeak]
        .into_iter()
        .map(|r| Counts {
            regime: r.short(),
            leaning_wins: s.wins(r, Winner::PriorLeaning),
            averse_wins: s.wins(r, Winner::PriorAverse),
            ties: s.wins(r, Winner::Tie),
        })
        .collect();
    for c in &counts {
        println!(
            "{}: {} wins {}, {} wins {}, ties {}",
            c.regime, s.leaning, c.leaning_wins, s.averse, c.averse_wins, c.ties
        );
    }
    let mut out = Outputs::default();
    out.add("reversal.csv", s.to_csv());
    out.add_json("reversal.json", &counts)?;
    finish(cli, "train --reversal", a, out)
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let alphas = ranges::parse_list(&a.alphas).map_err(|e| usage(format!("--alphas: {e}")))?;
    if let Some(bad) = alphas.iter().find(|&&x| x <= 0.0) {
        return Err(usage(format!("--alphas: alpha must be positive, got {bad}")));
    }
    let task = build_task(cli, &a.task)?;
    let budget = resolve_budget(&task, &a.budget)?;
    let rows = alpha_sweep(&task, &alphas, budget.steps, a.budget.lr)?;
    for r in &rows {
        println!("alpha {:<6} accuracy {:.6}  likelihood {:.6}", r.alpha, r.accuracy, r.likelihood);
    }
    let chart = Chart {
        title: "Convexity sweep".into(),
        x_label: "alpha".into(),
        y_label: "final value".into(),
        series: vec![
            Series::new("accuracy", rows.iter().map(|r| (r.alpha, r.accuracy)).collect()),
            Series::new("likelihood", rows.iter().map(|r| (r.alpha, r.likelihood)).collect()),
        ],
        vlines: vec![1.0],
    };
    let mut out = Outputs::default();
    out.add("sweep.csv", sweep_to_csv(&rows));
    out.add("sweep.svg", chart.to_svg());
    let params = RunParams {
        args: a,
        n_contexts: task.n_contexts(),
        realised_eps: task.eps,
        mean_true_prob: task.mean_true_prob(),
        resolved_budget: budget,
    };
    finish(cli, "sweep", params, out)
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let f = unmasked(&a.objective, "ablate")?;
    let percentiles = ranges::parse_list(&a.percentiles).map_err(|e| usage(format!("--percentiles: {e}")))?;
    if let Some(bad) = percentiles.iter().find(|&&p| !(p > 0.0 && p <= 100.0)) {
        return Err(usage(format!("--percentiles: {bad} is outside (0, 100]")));
    }
    let side = match a.side {
        SideArg::BottomKeep => AblationSide::BottomKeep,
        SideArg::TopKeep => AblationSide::TopKeep,
    };
    let task = build_task(cli, &a.task)?;
    let budget = resolve_budget(&task, &a.budget)?;
    let ab = quantile_ablation(&task, f, &percentiles, side, budget.steps, a.budget.lr)?;
    println!("unmasked {:<16} accuracy {:.6}", ab.objective, ab.baseline_accuracy);
    for r in &ab.rows {
        println!(
            "P{:<5} I=[{:.4},{:.4}] kept {:.3} accuracy {:.6}",
            r.percentile, r.lo, r.hi, r.kept_fraction, r.accuracy
        );
    }
    let xs: Vec<f64> = ab.rows.iter().map(|r| r.percentile).collect();
    let chart = Chart {
        title: "Quantile threshold ablation".into(),
        x_label: "percentile P".into(),
        y_label: "final accuracy".into(),
        series: vec![
            Series::new("thresholded", ab.rows.iter().map(|r| (r.percentile, r.accuracy)).collect()),
            Series::new("unmasked", xs.iter().map(|&x| (x, ab.baseline_accuracy)).collect()),
        ],
        vlines: vec![],
    };
    let mut out = Outputs::default();
    out.add("ablation.csv", ab.to_csv());
    out.add("ablation.svg", chart.to_svg());
    out.add_json("ablation.json", &ab)?;
    let params = RunParams {
        args: a,
        n_contexts: task.n_contexts(),
        realised_eps: task.eps,
        mean_true_prob: task.mean_true_prob(),
        resolved_budget: budget,
    };
    finish(cli, "ablate", params, out)
}

fn cmd_ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let percentiles = ranges::parse_list(&a.quantiles).map_err(|e| usage(format!("--quantiles: {e}")))?;
    if a.weak_cut.partial_cmp(&a.strong_cut) != Some(std::cmp::Ordering::Less) {
        return Err(usage("--weak-cut must be below --strong-cut"));
    }
    let opts = DiagnosticsOptions {
        percentiles,
        cuts: ContinuumCuts { strong: a.strong_cut, weak: a.weak_cut },
        assumption_cut: a.assumption_cut,
        memory_budget: a.memory_budget,
    };
    let diag = diagnose_path(&a.path, &opts)
        .with_context(|| format!("cannot diagnose {}", a.path.display()))
        .context(DataInput)?;
    println!("{}", serde_json::to_string_pretty(&diag)?);
    let mut out = Outputs::default();
    out.add_json("diagnostics.json", &diag)?;
    finish(cli, "ingest", a, out)
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> Result<()> {
    let results = verify::run_all(a.quick);
    for c in &results {
        println!("{} {:<24} {:>8.3}s  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    let mut out = Outputs::default();
    out.add_json("verify.json", &results)?;
    finish(cli, "verify", a, out)?;
    if failed > 0 {
        bail!(ChecksFailed(failed));
    }
    Ok(())
}
