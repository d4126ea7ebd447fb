//! Command-line driver: configures and runs the benchmark problems, writes
//! machine-readable trace CSVs and summary JSONs, and hosts the verification
//! subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use semired::model::{SeparableModel, SeparableProblem};
use semired::optimizer::{
    projected_gradient_norm, run, LinearSolver, OptimizerConfig, RunStatus, RunTrace,
};
use semired::problems::{
    gen_deconv, gen_expsum, gen_toy, DeconvConfig, ExpSumConfig, ExpSumLoss, ExpSumModel,
    ProblemInstance, ToyConfig,
};
use semired::varpro::{equivalence_run, EquivalenceMode, HessianModel};
use semired::LossModel;

#[derive(Parser)]
#[command(name = "semired", about = "Semi-reduced Newton-type solver harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write trace/summary files.
    Run(RunArgs),
    /// Run the variable-projection equivalence suite.
    VerifyVarpro {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-validate a trace CSV (monotone objective, well-formed rows).
    CheckTrace { file: PathBuf },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum ProblemKind {
    Expsum,
    Deconv,
    Toy,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum SolverFlag {
    FullQr,
    BlockQr,
    BlockdiagQr,
    MixedCgDirect,
    FullCg,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum LossFlag {
    Poisson,
    WeightedLs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    problem: Option<ProblemKind>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Block Gaussian elimination of the Newton system (selects the block
    /// solver family); overridden by an explicit --solver.
    #[arg(long)]
    elimination: Option<OnOff>,
    /// Block trial-point adjustment inside the line search.
    #[arg(long)]
    adjust: Option<OnOff>,
    #[arg(long)]
    solver: Option<SolverFlag>,
    /// Loss for the exponential-sum problem.
    #[arg(long)]
    loss: Option<LossFlag>,
    /// Valley-flatness ratio for the toy problem.
    #[arg(long)]
    rho: Option<f64>,
    /// Seeds: a comma list "1,2,3" or an inclusive range "1..20".
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file mirroring the flags; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Fully resolved experiment description (file config overlaid by flags).
struct Spec {
    problem: ProblemKind,
    preset: Preset,
    elimination: bool,
    adjust: bool,
    solver: Option<SolverFlag>,
    loss: LossFlag,
    rho: f64,
    seeds: Vec<u64>,
    out: PathBuf,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad seed range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad seed range end: {e}"))?;
        if b < a {
            return Err(format!("empty seed range {a}..{b}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|e| format!("bad seed '{t}': {e}")))
        .collect()
}

fn enum_from_str<T: ValueEnum>(s: &str, what: &str) -> Result<T, String> {
    T::from_str(s, true).map_err(|_| format!("invalid {what}: {s}"))
}

fn resolve_spec(args: &RunArgs) -> Result<Spec, String> {
    let file: serde_json::Value = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("config is not valid JSON: {e}"))?
        }
        None => serde_json::Value::Null,
    };
    let file_str = |key: &str| file.get(key).and_then(|v| v.as_str().map(str::to_string));

    let problem = match (&args.problem, file_str("problem")) {
        (Some(p), _) => *p,
        (None, Some(s)) => enum_from_str(&s, "problem")?,
        (None, None) => return Err("missing --problem (or \"problem\" in the config file)".into()),
    };
    let preset = match (&args.preset, file_str("preset")) {
        (Some(p), _) => *p,
        (None, Some(s)) => enum_from_str(&s, "preset")?,
        (None, None) => Preset::Desk,
    };
    let elimination = match (&args.elimination, file_str("elimination")) {
        (Some(v), _) => *v == OnOff::On,
        (None, Some(s)) => enum_from_str::<OnOff>(&s, "elimination")? == OnOff::On,
        (None, None) => true,
    };
    let adjust = match (&args.adjust, file_str("adjust")) {
        (Some(v), _) => *v == OnOff::On,
        (None, Some(s)) => enum_from_str::<OnOff>(&s, "adjust")? == OnOff::On,
        (None, None) => false,
    };
    let solver = match (&args.solver, file_str("solver")) {
        (Some(v), _) => Some(*v),
        (None, Some(s)) => Some(enum_from_str(&s, "solver")?),
        (None, None) => None,
    };
    let loss = match (&args.loss, file_str("loss")) {
        (Some(v), _) => *v,
        (None, Some(s)) => enum_from_str(&s, "loss")?,
        (None, None) => LossFlag::Poisson,
    };
    let rho = match (args.rho, file.get("rho").and_then(|v| v.as_f64())) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 1e-6,
    };
    let seeds = match (&args.seeds, file_str("seeds")) {
        (Some(s), _) => parse_seeds(s)?,
        (None, Some(s)) => parse_seeds(&s)?,
        (None, None) => vec![1],
    };
    let out = match (&args.out, file_str("out")) {
        (Some(p), _) => p.clone(),
        (None, Some(s)) => PathBuf::from(s),
        (None, None) => PathBuf::from("out"),
    };

    let spec =
        Spec { problem, preset, elimination, adjust, solver, loss, rho, seeds, out };
    validate_spec(&spec)?;
    Ok(spec)
}

fn validate_spec(spec: &Spec) -> Result<(), String> {
    if let Some(solver) = spec.solver {
        let dense = matches!(
            solver,
            SolverFlag::FullQr | SolverFlag::BlockQr | SolverFlag::BlockdiagQr
        );
        match spec.problem {
            ProblemKind::Deconv if dense => {
                return Err(format!(
                    "solver {solver:?} needs dense Jacobian blocks; the deconvolution \
                     operator only supports mixed-cg-direct or full-cg"
                ));
            }
            ProblemKind::Expsum | ProblemKind::Toy if !dense => {
                return Err(format!(
                    "solver {solver:?} is the large-scale operator path; use a QR \
                     solver for this problem"
                ));
            }
            _ => {}
        }
    }
    if spec.loss == LossFlag::WeightedLs && spec.problem != ProblemKind::Expsum {
        return Err("--loss only applies to the expsum problem".into());
    }
    if !(spec.rho > 0.0 && spec.rho <= 1.0) {
        return Err(format!("rho must lie in (0, 1], got {}", spec.rho));
    }
    if spec.seeds.is_empty() {
        return Err("at least one seed is required".into());
    }
    Ok(())
}

fn chosen_solver(spec: &Spec) -> LinearSolver {
    if let Some(s) = spec.solver {
        return match s {
            SolverFlag::FullQr => LinearSolver::FullQr,
            SolverFlag::BlockQr => LinearSolver::BlockQr,
            SolverFlag::BlockdiagQr => LinearSolver::BlockdiagQr,
            SolverFlag::MixedCgDirect => LinearSolver::MixedCgDirect,
            SolverFlag::FullCg => LinearSolver::FullCg,
        };
    }
    match (spec.problem, spec.elimination) {
        (ProblemKind::Deconv, true) => LinearSolver::MixedCgDirect,
        (ProblemKind::Deconv, false) => LinearSolver::FullCg,
        (_, true) => LinearSolver::BlockdiagQr,
        (_, false) => LinearSolver::FullQr,
    }
}

fn optimizer_config(spec: &Spec) -> OptimizerConfig {
    let mut cfg = OptimizerConfig {
        linear_solver: chosen_solver(spec),
        adjust_k_max: if spec.adjust { 5 } else { 0 },
        ..Default::default()
    };
    match spec.problem {
        ProblemKind::Toy => {
            // the toy valley floor is far flatter than the default gradient
            // floor; a tight explicit tolerance lets runs ride it down
            cfg.tau = Some(1e-19);
            cfg.k_max_outer = 50;
        }
        ProblemKind::Deconv => {
            cfg.k_max_outer = 100;
        }
        ProblemKind::Expsum => {
            cfg.k_max_outer = 200;
        }
    }
    cfg
}

fn instance_for(spec: &Spec, seed: u64) -> ProblemInstance {
    match spec.problem {
        ProblemKind::Expsum => {
            let mut cfg = match spec.preset {
                Preset::Desk => ExpSumConfig::desk(seed),
                Preset::Paper => ExpSumConfig::paper(seed),
            };
            cfg.loss = match spec.loss {
                LossFlag::Poisson => ExpSumLoss::Poisson,
                LossFlag::WeightedLs => ExpSumLoss::WeightedLs,
            };
            gen_expsum(&cfg)
        }
        ProblemKind::Deconv => {
            let cfg = match spec.preset {
                Preset::Desk => DeconvConfig::desk(seed),
                Preset::Paper => DeconvConfig::paper(seed),
            };
            gen_deconv(&cfg)
        }
        ProblemKind::Toy => gen_toy(&ToyConfig::new(spec.rho)),
    }
}

fn trace_csv(trace: &RunTrace) -> String {
    let mut s = String::from(
        "iter,f,proj_grad_norm,lambda,step_exp,backtracks,inner_iters,cpu_ms,active_count\n",
    );
    for r in &trace.records {
        writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{},{},{},{:.3},{}",
            r.k,
            r.f,
            r.proj_grad_norm,
            r.lambda,
            r.step_exponent,
            r.n_backtracks,
            r.n_inner_adjust_iters,
            r.cpu_time_ms,
            r.active_count
        )
        .unwrap();
    }
    s
}

fn status_str(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Converged => "converged",
        RunStatus::IterationCap => "iteration-cap",
        RunStatus::LineSearchFailure => "line-search-failure",
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_abs_deviation(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    median(&mut dev)
}

struct SeedResult {
    seed: u64,
    status: RunStatus,
    n_steps: usize,
    final_f: f64,
    final_pg: f64,
    error_to_truth: Option<f64>,
    final_y: Vec<f64>,
    trace_file: String,
}

fn run_experiment(args: &RunArgs) -> Result<(), String> {
    let spec = resolve_spec(args)?;
    std::fs::create_dir_all(&spec.out)
        .map_err(|e| format!("cannot create {}: {e}", spec.out.display()))?;

    let cfg = optimizer_config(&spec);
    let solver_tag = match chosen_solver(&spec) {
        LinearSolver::FullQr => "full-qr",
        LinearSolver::BlockQr => "block-qr",
        LinearSolver::BlockdiagQr => "blockdiag-qr",
        LinearSolver::MixedCgDirect => "mixed-cg-direct",
        LinearSolver::FullCg => "full-cg",
    };
    let tag = format!(
        "{}-{}-{}-{}",
        match spec.problem {
            ProblemKind::Expsum => "expsum",
            ProblemKind::Deconv => "deconv",
            ProblemKind::Toy => "toy",
        },
        match spec.preset {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        },
        solver_tag,
        if spec.adjust { "adj" } else { "noadj" }
    );
    let tag = if spec.problem == ProblemKind::Expsum {
        format!(
            "{tag}-{}",
            match spec.loss {
                LossFlag::Poisson => "poisson",
                LossFlag::WeightedLs => "weighted-ls",
            }
        )
    } else {
        tag
    };

    let mut results: Vec<SeedResult> = Vec::new();
    let mut rate_estimates: Vec<Vec<f64>> = Vec::new(); // per seed, sorted rates
    let mut failures = 0usize;

    for &seed in &spec.seeds {
        let inst = instance_for(&spec, seed);
        let trace_file = format!("{tag}-seed{seed}.csv");
        match run(&inst.problem, &inst.bounds, &inst.x0, &cfg) {
            Ok((x, trace)) => {
                std::fs::write(spec.out.join(&trace_file), trace_csv(&trace))
                    .map_err(|e| format!("cannot write trace: {e}"))?;
                let eval = inst
                    .problem
                    .objective_at(&x)
                    .map_err(|e| format!("final evaluation failed: {e}"))?;
                let final_pg = projected_gradient_norm(&x, &eval.gradient(), &inst.bounds);
                let error_to_truth =
                    inst.truth.as_ref().map(|t| (&x - t).norm());
                let (y, _) = inst.problem.split(&x);
                if spec.problem == ProblemKind::Expsum {
                    let mut rates: Vec<f64> = y.iter().copied().collect();
                    rates.sort_by(|a, b| a.total_cmp(b));
                    rate_estimates.push(rates);
                }
                results.push(SeedResult {
                    seed,
                    status: trace.status,
                    n_steps: trace.n_steps(),
                    final_f: trace.final_f(),
                    final_pg,
                    error_to_truth,
                    final_y: y.iter().copied().collect(),
                    trace_file,
                });
            }
            Err(e) => {
                eprintln!("seed {seed}: solver failure: {e}");
                failures += 1;
            }
        }
    }

    if failures == spec.seeds.len() {
        return Err("all seeds failed".into());
    }

    let mut summary = serde_json::json!({
        "problem": tag,
        "solver": format!("{:?}", chosen_solver(&spec)),
        "elimination": spec.elimination,
        "adjust": spec.adjust,
        "loss": format!("{:?}", spec.loss),
        "rho": spec.rho,
        "n_seeds": spec.seeds.len(),
        "n_failures": failures,
        "runs": results.iter().map(|r| serde_json::json!({
            "seed": r.seed,
            "status": status_str(r.status),
            "n_steps": r.n_steps,
            "final_f": r.final_f,
            "final_proj_grad_norm": r.final_pg,
            "error_to_truth": r.error_to_truth,
            "final_y": r.final_y,
            "trace_file": r.trace_file,
        })).collect::<Vec<_>>(),
    });

    if spec.problem == ProblemKind::Expsum && !rate_estimates.is_empty() {
        let n_rates = rate_estimates[0].len();
        let truth: Vec<f64> = {
            let inst = instance_for(&spec, spec.seeds[0]);
            let t = inst.truth.expect("expsum instances carry the truth");
            let mut r: Vec<f64> = t.iter().take(n_rates).copied().collect();
            r.sort_by(|a, b| a.total_cmp(b));
            r
        };
        let mut medians = Vec::with_capacity(n_rates);
        let mut mads = Vec::with_capacity(n_rates);
        for j in 0..n_rates {
            let col: Vec<f64> = rate_estimates.iter().map(|r| r[j]).collect();
            let mut c = col.clone();
            medians.push(median(&mut c));
            mads.push(median_abs_deviation(&col));
        }
        let mut abs_errors: Vec<f64> = rate_estimates
            .iter()
            .flat_map(|r| r.iter().zip(&truth).map(|(est, tr)| (est - tr).abs()))
            .collect();
        let median_abs_rate_error = median(&mut abs_errors);
        summary["rate_truth"] = serde_json::json!(truth);
        summary["rate_medians"] = serde_json::json!(medians);
        summary["rate_mads"] = serde_json::json!(mads);
        summary["median_abs_rate_error"] = serde_json::json!(median_abs_rate_error);
    }

    let summary_path = spec.out.join(format!("{tag}-summary.json"));
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| format!("cannot write summary: {e}"))?;
    println!("wrote {} runs to {}", results.len(), spec.out.display());
    Ok(())
}

/// Unconstrained least-squares exponential fit used by the equivalence suite:
/// two decay rates, one measurement vector, deterministic low-amplitude
/// perturbation so the residual at the optimum is nonzero.
fn varpro_problem() -> (SeparableProblem, DVector<f64>) {
    let m = 50;
    let t = DVector::from_fn(m, |i, _| 4.0 * i as f64 / (m - 1) as f64);
    let model = ExpSumModel::new(t.clone(), 2, 1);
    let y_true = DVector::from_column_slice(&[1.0, 3.0]);
    let z_true = DVector::from_column_slice(&[4.0, 2.5]);
    let mut b = model.apply(&y_true, &z_true);
    for i in 0..m {
        b[i] += 0.02 * (3.0 * i as f64).sin();
    }
    let problem = SeparableProblem::new(Arc::new(model), LossModel::least_squares(b));
    (problem, DVector::from_column_slice(&[0.6, 2.2]))
}

fn verify_varpro(out: &Path) -> Result<(), String> {
    let (problem, y0) = varpro_problem();
    let n_iter = 10;
    let mut worst: f64 = 0.0;
    let mut report = Vec::new();
    for hessian in [HessianModel::GaussNewton, HessianModel::GolubPereyra] {
        let reduced = equivalence_run(&problem, &y0, EquivalenceMode::Reduced, hessian, n_iter)
            .map_err(|e| format!("reduced route failed: {e}"))?;
        let semi = equivalence_run(
            &problem,
            &y0,
            EquivalenceMode::SemiReducedSimplified,
            hessian,
            n_iter,
        )
        .map_err(|e| format!("semi-reduced route failed: {e}"))?;
        let mut max_rel: f64 = 0.0;
        for (a, b) in reduced.iter().zip(&semi) {
            let rel = (a - b).norm() / a.norm().max(1.0);
            max_rel = max_rel.max(rel);
        }
        worst = worst.max(max_rel);
        report.push(serde_json::json!({
            "hessian": format!("{hessian:?}"),
            "iterations": reduced.len() - 1,
            "max_iterate_discrepancy": max_rel,
        }));
        println!("{hessian:?}: max iterate discrepancy {max_rel:.3e}");
    }
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let doc = serde_json::json!({ "routes": report, "worst": worst, "tolerance": 1e-8 });
    std::fs::write(out.join("verify-varpro.json"), serde_json::to_string_pretty(&doc).unwrap())
        .map_err(|e| format!("cannot write report: {e}"))?;
    if worst < 1e-8 {
        println!("equivalence holds (worst {worst:.3e} < 1e-8)");
        Ok(())
    } else {
        Err(format!("equivalence violated: worst discrepancy {worst:.3e} >= 1e-8"))
    }
}

fn check_trace(file: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| format!("cannot read {}: {e}", file.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty trace file")?;
    let expected =
        "iter,f,proj_grad_norm,lambda,step_exp,backtracks,inner_iters,cpu_ms,active_count";
    if header != expected {
        return Err(format!("unexpected header: {header}"));
    }
    let mut prev_f = f64::INFINITY;
    let mut rows = 0usize;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(format!("row {}: expected 9 fields, got {}", i + 1, fields.len()));
        }
        let f: f64 = fields[1]
            .parse()
            .map_err(|e| format!("row {}: bad objective value: {e}", i + 1))?;
        if !(f <= prev_f) {
            return Err(format!(
                "row {}: objective increased from {prev_f:.17e} to {f:.17e}",
                i + 1
            ));
        }
        prev_f = f;
        rows += 1;
    }
    if rows == 0 {
        return Err("trace contains no data rows".into());
    }
    println!("ok: {rows} rows, objective nonincreasing");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run_experiment(args),
        Command::VerifyVarpro { out } => verify_varpro(out),
        Command::CheckTrace { file } => check_trace(file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
