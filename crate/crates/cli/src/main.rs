use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use idmatch::bench::{benchmark_problem, compare, matching_timing, solver_timing};
use idmatch::exact::solve_transport_exact;
use idmatch::io::{
    read_checkpoint, read_features_file, read_json, read_matrix_file, read_predictions, read_vector, write_checkpoint,
    write_features_file, write_json, write_loss_log, write_matrix_file, write_predictions, CheckpointHeader,
    MatchingReport, PlanSidecar, TargetReport,
};
use idmatch::learning::{evaluate_ids, train, worst_id_risk, TrainConfig};
use idmatch::matching::{
    derive_seed, match_identities, IdentityGroup, MatchConfig, MiniBatch, Sampling, SolverKind, Weighting,
};
use idmatch::metrics::evaluate;
use idmatch::ot::{
    marginal_residuals, plan_entropy, sinkhorn, transport_cost, CostMatrix, MarginalWeights, SinkhornConfig,
};
use idmatch::synthetic::{generate, ShiftScenario};

#[derive(Parser)]
#[command(name = "idmatch", version, about = "Identity matching and invariant regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; overrides any seed in a config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity-shift dataset.
    Gen(GenArgs),
    /// Solve one transport problem with Sinkhorn or the exact simplex.
    Solve(SolveArgs),
    /// Match every identity of a feature file against a reference.
    Match(MatchArgs),
    /// Train the encoder and regression head.
    Train(TrainArgs),
    /// Compute regression metrics.
    Eval(EvalArgs),
    /// Compare solver, weighting and sampling variants.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_ids: Option<usize>,
    #[arg(long)]
    test_ids: Option<usize>,
    #[arg(long)]
    samples_per_id: Option<usize>,
    #[arg(long)]
    raw_dim: Option<usize>,
    #[arg(long)]
    shift_scale: Option<f64>,
    #[arg(long)]
    scale_jitter: Option<f64>,
    #[arg(long)]
    label_noise: Option<f64>,
}

#[derive(Args)]
struct SinkhornArgs {
    #[arg(long, default_value_t = 5.0)]
    eta: f64,
    #[arg(long, default_value_t = 5)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

impl SinkhornArgs {
    fn config(&self) -> Result<SinkhornConfig> {
        Ok(SinkhornConfig::new(self.eta, self.max_iter, self.tol)?)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Cost matrix CSV (row-major, header optional).
    #[arg(long)]
    cost: PathBuf,
    /// Supplier weights; uniform when omitted.
    #[arg(long)]
    a: Option<PathBuf>,
    /// Demander weights; uniform when omitted.
    #[arg(long)]
    b: Option<PathBuf>,
    /// Use the exact transportation simplex.
    #[arg(long)]
    exact: bool,
    #[command(flatten)]
    sinkhorn: SinkhornArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Relevance,
    SelfSide,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Gumbel,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Sinkhorn,
    Exact,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    common: Common,
    /// Feature CSV with columns id, y_v, y_a, f0...
    #[arg(long)]
    features: PathBuf,
    /// Reference key; drawn at random from the seed when omitted.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::Relevance)]
    weighting: WeightingArg,
    #[arg(long, value_enum, default_value_t = SamplingArg::Gumbel)]
    sampling: SamplingArg,
    #[arg(long, value_enum, default_value_t = SolverArg::Sinkhorn)]
    solver: SolverArg,
    /// Use one reference subset for all targets.
    #[arg(long)]
    shared_reference: bool,
    #[command(flatten)]
    sinkhorn: SinkhornArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Learning rates 5e-5 / 1e-5.
    Default,
    /// Learning rates 1e-2 / 1e-2 for short synthetic runs.
    Desk,
}

impl Preset {
    fn config(self) -> TrainConfig {
        match self {
            Preset::Default => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training feature CSV.
    #[arg(long)]
    features: PathBuf,
    /// Held-out feature CSV to evaluate after training.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Training config JSON; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[arg(long)]
    steps: Option<usize>,
    /// Train without shift/scale normalization.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// CSV with columns y_v, y_a, pred_v, pred_a.
    #[arg(long, conflicts_with_all = ["checkpoint", "features"])]
    predictions: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long, requires = "features")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Training config JSON; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario JSON for the benchmark data.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Repetitions for the single-problem timings.
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    subcommand: String,
    version: String,
    seed: u64,
    config_path: Option<PathBuf>,
    input_paths: Vec<PathBuf>,
    output_dir: PathBuf,
    args: Vec<String>,
    started_unix_ms: u128,
    finished_unix_ms: Option<u128>,
    outputs: Vec<String>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Writes the manifest before any result and records outputs as they land.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(subcommand: &str, common: &Common, seed: u64, config: Option<&PathBuf>, inputs: Vec<PathBuf>) -> Result<Self> {
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let run = Self {
            dir: common.out.clone(),
            manifest: RunManifest {
                subcommand: subcommand.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed,
                config_path: config.cloned(),
                input_paths: inputs,
                output_dir: common.out.clone(),
                args: std::env::args().skip(1).collect(),
                started_unix_ms: now_ms(),
                finished_unix_ms: None,
                outputs: Vec::new(),
            },
        };
        run.save_manifest()?;
        Ok(run)
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)?;
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.into());
        self.dir.join(name)
    }

    fn finish(mut self) -> Result<()> {
        for name in &self.manifest.outputs {
            let p = self.dir.join(name);
            if !p.is_file() {
                bail!("expected output {} was not written", p.display());
            }
        }
        self.manifest.finished_unix_ms = Some(now_ms());
        self.save_manifest()
    }
}

fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_json(path).with_context(|| format!("invalid config {}", path.display()))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut scenario: ShiftScenario = match &args.config {
        Some(p) => load_config(p)?,
        None => ShiftScenario::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { scenario.$f = v; } )* };
    }
    set!(num_ids, test_ids, samples_per_id, raw_dim, shift_scale, scale_jitter, label_noise);
    if let Some(s) = args.common.seed {
        scenario.seed = s;
    }
    let mut run = Run::start("gen", &args.common, scenario.seed, args.config.as_ref(), vec![])?;
    let data = generate(&scenario)?;
    write_json(&run.path("scenario.json"), &scenario)?;
    write_features_file(&run.path("train.csv"), &data.train)?;
    write_features_file(&run.path("test.csv"), &data.test)?;
    write_json(&run.path("styles.json"), &data.styles)?;
    run.finish()
}

fn cmd_solve(args: SolveArgs) -> Result<()> {
    let mut inputs = vec![args.cost.clone()];
    inputs.extend(args.a.iter().chain(&args.b).cloned());
    let mut run = Run::start("solve", &args.common, args.common.seed.unwrap_or(0), None, inputs)?;
    let cost = CostMatrix::new(read_matrix_file(&args.cost).with_context(|| format!("reading {}", args.cost.display()))?)?;
    let (n, m) = cost.shape();
    let read_weights = |p: &Option<PathBuf>, len: usize| -> Result<Vec<f64>> {
        match p {
            Some(p) => read_vector(fs::File::open(p)?).with_context(|| format!("reading {}", p.display())),
            None => Ok(vec![1.0 / len as f64; len]),
        }
    };
    let weights = MarginalWeights::new(read_weights(&args.a, n)?, read_weights(&args.b, m)?)?;
    let sidecar = if args.exact {
        let sol = solve_transport_exact(&cost, &weights)?;
        let (row_residual, col_residual) = marginal_residuals(&sol.flow, &normalized(&weights)?)?;
        write_matrix_file(&run.path("plan.csv"), &sol.flow, None)?;
        PlanSidecar {
            solver: "exact".into(),
            eta: None,
            max_iter: None,
            tol: None,
            iterations_used: Some(sol.pivots),
            converged: true,
            transport_cost: transport_cost(&cost, &sol.flow)?,
            entropy: plan_entropy(&sol.flow)?,
            objective: Some(sol.objective),
            basis_degenerate: Some(sol.basis_degenerate),
            row_residual,
            col_residual,
        }
    } else {
        let config = args.sinkhorn.config()?;
        let plan = sinkhorn(&cost, &weights, &config)?;
        let (row_residual, col_residual) = marginal_residuals(&plan.flow, &normalized(&weights)?)?;
        write_matrix_file(&run.path("plan.csv"), &plan.flow, None)?;
        PlanSidecar {
            solver: "sinkhorn".into(),
            eta: Some(config.eta),
            max_iter: Some(config.max_iter),
            tol: Some(config.tol),
            iterations_used: Some(plan.iterations_used),
            converged: plan.converged,
            transport_cost: transport_cost(&cost, &plan.flow)?,
            entropy: plan_entropy(&plan.flow)?,
            objective: None,
            basis_degenerate: None,
            row_residual,
            col_residual,
        }
    };
    write_json(&run.path("plan.json"), &sidecar)?;
    run.finish()
}

fn normalized(w: &MarginalWeights) -> Result<MarginalWeights> {
    let (a, b) = w.normalized()?;
    Ok(MarginalWeights::new(a.to_vec(), b.to_vec())?)
}

fn cmd_match(args: MatchArgs) -> Result<()> {
    let seed = args.common.seed.unwrap_or(0);
    let mut run = Run::start("match", &args.common, seed, None, vec![args.features.clone()])?;
    let data = read_features_file(&args.features).with_context(|| format!("reading {}", args.features.display()))?;
    let config = MatchConfig {
        k: args.k,
        sinkhorn: args.sinkhorn.config()?,
        weighting: match args.weighting {
            WeightingArg::Relevance => Weighting::Relevance,
            WeightingArg::SelfSide => Weighting::SelfSide,
        },
        sampling: match args.sampling {
            SamplingArg::Gumbel => Sampling::Gumbel,
            SamplingArg::None => Sampling::None,
        },
        solver: match args.solver {
            SolverArg::Sinkhorn => SolverKind::Sinkhorn,
            SolverArg::Exact => SolverKind::Exact,
        },
        resample_reference: !args.shared_reference,
    };

    let mut skipped = BTreeMap::new();
    let mut groups = Vec::new();
    for (key, idx) in data.groups() {
        if config.sampling == Sampling::Gumbel && idx.len() < config.k {
            eprintln!("warning: skipping {key}: {} samples, k = {}", idx.len(), config.k);
            skipped.insert(key, idx.len());
            continue;
        }
        let sub = data.select(&idx);
        groups.push(IdentityGroup::new(key, sub.inputs, sub.labels)?);
    }
    if groups.len() < 2 {
        bail!("need at least 2 usable groups, have {}", groups.len());
    }
    let reference_index = match &args.reference {
        Some(key) => groups
            .iter()
            .position(|g| &g.key == key)
            .with_context(|| format!("reference key {key} not found among usable groups"))?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "reference", 0));
            rand::Rng::random_range(&mut rng, 0..groups.len())
        }
    };
    let batch = MiniBatch::new(groups, reference_index)?;
    let results = match_identities(&batch, &config, seed)?;
    let report = MatchingReport {
        reference_key: batch.reference().key.clone(),
        skipped,
        total_transport_cost: results.iter().map(|r| r.transport_cost).sum(),
        targets: results.iter().map(|r| (r.target_key.clone(), TargetReport::from(r))).collect(),
    };
    write_json(&run.path("matching.json"), &report)?;
    run.finish()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => load_config(p)?,
        None => args.preset.config(),
    };
    if let Some(s) = args.common.seed {
        config.seed = s;
    }
    if let Some(s) = args.steps {
        config.steps = s;
    }
    if args.no_normalize {
        config.normalize = false;
    }
    let mut inputs = vec![args.features.clone()];
    inputs.extend(args.test.iter().cloned());
    let mut run = Run::start("train", &args.common, config.seed, args.config.as_ref(), inputs)?;
    write_json(&run.path("config.json"), &config)?;
    let data = read_features_file(&args.features).with_context(|| format!("reading {}", args.features.display()))?;
    let outcome = train(&config, &data)?;
    write_loss_log(fs::File::create(run.path("loss_log.csv"))?, &outcome.log)?;
    let header = CheckpointHeader {
        input_dim: outcome.params.input_dim(),
        feature_dim: outcome.params.feature_dim(),
        step: config.steps,
        seed: config.seed,
    };
    write_checkpoint(fs::File::create(run.path("checkpoint.csv"))?, &header, &outcome.params)?;
    if let Some(test) = &args.test {
        let test = read_features_file(test).with_context(|| format!("reading {}", test.display()))?;
        let pred = outcome.params.predict(&test.inputs)?;
        write_predictions(fs::File::create(run.path("predictions.csv"))?, &test.labels, &pred)?;
        write_json(&run.path("metrics.json"), &evaluate(&test.labels, &pred)?)?;
        let per_id = evaluate_ids(&outcome.params, &test)?;
        let (worst_key, worst) = worst_id_risk(&per_id)?;
        write_json(
            &run.path("per_id_mse.json"),
            &serde_json::json!({ "per_id": per_id, "worst_id_key": worst_key, "worst_id_risk": worst }),
        )?;
    }
    run.finish()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let inputs: Vec<PathBuf> = [&args.predictions, &args.checkpoint, &args.features]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    let mut run = Run::start("eval", &args.common, args.common.seed.unwrap_or(0), None, inputs)?;
    let (truth, pred) = match (&args.predictions, &args.checkpoint, &args.features) {
        (Some(p), _, _) => {
            read_predictions(fs::File::open(p)?).with_context(|| format!("reading {}", p.display()))?
        }
        (None, Some(c), Some(f)) => {
            let (_, params) = read_checkpoint(fs::File::open(c)?).with_context(|| format!("reading {}", c.display()))?;
            let data = read_features_file(f).with_context(|| format!("reading {}", f.display()))?;
            let pred = params.predict(&data.inputs)?;
            write_predictions(fs::File::create(run.path("predictions.csv"))?, &data.labels, &pred)?;
            (data.labels, pred)
        }
        _ => bail!("pass --predictions, or --checkpoint with --features"),
    };
    write_json(&run.path("metrics.json"), &evaluate(&truth, &pred)?)?;
    run.finish()
}

#[derive(Serialize)]
struct TimingRow {
    solver: SolverKind,
    weighting: Weighting,
    sampling: Sampling,
    solver_seconds: f64,
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig {
            steps: args.steps,
            ..args.preset.config()
        },
    };
    let mut scenario: ShiftScenario = match &args.scenario {
        Some(p) => load_config(p)?,
        None => ShiftScenario::default(),
    };
    if let Some(s) = args.common.seed {
        config.seed = s;
        scenario.seed = s;
    }
    let inputs = args.scenario.iter().cloned().collect();
    let mut run = Run::start("bench", &args.common, config.seed, args.config.as_ref(), inputs)?;
    let rows = compare(&scenario, &config)?;

    let mut table = String::from("solver,weighting,sampling,solver_calls,ccc_mean,rmse_v,rmse_a,pcc_v,pcc_a,ccc_v,ccc_a\n");
    for r in &rows {
        let m = &r.metrics;
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            variant_name(&r.solver),
            variant_name(&r.weighting),
            variant_name(&r.sampling),
            r.solver_calls,
            r.ccc_mean,
            m.rmse_v,
            m.rmse_a,
            m.pcc_v,
            m.pcc_a,
            m.ccc_v,
            m.ccc_a
        ));
    }
    fs::write(run.path("bench.csv"), &table)?;

    let (cost, weights) = benchmark_problem(config.seed)?;
    let solvers = solver_timing(&cost, &weights, &config.sinkhorn, args.reps.max(1))?;
    let matching = matching_timing(64, config.k, config.seed, args.reps.max(1) * 20 + 1)?;
    let timing_rows: Vec<TimingRow> = rows
        .iter()
        .map(|r| TimingRow {
            solver: r.solver,
            weighting: r.weighting,
            sampling: r.sampling,
            solver_seconds: r.solver_seconds,
        })
        .collect();
    write_json(
        &run.path("timings.json"),
        &serde_json::json!({ "rows": timing_rows, "solver_100x100": solvers, "matching": matching }),
    )?;

    println!("{:<9} {:<10} {:<7} {:>12} {:>9}", "solver", "weighting", "sampling", "solver_s", "ccc_mean");
    for r in &rows {
        println!(
            "{:<9} {:<10} {:<7} {:>12.6} {:>9.4}",
            variant_name(&r.solver),
            variant_name(&r.weighting),
            variant_name(&r.sampling),
            r.solver_seconds,
            r.ccc_mean
        );
    }
    println!(
        "100x100: sinkhorn {:.6}s, exact {:.6}s; matching n=64: k={} {:.6}s, full {:.6}s",
        solvers.sinkhorn_seconds, solvers.exact_seconds, matching.k, matching.sampled_seconds, matching.full_seconds
    );
    run.finish()
}

/// Snake-case name of a unit enum variant via its serde representation.
fn variant_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Match(a) => cmd_match(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
