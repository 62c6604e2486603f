use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hicofore_core::ablation::{medians, run_ablation, write_rows, Ablation, Factor};
use hicofore_core::evaluate::q_grid;
use hicofore_core::forecaster::{train, Checkpoint, Model, TrainConfig};
use hicofore_core::mixture::validate_q_grid;
use hicofore_core::pipeline::{
    load_panel, synth_hierarchy, synth_regimes, write_panel, PanelDataset, RegimeConfig, SynthConfig,
};
use hicofore_core::{default_q_grid, HierarchySpec, ScalerKind, Strategy};

/// Coherent probabilistic forecasts for hierarchical time series.
#[derive(Parser)]
#[command(name = "hicofore", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Sample a coherent forecast for the steps after the last observation.
    Forecast(ForecastArgs),
    /// Score the test window and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Sweep one factor and record validation sCRPS per seed.
    Ablate(AblateArgs),
    /// Write a synthetic panel and its hierarchy.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    /// Input window is this many horizons long.
    #[arg(long, default_value_t = 3)]
    input_multiplier: usize,
    #[arg(long, default_value_t = 256)]
    hidden_width: usize,
    #[arg(long, default_value_t = 3)]
    hidden_layers: usize,
    /// Number of mixture components.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    lr_decays: usize,
    #[arg(long, default_value_t = 1000)]
    max_steps: usize,
    /// Series per composite batch (0 = all).
    #[arg(long, default_value_t = 0)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    windows_per_step: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 50)]
    eval_interval: usize,
    #[arg(long, default_value_t = 200)]
    val_samples: usize,
    /// minmax, standard, robust or revin.
    #[arg(long, default_value = "robust")]
    scaler: ScalerKind,
    /// bottom_up, top_down, mintrace_ols or mintrace_wls.
    #[arg(long, default_value = "mintrace_ols")]
    reconciler: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            horizon: self.horizon,
            input_multiplier: self.input_multiplier,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            n_components: self.k,
            learning_rate: self.lr,
            lr_decays: self.lr_decays,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            windows_per_step: self.windows_per_step,
            patience: self.patience,
            eval_interval: self.eval_interval,
            val_samples: self.val_samples,
            scaler: self.scaler,
            reconciler: self.reconciler,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Long-format CSV with columns unique_id,ds,y.
    #[arg(long)]
    data: PathBuf,
    /// Hierarchy JSON.
    #[arg(long)]
    hierarchy: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_samples: usize,
    /// Overrides the reconciler stored in the checkpoint.
    #[arg(long)]
    reconciler: Option<Strategy>,
    /// Quantile levels: a count n (levels k/(n+1)) or a comma-separated list.
    #[arg(long)]
    q_grid: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, default_value = "forecast.json")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Retrain on train + validation for the early-stopped step count first.
    #[arg(long)]
    recalibrate: bool,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Also write the text table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// mixture, scaler or reconciler.
    factor: Factor,
    /// Comma-separated values; defaults to the factor's standard grid.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<String>,
    /// Fraction of training observations rescaled before each run.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Runs per grid value, seeded 0..n.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Panel CSV; a synthetic panel is generated when omitted.
    #[arg(long, requires = "hierarchy")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    hierarchy: Option<PathBuf>,
    /// Generator used without --data: seasonal or regimes.
    #[arg(long, default_value = "seasonal")]
    synthetic: String,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "curves.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// seasonal or regimes.
    #[arg(long, default_value = "seasonal")]
    kind: String,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "panel.csv")]
    out: PathBuf,
    #[arg(long, default_value = "hierarchy.json")]
    hierarchy_out: PathBuf,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HICOFORE_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().with_context(|| format!("HICOFORE_THREADS={raw:?} is not a thread count"))?;
    if n == 0 {
        bail!("HICOFORE_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    Ok(())
}

fn parse_q_grid(raw: Option<&str>) -> Result<Vec<f64>> {
    let Some(raw) = raw else { return Ok(default_q_grid()) };
    let grid = if raw.contains(',') || raw.contains('.') {
        raw.split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad quantile level {s:?}")))
            .collect::<Result<Vec<_>>>()?
    } else {
        let n: usize = raw.trim().parse().with_context(|| format!("bad quantile count {raw:?}"))?;
        q_grid(n)
    };
    validate_q_grid(&grid)?;
    Ok(grid)
}

fn load_inputs(data: &Path, hierarchy: &Path) -> Result<(HierarchySpec, PanelDataset)> {
    let text = fs::read_to_string(hierarchy).with_context(|| format!("reading {}", hierarchy.display()))?;
    let spec = HierarchySpec::from_json(&text).with_context(|| format!("parsing {}", hierarchy.display()))?;
    let dataset = load_panel(data, &spec).with_context(|| format!("reading {}", data.display()))?;
    Ok((spec, dataset))
}

fn load_checkpoint(path: &Path) -> Result<(Model, HierarchySpec, PanelDataset)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.into_parts()?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (spec, dataset) = load_inputs(&args.data, &args.hierarchy)?;
    let config = args.model.config();
    let model = train(&dataset, &spec, &config)?;
    Checkpoint::new(&model, &spec, &dataset)?.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let h = &model.history;
    println!("steps        {}", h.steps.len());
    println!("best step    {}", h.best_step);
    match h.best_val_scrps {
        Some(v) => println!("val sCRPS    {v:.6}"),
        None => println!("val sCRPS    n/a"),
    }
    println!("early stop   {}", h.stopped_early);
    println!("checkpoint   {}", args.out.display());
    Ok(())
}

fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let s = &args.sampling;
    let (model, spec, dataset) = load_checkpoint(&s.model)?;
    let grid = parse_q_grid(s.q_grid.as_deref())?;
    let strategy = s.reconciler.unwrap_or(model.config.reconciler);
    let forecast = model.predict_distribution(&dataset, &spec, dataset.len(), s.n_samples, s.seed, strategy, &grid)?;
    let summary = forecast.summary();
    write_json(&args.out, &summary)?;
    println!("{:<16} {:>12} {:>12}", "series", "mean[1]", format!("mean[{}]", summary.horizon));
    for series in &summary.series {
        println!("{:<16} {:>12.4} {:>12.4}", series.id, series.mean[0], series.mean[summary.horizon - 1]);
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let s = &args.sampling;
    let (model, spec, dataset) = load_checkpoint(&s.model)?;
    let model = if args.recalibrate { model.recalibrate(&dataset, &spec)? } else { model };
    let grid = parse_q_grid(s.q_grid.as_deref())?;
    let strategy = s.reconciler.unwrap_or(model.config.reconciler);
    let report = model.evaluate_test(&dataset, &spec, s.n_samples, s.seed, strategy, &grid)?;
    write_json(&args.out, &report)?;
    let table = report.to_table();
    if let Some(path) = &args.table {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{table}");
    Ok(())
}

fn synthetic(kind: &str, length: Option<usize>, seed: u64) -> Result<(HierarchySpec, PanelDataset)> {
    Ok(match kind {
        "seasonal" => {
            let d = SynthConfig::default();
            synth_hierarchy(&SynthConfig { length: length.unwrap_or(d.length), seed, ..d })?
        }
        "regimes" => {
            let d = RegimeConfig::default();
            synth_regimes(&RegimeConfig { length: length.unwrap_or(d.length), seed, ..d })?
        }
        other => bail!("unknown synthetic generator {other:?} (seasonal or regimes)"),
    })
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (spec, dataset) = match (&args.data, &args.hierarchy) {
        (Some(d), Some(h)) => load_inputs(d, h)?,
        _ => synthetic(&args.synthetic, None, 0)?,
    };
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let grid = if args.grid.is_empty() { args.factor.default_grid() } else { args.grid.clone() };
    let ablation = Ablation { factor: args.factor, grid, noise: args.noise, seeds: (0..args.seeds).collect(), base: args.model.config() };
    let rows = run_ablation(&dataset, &spec, &ablation)?;
    let file = fs::File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    write_rows(file, &rows)?;
    println!("{:<14} {:>16}", args.factor.as_str(), "median sCRPS");
    for (value, m) in medians(&rows) {
        println!("{value:<14} {m:>16.6}");
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let (spec, dataset) = synthetic(&args.kind, args.length, args.seed)?;
    write_panel(&args.out, &dataset).with_context(|| format!("writing {}", args.out.display()))?;
    fs::write(&args.hierarchy_out, spec.to_json()).with_context(|| format!("writing {}", args.hierarchy_out.display()))?;
    println!("{} series × {} steps -> {}", dataset.n_series(), dataset.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
