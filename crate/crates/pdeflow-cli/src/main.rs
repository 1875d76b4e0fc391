//! Command-line entry point: data generation, training, fine-tuning,
//! sampling, evaluation, multi-resolution evaluation, the prediction-target
//! ablation, effective-dimension diagnostics, and the latency bench.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numeric
//! divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pdeflow_core::checkpoint::{load_checkpoint, save_checkpoint, validate_against, CheckpointMeta, CKPT_SCHEMA};
use pdeflow_core::config::{write_manifest, RunConfig};
use pdeflow_core::datagen::{generate, read_container, write_container, DatasetContainer, Family, GenSpec};
use pdeflow_core::effdim::{diagnose, write_report, write_spectra, DiagnoseConfig};
use pdeflow_core::metrics::{
    eval_model, eval_multires, eval_persistence, run_ablation, target_name, write_ablation_report,
    write_eval_reports, AblationStatus, EvalOptions,
};
use pdeflow_core::model::{init_model_params, ModelConfig, ModelPreset, PredTarget};
use pdeflow_core::nn::ParamStore;
use pdeflow_core::sampler::{sample, SampleConfig, Solver};
use pdeflow_core::train::{train, OptimizerState, TrainError, TrainOptions};
use pdeflow_core::Unified4DField;

#[derive(Parser)]
#[command(name = "pdeflow", version, about = "Flow-matching forecasting for PDE trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bit-reproducible single-threaded mode.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the matrix kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory dataset.
    GenerateData(GenerateArgs),
    /// Train a model from scratch on the configured datasets.
    Train,
    /// Load a checkpoint and continue training on the configured datasets.
    Finetune(FinetuneArgs),
    /// Sample a future window for one test trajectory.
    Sample(SampleArgs),
    /// Forecast nRMSE on a dataset, with the persistence yardstick.
    Eval(EvalArgs),
    /// Evaluate one model across several spatial resolutions.
    EvalMultires(MultiresArgs),
    /// Prediction-target ablation: x-pred / v-pred / eps-pred.
    Ablate,
    /// Effective-dimension diagnostics table and spectra.
    Diagnose(DiagnoseArgs),
    /// One-shot generation latency table.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long, default_value_t = 60)]
    n_traj: usize,
    /// Comma-separated spatial extents, e.g. 128 or 32,32.
    #[arg(long, default_value = "128")]
    grid: String,
    #[arg(long, default_value_t = 24)]
    frames: usize,
    #[arg(long, default_value_t = 0.02)]
    dt: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Half-width of the per-trajectory uniform advection-speed spread.
    #[arg(long, default_value_t = 0.0)]
    beta_spread: f64,
    #[arg(long, default_value_t = 0.01)]
    nu: f64,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    max_mode: usize,
    /// Output container path.
    #[arg(long)]
    file: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum FamilyArg {
    Advection,
    Burgers,
    Diffusion2d,
    Diffusion3d,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::Advection => Family::Advection,
            FamilyArg::Burgers => Family::Burgers,
            FamilyArg::Diffusion2d => Family::Diffusion2d,
            FamilyArg::Diffusion3d => Family::Diffusion3d,
        }
    }
}

#[derive(Args)]
struct FinetuneArgs {
    /// Checkpoint to initialize from.
    #[arg(long)]
    init: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    traj: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Output container for the forecast.
    #[arg(long)]
    file: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum SolverArg {
    Euler,
    Heun,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16)]
    max_windows: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Independent sampling seeds per window.
    #[arg(long, default_value_t = 1)]
    n_seeds: usize,
}

#[derive(Args)]
struct MultiresArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated resolutions, e.g. 64,128,256.
    #[arg(long)]
    resolutions: String,
    #[arg(long, default_value_t = 8)]
    max_windows: usize,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Dataset containers (one per dimensionality).
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 6000)]
    n_samples: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    preset: PresetArg,
    /// Comma-separated ODE step counts.
    #[arg(long, default_value = "1,5,40")]
    steps_list: String,
    #[arg(long, default_value_t = 10)]
    runs: usize,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum PresetArg {
    Tiny,
    S,
    M,
    L,
    Xl,
}

impl From<PresetArg> for ModelPreset {
    fn from(p: PresetArg) -> ModelPreset {
        match p {
            PresetArg::Tiny => ModelPreset::Tiny,
            PresetArg::S => ModelPreset::S,
            PresetArg::M => ModelPreset::M,
            PresetArg::L => ModelPreset::L,
            PresetArg::Xl => ModelPreset::Xl,
        }
    }
}

/// Error wrapper carrying the process exit code.
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 1, msg: msg.into() }
    }
    fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }
    fn numeric(msg: impl Into<String>) -> Self {
        CliError { code: 4, msg: msg.into() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path too
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(global: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::config(e.to_string()))?,
        None => RunConfig::default(),
    };
    // environment override for the output directory only; an explicit
    // --out flag still wins
    if let Ok(out) = std::env::var(pdeflow_core::config::OUT_DIR_ENV) {
        cfg.out_dir = PathBuf::from(out);
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.sample.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = global.threads {
        cfg.threads = threads;
    }
    if global.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    pdeflow_core::tensor::set_threads(cfg.effective_threads());
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenerateData(args) => cmd_generate(&cli.global, args),
        Command::Train => cmd_train(&cli.global, None),
        Command::Finetune(args) => cmd_train(&cli.global, Some(args.init)),
        Command::Sample(args) => cmd_sample(&cli.global, args),
        Command::Eval(args) => cmd_eval(&cli.global, args),
        Command::EvalMultires(args) => cmd_multires(&cli.global, args),
        Command::Ablate => cmd_ablate(&cli.global),
        Command::Diagnose(args) => cmd_diagnose(&cli.global, args),
        Command::Bench(args) => cmd_bench(&cli.global, args),
    }
}

fn parse_usize_list(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| CliError::usage(format!("bad list entry `{p}`: {e}"))))
        .collect()
}

fn cmd_generate(global: &GlobalArgs, args: GenerateArgs) -> CliResult {
    let cfg = load_config(global)?;
    let grid = parse_usize_list(&args.grid)?;
    let spec = GenSpec {
        family: args.family.into(),
        n_traj: args.n_traj,
        grid,
        t_steps: args.frames,
        dt: args.dt,
        beta: args.beta,
        beta_spread: args.beta_spread,
        nu: args.nu,
        max_mode: args.max_mode,
        channels: args.channels,
        seed: global.seed.unwrap_or(cfg.seed),
    };
    let container = generate(&spec).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(dir) = args.file.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::data(e.to_string()))?;
        }
    }
    write_container(&args.file, &container).map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "wrote {} trajectories ({}D, vars {:?}) to {}",
        container.header.n_traj(),
        container.header.dim_type.as_usize(),
        container.header.var_names,
        args.file.display()
    );
    Ok(())
}

fn load_datasets(cfg: &RunConfig) -> CliResult<Vec<DatasetContainer>> {
    if cfg.datasets.is_empty() {
        return Err(CliError::config("no datasets configured (set `datasets = [...]`)"));
    }
    cfg.datasets
        .iter()
        .map(|p| read_container(p).map_err(|e| CliError::data(format!("{}: {e}", p.display()))))
        .collect()
}

fn cmd_train(global: &GlobalArgs, init_from: Option<PathBuf>) -> CliResult {
    let cfg = load_config(global)?;
    let model = cfg.model_config().map_err(|e| CliError::config(e.to_string()))?;
    let datasets = load_datasets(&cfg)?;
    let mut train_sets = Vec::new();
    let mut val_sets = Vec::new();
    for d in datasets {
        let (tr, va) = d.split(0.9, cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
        train_sets.push(tr);
        val_sets.push(va);
    }
    let mut params: ParamStore<f32> = match &init_from {
        Some(path) => {
            let (p, _, _) = load_checkpoint(path).map_err(|e| CliError::data(e.to_string()))?;
            validate_against(&p, &model).map_err(|e| CliError::config(e.to_string()))?;
            p
        }
        None => init_model_params(&model, cfg.seed),
    };
    let mut opt = OptimizerState::new(&params);

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::data(e.to_string()))?;
    write_manifest(&cfg.out_dir, &cfg.to_toml(), cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
    let mut log = std::fs::File::create(cfg.out_dir.join("metrics.log")).map_err(|e| CliError::data(e.to_string()))?;
    let ckpt_dir = cfg.out_dir.clone();
    let config_snapshot = cfg.to_toml();
    let mut save_cb = move |step: u64, p: &ParamStore<f32>, o: &OptimizerState<f32>| {
        let meta = CheckpointMeta {
            schema_version: CKPT_SCHEMA,
            step,
            config: config_snapshot.clone(),
            metrics: Default::default(),
        };
        let path = ckpt_dir.join("model.ckpt");
        if let Err(e) = save_checkpoint(&path, p, Some(o), &meta) {
            eprintln!("warning: checkpoint write failed: {e}");
        }
    };
    let opts = TrainOptions {
        metric_log: Some(&mut log),
        on_checkpoint: Some(&mut save_cb),
        start_step: 0,
    };
    let report = train(&mut params, &mut opt, &model, &cfg.train, &train_sets, &val_sets, opts).map_err(map_train_err)?;
    println!(
        "trained {} steps: loss {:.4e} -> {:.4e} (checkpoint at {})",
        report.steps,
        report.initial_loss,
        report.final_loss,
        cfg.out_dir.join("model.ckpt").display()
    );
    Ok(())
}

fn map_train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { step } => CliError::numeric(format!("loss diverged (non-finite) at step {step}")),
        TrainError::NoWindows => CliError::data("trajectories are shorter than history+horizon"),
        other => CliError::data(other.to_string()),
    }
}

/// Loads a checkpoint together with the model configuration embedded in its
/// header snapshot.
fn load_model(path: &Path) -> CliResult<(ParamStore<f32>, RunConfig, ModelConfig)> {
    let (params, _, meta) = load_checkpoint(path).map_err(|e| CliError::data(e.to_string()))?;
    let run_cfg = RunConfig::parse(&meta.config).map_err(|e| CliError::config(format!("embedded config: {e}")))?;
    let model = run_cfg.model_config().map_err(|e| CliError::config(e.to_string()))?;
    validate_against(&params, &model).map_err(|e| CliError::config(e.to_string()))?;
    Ok((params, run_cfg, model))
}

fn history_window(container: &DatasetContainer, model: &ModelConfig, traj: usize) -> CliResult<Unified4DField<f32>> {
    if traj >= container.header.n_traj() {
        return Err(CliError::data(format!(
            "trajectory {traj} out of range ({} available)",
            container.header.n_traj()
        )));
    }
    if container.header.frames() < model.history_len {
        return Err(CliError::data("trajectory shorter than the history window"));
    }
    let raw: pdeflow_core::Tensor<f32> = container.trajectory(traj);
    let per_frame = raw.len() / container.header.frames();
    let mut shape = raw.shape().to_vec();
    shape[0] = model.history_len;
    let window = pdeflow_core::Tensor::from_vec(&shape, raw.data()[..model.history_len * per_frame].to_vec());
    pdeflow_core::canonicalize(
        &window,
        &container.header.var_names,
        container.header.dim_type,
        &model.vocab,
        model.patch,
    )
    .map_err(|e| CliError::data(e.to_string()))
}

fn cmd_sample(global: &GlobalArgs, args: SampleArgs) -> CliResult {
    let cfg = load_config(global)?;
    let (params, run_cfg, model) = load_model(&args.ckpt)?;
    let container = read_container(&args.data).map_err(|e| CliError::data(e.to_string()))?;
    let hist = history_window(&container, &model, args.traj)?;
    let mut sample_cfg = run_cfg.sample;
    sample_cfg.seed = cfg.seed;
    if let Some(steps) = args.steps {
        sample_cfg.steps = steps;
    }
    if let Some(scale) = args.cfg_scale {
        sample_cfg.cfg_scale = scale;
    }
    if let Some(solver) = args.solver {
        sample_cfg.solver = match solver {
            SolverArg::Euler => Solver::Euler,
            SolverArg::Heun => Solver::Heun,
        };
    }
    let out = sample(&params, &model, &[&hist], &sample_cfg).map_err(|e| CliError::numeric(e.to_string()))?;
    let pred = out.into_iter().next().unwrap();
    let native = pred
        .extract_native(&model.vocab, &container.header.var_names)
        .map_err(|e| CliError::data(e.to_string()))?;
    let mut header = container.header.clone();
    header.shape[0] = 1;
    header.shape[1] = model.horizon;
    let payload: Vec<f32> = native.data().to_vec();
    let forecast = DatasetContainer::new(header, payload);
    write_container(&args.file, &forecast).map_err(|e| CliError::data(e.to_string()))?;
    println!("wrote {}-frame forecast to {}", model.horizon, args.file.display());
    Ok(())
}

fn cmd_eval(global: &GlobalArgs, args: EvalArgs) -> CliResult {
    let cfg = load_config(global)?;
    let (params, run_cfg, model) = load_model(&args.ckpt)?;
    let container = read_container(&args.data).map_err(|e| CliError::data(e.to_string()))?;
    let mut sample_cfg = run_cfg.sample;
    sample_cfg.seed = cfg.seed;
    if let Some(steps) = args.steps {
        sample_cfg.steps = steps;
    }
    if let Some(scale) = args.cfg_scale {
        sample_cfg.cfg_scale = scale;
    }
    let opts = EvalOptions { sample: sample_cfg, max_windows: args.max_windows, n_seeds: args.n_seeds };
    let dataset_id = args.data.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let (report, _) = eval_model(&params, &model, &container, &opts, &dataset_id, "model")
        .map_err(|e| CliError::numeric(e.to_string()))?;
    let baseline = eval_persistence(&model, &container, args.max_windows, &dataset_id)
        .map_err(|e| CliError::data(e.to_string()))?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::data(e.to_string()))?;
    write_manifest(&cfg.out_dir, &cfg.to_toml(), cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
    let out_path = cfg.out_dir.join("eval.tsv");
    write_eval_reports(&out_path, &[report.clone(), baseline.clone()]).map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "model nRMSE {:.6} | persistence nRMSE {:.6} ({} windows, {} steps, cfg {}) -> {}",
        report.value,
        baseline.value,
        report.samples,
        report.solver_steps,
        report.cfg_scale,
        out_path.display()
    );
    Ok(())
}

fn cmd_multires(global: &GlobalArgs, args: MultiresArgs) -> CliResult {
    let cfg = load_config(global)?;
    let (params, run_cfg, model) = load_model(&args.ckpt)?;
    let container = read_container(&args.data).map_err(|e| CliError::data(e.to_string()))?;
    let resolutions = parse_usize_list(&args.resolutions)?;
    let mut sample_cfg = run_cfg.sample;
    sample_cfg.seed = cfg.seed;
    if let Some(steps) = args.steps {
        sample_cfg.steps = steps;
    }
    let opts = EvalOptions { sample: sample_cfg, max_windows: args.max_windows, n_seeds: 1 };
    let dataset_id = args.data.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let reports = eval_multires(&params, &model, &container, &resolutions, &opts, &dataset_id, "model")
        .map_err(|e| CliError::numeric(e.to_string()))?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::data(e.to_string()))?;
    write_manifest(&cfg.out_dir, &cfg.to_toml(), cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
    let out_path = cfg.out_dir.join("eval_multires.tsv");
    write_eval_reports(&out_path, &reports).map_err(|e| CliError::data(e.to_string()))?;
    for r in &reports {
        println!("resolution {:>10}: nRMSE {:.6}", r.resolution, r.value);
    }
    println!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_ablate(global: &GlobalArgs) -> CliResult {
    let cfg = load_config(global)?;
    let model = cfg.model_config().map_err(|e| CliError::config(e.to_string()))?;
    let datasets = load_datasets(&cfg)?;
    let mut train_sets = Vec::new();
    let mut test_set = None;
    for d in datasets {
        let (tr, te) = d.split(0.9, cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
        if test_set.is_none() {
            test_set = Some(te);
        }
        train_sets.push(tr);
    }
    let test_set = test_set.ok_or_else(|| CliError::data("no datasets"))?;
    let eval_opts = EvalOptions {
        sample: SampleConfig { steps: 10, ..cfg.sample },
        max_windows: 4,
        n_seeds: 1,
    };
    let rows = run_ablation(
        &model,
        &cfg.train,
        &train_sets,
        &test_set,
        &eval_opts,
        &[PredTarget::X, PredTarget::V, PredTarget::Eps],
    )
    .map_err(|e| CliError::data(e.to_string()))?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::data(e.to_string()))?;
    write_manifest(&cfg.out_dir, &cfg.to_toml(), cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
    let out_path = cfg.out_dir.join("ablation.tsv");
    write_ablation_report(&out_path, &rows).map_err(|e| CliError::data(e.to_string()))?;
    let mut x_nrmse = None;
    let mut v_nrmse = None;
    for row in &rows {
        match &row.status {
            AblationStatus::Completed { final_train_loss, nrmse } => {
                println!(
                    "{:>8}: completed, final loss {:.4e}, nRMSE {:.6}",
                    target_name(row.target),
                    final_train_loss,
                    nrmse
                );
                match row.target {
                    PredTarget::X => x_nrmse = Some(*nrmse),
                    PredTarget::V => v_nrmse = Some(*nrmse),
                    PredTarget::Eps => {}
                }
            }
            AblationStatus::Diverged { step } => {
                println!("{:>8}: diverged at step {step} (recorded, not a crash)", target_name(row.target));
            }
        }
    }
    if let (Some(x), Some(v)) = (x_nrmse, v_nrmse) {
        println!(
            "directional check: x-pred {:.6} {} v-pred {:.6}",
            x,
            if x <= v { "<=" } else { ">" },
            v
        );
    }
    println!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_diagnose(global: &GlobalArgs, args: DiagnoseArgs) -> CliResult {
    let cfg = load_config(global)?;
    let datasets: Vec<DatasetContainer> = args
        .data
        .iter()
        .map(|p| read_container(p).map_err(|e| CliError::data(format!("{}: {e}", p.display()))))
        .collect::<CliResult<_>>()?;
    let diag_cfg = DiagnoseConfig { n_samples: args.n_samples, seed: cfg.seed, ..DiagnoseConfig::default() };
    let reports = diagnose(&datasets, &diag_cfg).map_err(|e| CliError::numeric(e.to_string()))?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::data(e.to_string()))?;
    write_manifest(&cfg.out_dir, &cfg.to_toml(), cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
    let table = cfg.out_dir.join("effective_dim.tsv");
    let spectra = cfg.out_dir.join("spectra.tsv");
    write_report(&table, &reports).map_err(|e| CliError::data(e.to_string()))?;
    write_spectra(&spectra, &reports).map_err(|e| CliError::data(e.to_string()))?;
    println!("dim\tV\ttarget\tPR\tEV90\tEV90/V");
    for r in &reports {
        println!(
            "{}D\t{}\t{}\t{:.2}\t{}\t{:.4}",
            r.dim_type.as_usize(),
            r.v,
            r.target.label(),
            r.pr,
            r.ev90,
            r.ev90_over_v
        );
    }
    println!("wrote {} and {}", table.display(), spectra.display());
    Ok(())
}

fn cmd_bench(global: &GlobalArgs, args: BenchArgs) -> CliResult {
    let cfg = load_config(global)?;
    let steps_list = parse_usize_list(&args.steps_list)?;
    let mut model = ModelConfig::preset(args.preset.into());
    model.vocab = pdeflow_core::ChannelVocabulary::new(vec!["Vx".into()]).map_err(|e| CliError::config(e.to_string()))?;
    let params: ParamStore<f32> = init_model_params(&model, cfg.seed);
    // synthetic history for the latency measurement
    let spec = GenSpec {
        family: Family::Advection,
        n_traj: 1,
        grid: vec![128],
        t_steps: model.history_len,
        dt: 0.02,
        beta: 1.0,
        beta_spread: 0.0,
        nu: 0.0,
        max_mode: 4,
        channels: 1,
        seed: cfg.seed,
    };
    let data = generate(&spec).map_err(|e| CliError::data(e.to_string()))?;
    let hist = history_window(&data, &model, 0)?;
    let mut lines = Vec::new();
    println!("one-shot {}-frame generation, mean +/- std over {} runs:", model.horizon, args.runs);
    for &steps in &steps_list {
        let sc = SampleConfig { steps, seed: cfg.seed, ..cfg.sample };
        // warmup excluded from timing
        sample(&params, &model, &[&hist], &sc).map_err(|e| CliError::numeric(e.to_string()))?;
        let mut times = Vec::with_capacity(args.runs);
        for run in 0..args.runs {
            let sc_run = SampleConfig { seed: cfg.seed.wrapping_add(run as u64), ..sc };
            let start = std::time::Instant::now();
            sample(&params, &model, &[&hist], &sc_run).map_err(|e| CliError::numeric(e.to_string()))?;
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
        let line = format!("{steps} steps: {:.5} +/- {:.5} s", mean, var.sqrt());
        println!("{line}");
        lines.push(format!("{steps}\t{mean:.6}\t{:.6}\t{}", var.sqrt(), args.runs));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::data(e.to_string()))?;
    write_manifest(&cfg.out_dir, &cfg.to_toml(), cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
    let out_path = cfg.out_dir.join("bench.tsv");
    let mut body = String::from("steps\tmean_s\tstd_s\truns\n");
    for l in lines {
        body.push_str(&l);
        body.push('\n');
    }
    std::fs::write(&out_path, body).map_err(|e| CliError::data(e.to_string()))?;
    println!("wrote {}", out_path.display());
    Ok(())
}
