use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use dampid::dataset::{generate_dataset, read_io_pair, write_trajectory, Dataset, DatasetConfig};
use dampid::experiments::{
    evaluate_saved, load_fold_models, run_experiment, save_fold_models, step_generalization_eval, write_generalization_report,
    write_report, ExperimentSpec, InputFilter, Interval, DESK_BATCH_SIZE,
};
use dampid::features::Featurizer;
use dampid::nn::{gradient_check, load_weights, predict, CellKind, SequenceBatch};
use dampid::seed::derive_seed;
use dampid::sim::{InputSignal, Trajectory};

#[derive(Parser, Debug)]
#[command(name = "dampid", version, about = "Damping-factor identification with recurrent networks")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Root seed; every random stream is derived from it and a purpose label.
    #[arg(long, global = true)]
    master_seed: Option<u64>,
    /// Worker threads for featurization and simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with defaults for any of the options below; flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Omit timestamps from written indexes so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

/// Values a config file may set. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    master_seed: Option<u64>,
    threads: Option<usize>,
    noise_sigma: Option<f64>,
    stride: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    initial_lr: Option<f64>,
    momentum: Option<f64>,
    deterministic: Option<bool>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one trajectory.
    Simulate(SimulateArgs),
    /// Simulate the full dataset and write it with its manifest.
    GenDataset(GenDatasetArgs),
    /// Featurize every window of a dataset and report the tensor shape.
    Featurize(FeaturizeArgs),
    /// Train both cross-validation folds of an experiment.
    Train(TrainArgs),
    /// Evaluate saved fold models.
    Evaluate(EvaluateArgs),
    /// Predict ζ for one window of an I/O pair.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    zeta: f64,
    /// step:<magnitude>, ramp:<slope> or sine:<amplitude>@<hz>
    #[arg(long, default_value = "step:1")]
    input: String,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, default_value_t = 1000.0)]
    fs: f64,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Noise seed (default: derived from the master seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "trajectory.dmt")]
    out: PathBuf,
    /// Also write t,u,y columns to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDatasetArgs {
    /// 8 inputs (64 trajectories) instead of 5 (40).
    #[arg(long)]
    extended: bool,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    stride: Option<usize>,
    /// Write the feature tensor (windows × rows × frames, float32) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment id (Exp1 … Exp7).
    #[arg(long)]
    exp: String,
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for the fold models and the evaluation report.
    #[arg(long)]
    out: PathBuf,
    /// Window stride. Any stride above 1 is a reduced run and defaults the
    /// batch size to the reduced-run value unless --batch-size is given.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    initial_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Experiment id; defaults to the one the models were trained for.
    #[arg(long)]
    exp: Option<String>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict the headline MAD to windows inside this span, e.g. 3-6.
    #[arg(long)]
    interval: Option<Interval>,
    /// Restrict the headline MAD to step inputs.
    #[arg(long)]
    steps_only: bool,
    /// Also test fold-1's model on steps of magnitudes ±1, ±2, ±5, ±10.
    #[arg(long)]
    generalization: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with a t,u,y header, or a trajectory container.
    #[arg(long)]
    input: PathBuf,
    /// Window start in seconds.
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "bilstm")]
    cell: CellKind,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

struct Ctx {
    master_seed: u64,
    deterministic: bool,
    file: FileConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = FileConfig::load(cli.global.config.as_deref())?;
    if let Some(n) = cli.global.threads.or(file.threads) {
        ensure!(n > 0, "--threads must be >= 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        master_seed: cli.global.master_seed.or(file.master_seed).unwrap_or(0),
        deterministic: cli.global.deterministic || file.deterministic.unwrap_or(false),
        file,
    };
    match cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::GenDataset(a) => gen_dataset(&ctx, a),
        Command::Featurize(a) => featurize(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
    }
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> Result<ExitCode> {
    let input: InputSignal = a.input.parse()?;
    let sigma = a.noise_sigma.or(ctx.file.noise_sigma).unwrap_or(0.0);
    let seed = a
        .seed
        .unwrap_or_else(|| derive_seed(ctx.master_seed, &format!("simulate/{}/{}", input.label(), a.zeta)));
    let t = Trajectory::simulate(input, a.zeta, a.seconds, a.fs, sigma, seed)?;
    write_trajectory(&a.out, &t).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(csv) = &a.csv {
        let mut out = String::from("t,u,y\n");
        for (i, (u, y)) in t.u.iter().zip(&t.y).enumerate() {
            out.push_str(&format!("{},{u},{y}\n", i as f64 / a.fs));
        }
        fs::write(csv, out).with_context(|| format!("writing {}", csv.display()))?;
    }
    println!("{} samples, zeta {}, input {} -> {}", t.len(), a.zeta, input, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gen_dataset(ctx: &Ctx, a: GenDatasetArgs) -> Result<ExitCode> {
    let sigma = a.noise_sigma.or(ctx.file.noise_sigma).unwrap_or(0.0);
    let ds = generate_dataset(&DatasetConfig::new(a.extended, sigma, ctx.master_seed))?;
    ds.save(&a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!(
        "{} trajectories, {} windows -> {}",
        ds.manifest.trajectories.len(),
        ds.manifest.total_windows()?,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn featurize(ctx: &Ctx, a: FeaturizeArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.dataset)?;
    let stride = a.stride.or(ctx.file.stride).unwrap_or(1);
    let windows = ds.windows(stride)?;
    let store = dampid::experiments::FeatureStore::build(&ds, &windows, &Featurizer::standard())?;
    let shape = store.samples.features.shape().to_vec();
    if let Some(out) = &a.out {
        let header = serde_json::json!({ "windows": store.windows, "targets": store.samples.targets });
        let data = store.samples.features.iter().copied().collect();
        let tensor = dampid::container::Tensor::f32(shape.clone(), data)?;
        dampid::container::write_bundle(out, &header, &[("features".to_string(), tensor)])?;
    }
    println!("features {shape:?}");
    Ok(ExitCode::SUCCESS)
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<ExitCode> {
    let mut spec = ExperimentSpec::preset(&a.exp)?;
    if let Some(src) = &spec.reuse_models_of {
        bail!("{} only evaluates the {src} models; train {src} and run `evaluate --exp {}`", spec.id, spec.id);
    }
    let f = &ctx.file;
    spec.stride = a.stride.or(f.stride).unwrap_or(spec.stride);
    if spec.stride > 1 {
        spec.train.batch_size = DESK_BATCH_SIZE;
    }
    if let Some(v) = a.batch_size.or(f.batch_size) {
        spec.train.batch_size = v;
    }
    if let Some(v) = a.epochs.or(f.epochs) {
        spec.train.epochs = v;
    }
    if let Some(v) = a.initial_lr.or(f.initial_lr) {
        spec.train.initial_lr = v;
    }
    if let Some(v) = a.momentum.or(f.momentum) {
        spec.train.momentum = v;
    }
    spec.validate()?;
    let ds = load_dataset(&a.dataset)?;
    let featurizer = Featurizer::standard();
    let run = run_experiment(&spec, &ds, &featurizer, ctx.master_seed, |fold, s| {
        let val = s.val_loss.map_or(String::new(), |v| format!(" val {v:.5}"));
        eprintln!("fold {fold} epoch {:>3} lr {:.1e} train {:.5}{val}", s.epoch, s.lr, s.train_loss);
    })?;
    save_fold_models(&spec, &run.models, &a.out)?;
    write_report(&run.report, &a.out.join("report"), ctx.deterministic)?;
    print_summary(&run.report);
    Ok(ExitCode::SUCCESS)
}

fn print_summary(r: &dampid::experiments::EvalReport) {
    for f in &r.folds {
        let train = f.train_mad.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("{} fold {}: train MAD {train}, test MAD {:.4}", r.experiment_id, f.fold, f.test_mad);
    }
    let train = r.train_mad.map_or("-".to_string(), |m| format!("{m:.4}"));
    println!(
        "{}: train MAD {train}, test MAD {:.4}, {} windows in {}: {:.4}",
        r.experiment_id,
        r.test_mad,
        r.eval_filter.label(),
        r.eval_interval.label(),
        r.filtered_test_mad
    );
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.dataset)?;
    let featurizer = Featurizer::standard();
    let (trained, models) = load_fold_models(&a.models, &ds, ctx.master_seed)?;
    let mut spec = match &a.exp {
        Some(id) => ExperimentSpec::preset(id)?,
        None => trained.clone(),
    };
    if spec.id != trained.id && spec.reuse_models_of.as_deref() != Some(trained.id.as_str()) {
        bail!("models in {} belong to {}, not {}", a.models.display(), trained.id, spec.id);
    }
    if a.steps_only {
        spec.eval_filter = InputFilter::Steps;
    }
    if let Some(iv) = a.interval {
        spec.eval_interval = iv;
    }
    let report = evaluate_saved(&spec, &ds, &featurizer, &a.models, ctx.master_seed)?;
    write_report(&report, &a.out, ctx.deterministic)?;
    print_summary(&report);
    if a.generalization {
        let g = step_generalization_eval(&models[0], &featurizer, ds.manifest.noise_sigma, ctx.master_seed, trained.stride)?;
        write_generalization_report(&g, &a.out.join("generalization"), ctx.deterministic)?;
        for h in &g.histograms {
            println!(
                "steps {}: MAD {:.4}",
                h.interval.label(),
                h.weighted_mad().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Reads `t,u,y` with a header row; returns the sample rate implied by `t`.
fn read_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Option<f64>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} has no {name} column", path.display()))
    };
    let (ti, ui, yi) = (col("t")?, col("u")?, col("y")?);
    let (mut t, mut u, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .with_context(|| format!("row {}: bad number", line + 2))
        };
        t.push(get(ti)?);
        u.push(get(ui)?);
        y.push(get(yi)?);
    }
    let fs = (t.len() >= 2).then(|| (t.len() - 1) as f64 / (t[t.len() - 1] - t[0]));
    Ok((u, y, fs))
}

fn predict_cmd(a: PredictArgs) -> Result<ExitCode> {
    let (weights, header) =
        load_weights::<f32>(&a.model, None).with_context(|| format!("loading model {}", a.model.display()))?;
    let featurizer = Featurizer::standard();
    let fs = featurizer.config().fs;
    let is_csv = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (u, y) = if is_csv {
        let (u, y, rate) = read_csv(&a.input)?;
        if let Some(rate) = rate {
            ensure!(
                (rate - fs).abs() <= 1e-3 * fs,
                "input is sampled at {rate:.3} Hz, the model expects {fs} Hz"
            );
        }
        (u, y)
    } else {
        read_io_pair(&a.input).with_context(|| format!("reading {}", a.input.display()))?
    };
    ensure!(a.offset >= 0.0, "--offset must be >= 0");
    let start = (a.offset * fs).round() as usize;
    let len = featurizer.window_samples();
    ensure!(
        u.len() >= start + len,
        "sequence has {} samples; a window at {} s needs {}",
        u.len(),
        a.offset,
        start + len
    );
    let mut x = featurizer
        .featurize_pair(&u[start..start + len], &y[start..start + len])?
        .values
        .mapv(|v| v as f32);
    if let Some(n) = &header.normalizer {
        n.apply(x.view_mut());
    }
    let batch = SequenceBatch::from_views(&[x.view()])?;
    let zeta = predict(&weights, &batch)?[0];
    let mut out = std::io::stdout().lock();
    writeln!(out, "zeta_hat={zeta} model={}", header.model_id)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Result<ExitCode> {
    ensure!(a.trials > 0, "--trials must be >= 1");
    let r = gradient_check(a.cell, a.trials, derive_seed(ctx.master_seed, "gradcheck"))?;
    println!(
        "{}: {} parameters over {} trials, max relative error {:.3e} ({})",
        r.cell_kind, r.parameters_checked, r.trials, r.max_rel_error, r.worst_tensor
    );
    if r.passed(a.tolerance) {
        println!("PASS (tolerance {:.0e})", a.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (tolerance {:.0e})", a.tolerance);
        Ok(ExitCode::FAILURE)
    }
}
