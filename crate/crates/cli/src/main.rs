//! Command-line front end: scene generation, training, evaluation,
//! prediction, gradient verification and the loss-mode ablation.
//!
//! Settings come from built-in defaults, then `--config`, then `--set`,
//! then subcommand flags; a later source overrides an earlier one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semdepth::config::{KeyValues, Settings};
use semdepth::data::{
    generate_dataset, load_manifest, load_sample, read_ppm, Manifest, StereoSample,
};
use semdepth::losses::LossMode;
use semdepth::metrics::{aggregate, write_metrics_csv};
use semdepth::network::{init_params, load_checkpoint, ModelParams};
use semdepth::train::{
    evaluate, predict, run_ablation, train, write_prediction, write_runs_csv, write_table_csv,
    AblationConfig, RunFiles,
};
use semdepth::verify;
use semdepth::Error;

#[derive(Parser, Debug)]
#[command(
    name = "semdepth",
    version,
    about = "Joint monocular depth and semantic segmentation from stereo supervision"
)]
struct Cli {
    /// key=value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting (repeatable), e.g. --set lr=5e-5.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic stereo scenes and a manifest.
    Gen(GenArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Predict disparity and labels for one image.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Train every loss mode over several seeds and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 160)]
    count: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    objects_min: Option<usize>,
    #[arg(long)]
    objects_max: Option<usize>,
    #[arg(long)]
    d_min: Option<u32>,
    #[arg(long)]
    d_max: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// d, d+s, d+s+cdd or d+cdd.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training samples.
    #[arg(long)]
    manifest: PathBuf,
    /// Samples evaluated after training (and every eval_interval epochs).
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialisation; the
    /// learning-rate schedule restarts.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the checkpoint and logs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Average with the prediction on the mirrored image.
    #[arg(long)]
    pp: bool,
    /// Per-sample metrics CSV; the mean is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Binary PPM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    pp: bool,
    /// Output prefix; writes PREFIX_disp.pgm, PREFIX_sem.pgm and
    /// PREFIX_preview.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out samples; without it, `--eval-count` samples are split off
    /// the manifest.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    eval_count: usize,
    /// Comma-separated modes.
    #[arg(long, default_value = "d,d+s,d+s+cdd,d+cdd")]
    modes: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Runs trained concurrently, each on one thread.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    flags: TrainFlags,
    /// Output directory: ablation.csv, runs.csv and one directory per run.
    #[arg(long)]
    out: PathBuf,
}

/// Exit status classes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config(_) => Failure::Usage(m),
            Error::NonFinite { .. } | Error::NonDeterministic => Failure::Numerical(m),
            _ => Failure::Data(m),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn settings(cli: &Cli) -> std::result::Result<Settings, Failure> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        s.apply(&KeyValues::load(path)?)?;
    }
    let text = cli.overrides.join("\n");
    s.apply(&KeyValues::parse(&text)?)?;
    Ok(s)
}

fn set_opt<T: ToString>(s: &mut Settings, key: &str, v: &Option<T>) -> Outcome {
    if let Some(v) = v {
        s.set(key, &v.to_string())?;
    }
    Ok(())
}

fn apply_train_flags(s: &mut Settings, f: &TrainFlags) -> Outcome {
    set_opt(s, "mode", &f.mode)?;
    set_opt(s, "epochs", &f.epochs)?;
    set_opt(s, "batch_size", &f.batch)?;
    set_opt(s, "lr", &f.lr)
}

fn load_samples(manifest: &Manifest) -> std::result::Result<Vec<StereoSample>, Failure> {
    Ok(manifest
        .entries()
        .iter()
        .map(|p| load_sample(p))
        .collect::<semdepth::Result<Vec<_>>>()?)
}

fn load_set(path: &Path) -> std::result::Result<Vec<StereoSample>, Failure> {
    load_samples(&load_manifest(path)?)
}

/// The model input size follows the data; scene settings are not used.
fn fit_model_to(s: &mut Settings, samples: &[StereoSample]) {
    if let Some(first) = samples.first() {
        s.model.height = first.height();
        s.model.width = first.width();
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Outcome {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| io_failure(path, e))?;
    fs::write(path, buf).map_err(|e| io_failure(path, e))
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Outcome {
    let mut s = settings(cli)?;
    set_opt(&mut s, "height", &a.height)?;
    set_opt(&mut s, "width", &a.width)?;
    set_opt(&mut s, "num_classes", &a.classes)?;
    set_opt(&mut s, "objects_min", &a.objects_min)?;
    set_opt(&mut s, "objects_max", &a.objects_max)?;
    set_opt(&mut s, "d_min", &a.d_min)?;
    set_opt(&mut s, "d_max", &a.d_max)?;
    set_opt(&mut s, "scene_seed", &a.seed)?;
    if a.count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    let manifest = generate_dataset(&a.out, &s.scene, a.count)?;
    println!("wrote {} scenes, manifest {}", a.count, manifest.display());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let mut s = settings(cli)?;
    apply_train_flags(&mut s, &a.flags)?;
    set_opt(&mut s, "seed", &a.seed)?;
    let train_set = load_set(&a.manifest)?;
    let eval_set = match &a.eval_manifest {
        Some(p) => load_set(p)?,
        None => Vec::new(),
    };
    fit_model_to(&mut s, &train_set);
    let params = match &a.init {
        Some(p) => {
            let params = load_checkpoint(p)?;
            s.model = params.config().clone();
            params
        }
        None => init_params(&s.model, s.train.seed)?,
    };
    s.train.validate()?;
    s.model.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let echo = a.out.join("config.txt");
    fs::write(&echo, s.to_key_values().to_text()).map_err(|e| io_failure(&echo, e))?;

    let outcome = train(&s.train, params, &train_set, &eval_set, Some(&a.out))?;
    let files = RunFiles::in_dir(&a.out);
    let last = outcome.log.records.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({}), final loss {:.5}; checkpoint {}",
        s.train.epochs,
        s.train.mode,
        last.loss.total,
        files.checkpoint.display()
    );
    if let Some(e) = &last.eval {
        println!("eval {}", e.depth);
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Outcome {
    let s = settings(cli)?;
    s.train.eval.validate()?;
    let params = load_checkpoint(&a.checkpoint)?;
    let samples = load_set(&a.manifest)?;
    let rows = evaluate(&params, &samples, &s.train.eval, a.pp)?;
    let mean =
        aggregate(&rows, "mean").ok_or_else(|| Failure::Data("manifest has no samples".into()))?;
    if let Some(out) = &a.out {
        write_file(out, |w| write_metrics_csv(w, &rows))?;
    }
    println!("{}", mean.depth);
    if let Some(acc) = mean.semantic_accuracy {
        println!("semantic accuracy {acc:.4}");
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Outcome {
    let params: ModelParams = load_checkpoint(&a.checkpoint)?;
    let image = read_ppm(&a.image)?;
    let pred = predict(&params, &image, a.pp)?;
    let paths = write_prediction(&a.out, &pred)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_gradcheck() -> Outcome {
    let cases = verify::run_all()?;
    let mut failed = 0;
    for c in &cases {
        let r = &c.report;
        println!(
            "{:<4} {:<36} max rel error {:.2e} (tolerance {:.0e}, {} elements)",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            r.max_rel_error,
            r.tolerance,
            r.checked
        );
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!(
            "{failed} of {} gradient checks failed",
            cases.len()
        )));
    }
    println!("all {} gradient checks passed", cases.len());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(
    what: &str,
    text: &str,
) -> std::result::Result<Vec<T>, Failure> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("{what}: cannot parse '{}'", p.trim())))
        })
        .collect()
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Outcome {
    let mut s = settings(cli)?;
    apply_train_flags(&mut s, &a.flags)?;
    let manifest = load_manifest(&a.manifest)?;
    let (train_set, eval_set) = match &a.eval_manifest {
        Some(p) => (load_samples(&manifest)?, load_set(p)?),
        None => {
            let n_train = manifest.len().saturating_sub(a.eval_count);
            let (tr, ev) = manifest.split(s.train.seed, n_train, a.eval_count)?;
            (load_samples(&tr)?, load_samples(&ev)?)
        }
    };
    fit_model_to(&mut s, &train_set);
    s.train.validate()?;
    s.model.validate()?;
    let cfg = AblationConfig {
        modes: parse_list::<LossMode>("--modes", &a.modes)?,
        seeds: parse_list("--seeds", &a.seeds)?,
        train: s.train.clone(),
        model: s.model.clone(),
        threads: a.threads,
    };
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let outcome = run_ablation(&cfg, &train_set, &eval_set, Some(&a.out))?;
    let table = a.out.join("ablation.csv");
    write_file(&table, |w| write_table_csv(w, &outcome.rows))?;
    write_file(&a.out.join("runs.csv"), |w| {
        write_runs_csv(w, &outcome.runs)
    })?;
    let mut stdout = std::io::stdout().lock();
    write_table_csv(&mut stdout, &outcome.rows).map_err(|e| Failure::Data(e.to_string()))?;
    let _ = stdout.flush();
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Ablate(a) => cmd_ablate(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
