mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use salient_core::eval::{self, EvalOptions, GridSpec};
use salient_core::gradcheck::op_suite;
use salient_core::losses::{mmd_squared, sample_laplace, Kernel, KernelConfig, LaplacePrior};
use salient_core::toydata::{export_dataset, generate_dataset, DatasetSpec, FormantWorld, SampleOptions};
use salient_core::trainer::{self, Checkpoint, CONFIG_FILE};
use salient_core::{Rng, Tensor};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// `println!` that stops quietly once the reader has gone away.
macro_rules! out {
    ($($arg:tt)*) => {
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            panic!("writing to stdout: {e}");
        }
    };
}

#[derive(Parser)]
#[command(
    name = "salient",
    version,
    about = "Clone-based salient feature training on toy formant data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set schedule.sigma0=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clone-batch dataset file for the configured world.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        batches: usize,
    },
    /// Train an encoder; the run directory gets config, metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the expanded config and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a checkpoint's encoder (and a PCA baseline) on fresh toy data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also score PCA features of the same dimension.
        #[arg(long)]
        pca: bool,
    },
    /// Grid correspondence CSV and SVG for a trained checkpoint.
    ExportFigure {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every differentiable op and the objective.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// MMD² against a brute-force sum and on same/different distributions.
    MmdSelftest {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        /// Sample size of the two-distribution check.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

fn invalid(e: anyhow::Error) -> Failure {
    Failure::Invalid(e)
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<salient_core::Error> for Failure {
    fn from(e: salient_core::Error) -> Self {
        match e {
            salient_core::Error::InvalidArgument(_) => Failure::Invalid(e.into()),
            _ => Failure::Runtime(e.into()),
        }
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
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { common, batches } => gen_data(&common, batches),
        Command::Train {
            common,
            resume,
            dry_run,
        } => train(&common, resume.as_deref(), dry_run),
        Command::Eval {
            common,
            checkpoint,
            pca,
        } => evaluate(&common, &checkpoint, pca),
        Command::ExportFigure { common, checkpoint } => export_figure(&common, &checkpoint),
        Command::Gradcheck {
            instances,
            h,
            tol,
            seed,
        } => gradcheck(instances, h, tol, seed),
        Command::MmdSelftest {
            instances,
            samples,
            trials,
            seed,
        } => mmd_selftest(instances, samples, trials, seed),
    }
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn gen_data(common: &Common, batches: usize) -> Result<(), Failure> {
    let config = config::validate_config(common.config.as_deref(), &common.overrides, common.seed).map_err(invalid)?;
    if batches == 0 {
        return Err(invalid(anyhow!("--batches must be ≥ 1")));
    }
    let spec = DatasetSpec {
        world: config.world.clone(),
        clones: config.clones,
        batch: config.batch,
        batches,
        seed: config.seed,
        options: SampleOptions {
            target: config.target,
            share_excitation: false,
        },
    };
    let dir = out_dir(common, "data")?;
    let dataset = generate_dataset(&spec)?;
    let path = dir.join("dataset.sftd");
    export_dataset(&dataset, &path)?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&config).context("config")?,
    )
    .context("writing config")?;
    out!("{}", path.display());
    Ok(())
}

fn train(common: &Common, resume: Option<&Path>, dry_run: bool) -> Result<(), Failure> {
    let config = config::validate_config(common.config.as_deref(), &common.overrides, common.seed).map_err(invalid)?;
    if dry_run {
        out!("{}", serde_json::to_string_pretty(&config).context("config")?);
        return Ok(());
    }
    let dir = out_dir(common, "run")?;
    let every = config.metrics_every.max(1);
    let out = trainer::run_with(&config, &dir, resume, |m| {
        if m.step % every == 0 {
            eprintln!(
                "step {:>8}  D_s {:.5}  D_f {:.5}  D_d {:.5}  sigma {:.4}",
                m.step, m.d_s, m.d_f, m.d_d, m.sigma_eps
            );
        }
    })?;
    out!("{}", out.checkpoint_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::Runtime(anyhow!("{}: {e}", path.display())))
}

fn evaluate(common: &Common, checkpoint: &Path, pca: bool) -> Result<(), Failure> {
    let mut options: EvalOptions = config::layered(common.config.as_deref(), &common.overrides).map_err(invalid)?;
    if let Some(seed) = common.seed {
        options.seed = seed;
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let report = eval::evaluate(&ckpt, &options)?;
    let mut doc = serde_json::json!({ "step": ckpt.step, "options": options, "encoder": report });
    if pca {
        let world = FormantWorld::new(ckpt.config.world.clone())?;
        let model = eval::fit_pca_baseline(&world, ckpt.config.feature_dim, 20_000, options.seed)?;
        let base = eval::evaluate_extractor(&world, &ckpt.config, &options, &|x| model.project_rows(x))?;
        doc["pca"] = serde_json::to_value(base).context("pca report")?;
    }
    let text = serde_json::to_string_pretty(&doc).context("report")?;
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("eval.json"), &text).context("writing eval.json")?;
    }
    out!("{text}");
    Ok(())
}

fn export_figure(common: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let mut grid: GridSpec = config::layered(common.config.as_deref(), &common.overrides).map_err(invalid)?;
    if let Some(seed) = common.seed {
        grid.seed = seed;
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let world = FormantWorld::new(ckpt.config.world.clone())?;
    let dir = out_dir(common, "figure")?;
    let files = eval::export_figure_data(&world, &ckpt, &grid, &dir.join("figure.csv"))?;
    out!("{}", files.csv.display());
    if let Some(svg) = files.svg {
        out!("{}", svg.display());
    }
    Ok(())
}

fn gradcheck(instances: usize, h: f64, tol: f64, seed: u64) -> Result<(), Failure> {
    if instances == 0 || !(h > 0.0) {
        return Err(invalid(anyhow!("need --instances ≥ 1 and --h > 0")));
    }
    let checks = op_suite(instances, h, seed)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:<24} {:>9} {:>14}  status", "op", "instances", "max rel dev").context("stdout")?;
    let mut ok = true;
    for c in &checks {
        let pass = c.max_deviation < tol;
        ok &= pass;
        writeln!(
            stdout,
            "{:<24} {:>9} {:>14.3e}  {}",
            c.op,
            c.instances,
            c.max_deviation,
            if pass { "ok" } else { "FAIL" }
        )
        .context("stdout")?;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("gradient deviation at or above {tol:e}")))
    }
}

/// `1/(M(M−1)) Σ_{i≠j} [k(zᵢ,zⱼ) − k(zᵢ,vⱼ) − k(zⱼ,vᵢ) + k(vᵢ,vⱼ)]` term by term.
fn brute_mmd(z: &Tensor, v: &Tensor, kernel: &Kernel) -> Result<f64> {
    let m = z.rows();
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                s += kernel.eval(z.row(i), z.row(j))?
                    - kernel.eval(z.row(i), v.row(j))?
                    - kernel.eval(z.row(j), v.row(i))?
                    + kernel.eval(v.row(i), v.row(j))?;
            }
        }
    }
    Ok(s / (m * (m - 1)) as f64)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mmd_selftest(instances: usize, samples: usize, trials: usize, seed: u64) -> Result<(), Failure> {
    if instances == 0 || samples < 2 || trials == 0 {
        return Err(invalid(anyhow!("need --instances ≥ 1, --samples ≥ 2, --trials ≥ 1")));
    }
    let mut rng = Rng::seed(seed);
    let normal = |r: usize, c: usize, rng: &mut Rng| Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect());

    let mut worst: f64 = 0.0;
    let mut zero_ok = true;
    for _ in 0..instances {
        let (m, d) = (2 + rng.below(7), 1 + rng.below(4));
        let kernel = KernelConfig::default().kernel(d)?;
        let z = normal(m, d, &mut rng)?;
        let v = normal(m, d, &mut rng)?;
        let fast = mmd_squared(&z, &v, &kernel)?;
        let slow = brute_mmd(&z, &v, &kernel)?;
        worst = worst.max((fast - slow).abs() / slow.abs().max(1.0));
        zero_ok &= mmd_squared(&z, &z, &kernel)? == 0.0;
    }
    let oracle_ok = worst <= 1e-12;
    out!(
        "oracle      instances {instances:>6}  max deviation {worst:.3e}  {}",
        status(oracle_ok)
    );
    out!(
        "identical   instances {instances:>6}  exactly zero  {}",
        status(zero_ok)
    );

    let kernel = KernelConfig::default().kernel(1)?;
    let laplace = LaplacePrior::default();
    let (mut same, mut diff) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
    for _ in 0..trials {
        let z = normal(samples, 1, &mut rng)?;
        let v = normal(samples, 1, &mut rng)?;
        same.push(mmd_squared(&z, &v, &kernel)?);
        let v = sample_laplace(&laplace, &[samples, 1], &mut rng)?;
        diff.push(mmd_squared(&z, &v, &kernel)?);
    }
    let (ms, md) = (median(same.iter().map(|x| x.abs()).collect()), median(diff));
    let same_ok = ms < 0.01;
    let sep_ok = md >= 5.0 * ms;
    out!(
        "same dist   M {samples:>6}  median |MMD²| {ms:.3e}  {}",
        status(same_ok)
    );
    out!(
        "normal/lap  M {samples:>6}  median MMD² {md:.3e}  ratio {:.1}  {}",
        md / ms,
        status(sep_ok)
    );
    if oracle_ok && zero_ok && same_ok && sep_ok {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("MMD self-test failed")))
    }
}

fn status(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}
