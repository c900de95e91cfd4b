use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relcomp::geometry::{self, PointCloud, Role};
use relcomp::mvpgen::{self, GenConfig, Split};
use relcomp::train::{self, GradScope, RunConfig, Toggle, Trainer};
use relcomp::{Error, Result};

#[derive(Parser)]
#[command(name = "relcomp", version, about = "Point cloud completion: data generation, training and evaluation")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render partial views and resample ground truth into a dataset directory.
    GenData(GenArgs),
    /// Train a model; checkpoints and logs go to the results directory.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth itself) at several resolutions.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradArgs),
    /// Train the full model and variants with modules disabled.
    Ablate(AblateArgs),
    /// Complete a single partial point cloud.
    Infer(InferArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Directory of `<category>/<model>.xyz|.bin` dense surface samples.
    #[arg(long, conflicts_with = "synthetic")]
    models: Option<PathBuf>,
    /// Generate this many primitive shapes instead of reading --models.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Dense points per synthetic shape.
    #[arg(long, default_value_t = 65_536)]
    synthetic_points: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    base_n: usize,
    /// Depth grid as WIDTHxHEIGHT.
    #[arg(long, default_value = "200x150", value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 0.2)]
    split_frac: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the checkpoint in the results directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Use the small overfitting preset when no --config is given.
    #[arg(long)]
    toy: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file; omitted, the ground truth is scored against itself.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Output sizes in points.
    #[arg(long, value_delimiter = ',', default_value = "2048,4096,8192,16384")]
    resolutions: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    /// primitives, kernels, losses, end2end or all.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "psa,dual_path,kernel_selection")]
    toggles: Vec<Toggle>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    toy: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Partial cloud (`.xyz` text or `.bin`).
    #[arg(long)]
    input: PathBuf,
    /// Output `.xyz` for the fine completion; the coarse one is written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    out_n: Option<usize>,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse::<usize>().map_err(|e| e.to_string())?;
    let h = h.parse::<usize>().map_err(|e| e.to_string())?;
    Ok((w, h))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a, cli.seed.unwrap_or(0)),
        Cmd::Train(a) => {
            let cfg = run_config(cli.config.as_deref(), cli.seed, a.toy)?;
            cmd_train(a, cfg)
        }
        Cmd::Eval(a) => cmd_eval(a, cli.seed.unwrap_or(0)),
        Cmd::Gradcheck(a) => cmd_gradcheck(a, cli.seed.unwrap_or(0)),
        Cmd::Ablate(a) => {
            let cfg = run_config(cli.config.as_deref(), cli.seed, a.toy)?;
            cmd_ablate(a, cfg)
        }
        Cmd::Infer(a) => cmd_infer(a, cli.seed.unwrap_or(0)),
    }
}

fn run_config(path: Option<&Path>, seed: Option<u64>, toy: bool) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None if toy => RunConfig::toy(),
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn results_dir(explicit: Option<PathBuf>, cfg: Option<&RunConfig>, name: &str) -> PathBuf {
    explicit
        .or_else(|| cfg.and_then(|c| c.data.results.clone()))
        .unwrap_or_else(|| PathBuf::from("results").join(name))
}

fn write_report(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serialises")
}

fn gen_data(a: GenArgs, seed: u64) -> Result<ExitCode> {
    let models = match (&a.models, a.synthetic) {
        (Some(dir), _) => mvpgen::load_models(dir)?,
        (None, Some(n)) => mvpgen::synthetic_models(n, a.synthetic_points, seed)?,
        (None, None) => return Err(Error::config("pass --models <dir> or --synthetic <count>")),
    };
    if models.is_empty() {
        return Err(Error::Generation("no source models found".into()));
    }
    let cfg = GenConfig {
        base_n: a.base_n,
        grid_w: a.grid.0,
        grid_h: a.grid.1,
        seed,
        split_frac: a.split_frac,
        jobs: a.jobs,
    };
    let data = mvpgen::generate(&models, &cfg)?;
    let manifest = mvpgen::write_dataset(&a.out, &data, &cfg)?;
    println!(
        "{} models -> {} samples ({} views skipped) in {}",
        models.len(),
        manifest.sample_count,
        manifest.skipped.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_pairs(dir: &Path, cfg: &RunConfig) -> Result<(Vec<train::Pair>, Vec<train::Pair>)> {
    let (manifest, samples) = mvpgen::read_dataset(dir)?;
    if manifest.base_n != cfg.model.partial_n {
        return Err(Error::config(format!(
            "dataset partials have {} points but the model expects {}",
            manifest.base_n, cfg.model.partial_n
        )));
    }
    let train_pairs = train::pairs_from(&samples, Some(Split::Train), cfg.model.out_n)?;
    let val = train::pairs_from(&samples, Some(Split::Test), cfg.model.out_n)?;
    if train_pairs.is_empty() {
        return Err(Error::Manifest(format!("{} has no training samples", dir.display())));
    }
    Ok((train_pairs, val))
}

fn cmd_train(a: TrainArgs, mut cfg: RunConfig) -> Result<ExitCode> {
    let out = results_dir(a.out, Some(&cfg), "train");
    let mut trainer = if a.resume {
        let t = Trainer::resume(&out)?;
        if t.cfg.seed != cfg.seed && cfg.seed != 0 {
            return Err(Error::config("--seed differs from the checkpoint's seed"));
        }
        t
    } else {
        if let Some(d) = a.dataset.clone() {
            cfg.data.dataset = Some(d);
        }
        cfg.validate()?;
        Trainer::new(cfg)?
    };
    if let Some(e) = a.epochs {
        trainer.cfg.epochs = e;
    }
    if let Some(s) = a.max_steps {
        trainer.cfg.max_steps = s;
    }
    let dataset = a
        .dataset
        .or_else(|| trainer.cfg.data.dataset.clone())
        .ok_or_else(|| Error::config("no dataset: pass --dataset or set data.dataset"))?;
    let (train_pairs, val) = load_pairs(&dataset, &trainer.cfg)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_report(&out, "config.toml", &trainer.cfg.to_toml())?;
    if !a.resume {
        trainer.save(&out)?;
    }
    trainer.fit(&train_pairs, &val, Some(&out))?;
    let last = trainer.log.steps.last();
    println!(
        "trained to step {} (epoch {}); last loss {:.6}, fine CD {:.6}; checkpoint in {}",
        trainer.step,
        trainer.epoch,
        last.map_or(f64::NAN, |s| s.loss.total),
        last.map_or(f64::NAN, |s| s.loss.fine),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs, seed: u64) -> Result<ExitCode> {
    let split = match a.split.as_str() {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        "all" => None,
        s => return Err(Error::config(format!("unknown split `{s}`"))),
    };
    let (_, samples) = mvpgen::read_dataset(&a.dataset)?;
    let samples: Vec<_> = samples.into_iter().filter(|s| split.is_none_or(|sp| s.split == sp)).collect();
    if samples.is_empty() {
        return Err(Error::Manifest(format!("no {} samples in {}", a.split, a.dataset.display())));
    }
    let model = a.checkpoint.as_deref().map(train::load_model).transpose()?;
    let reports = train::cmd_eval(model.as_ref().map(|(p, c)| (p, &c.model)), &samples, &a.resolutions, seed)?;
    let text = train::format_eval(&reports);
    print!("{text}");
    let out = results_dir(a.out, model.as_ref().map(|(_, c)| c), "eval");
    write_report(&out, "eval.txt", &text)?;
    write_report(&out, "eval.json", &to_json(&reports))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradArgs, seed: u64) -> Result<ExitCode> {
    let scopes = if a.scope == "all" {
        vec![GradScope::Primitives, GradScope::Kernels, GradScope::Losses, GradScope::End2end]
    } else {
        vec![a.scope.parse::<GradScope>()?]
    };
    let mut rows = Vec::new();
    for s in scopes {
        rows.extend(train::cmd_gradcheck(s, seed)?);
    }
    let text = train::format_gradcheck(&rows);
    print!("{text}");
    if let Some(dir) = a.out {
        write_report(&dir, "gradcheck.txt", &text)?;
        write_report(&dir, "gradcheck.json", &to_json(&rows))?;
    }
    if rows.iter().all(|r| r.passed) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(4))
    }
}

fn cmd_ablate(a: AblateArgs, mut cfg: RunConfig) -> Result<ExitCode> {
    if let Some(s) = a.max_steps {
        cfg.max_steps = s;
    }
    cfg.validate()?;
    let (train_pairs, val) = load_pairs(&a.dataset, &cfg)?;
    let runs = train::cmd_ablate(&cfg, &a.toggles, &train_pairs, &val)?;
    let text = train::format_ablation(&runs);
    print!("{text}");
    let out = results_dir(a.out, Some(&cfg), "ablate");
    write_report(&out, "ablation.txt", &text)?;
    write_report(&out, "ablation.json", &to_json(&runs))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(a: InferArgs, seed: u64) -> Result<ExitCode> {
    let (params, cfg) = train::load_model(&a.checkpoint)?;
    let model = &cfg.model;
    let mut x = mvpgen::read_points(&a.input)?;
    if x.len() < model.partial_n {
        return Err(Error::Manifest(format!(
            "{} has {} points; the model needs at least {}",
            a.input.display(),
            x.len(),
            model.partial_n
        )));
    }
    if x.len() > model.partial_n {
        let cloud = PointCloud::new(x, Role::Partial)?;
        x = geometry::farthest_point_sample(&cloud, model.partial_n, seed)?.into_points();
    }
    let out_n = a.out_n.unwrap_or(model.out_n);
    let (coarse, fine) = relcomp::networks::infer(&params, model, &x, out_n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    mvpgen::write_xyz(&a.out, &fine)?;
    let coarse_path = a.out.with_extension("coarse.xyz");
    mvpgen::write_xyz(&coarse_path, &coarse)?;
    println!(
        "{} fine points -> {}; {} coarse points -> {}",
        fine.len(),
        a.out.display(),
        coarse.len(),
        coarse_path.display()
    );
    Ok(ExitCode::SUCCESS)
}
