use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use bridgekit::bten::{find, read_bten, write_bten, BtenEntry};
use bridgekit::checkpoint::Checkpoint;
use bridgekit::config::{RunConfig, SampleMethod};
use bridgekit::evaluation::{evaluate_cohort, Case};
use bridgekit::oracle::Suite;
use bridgekit::sampling::{dbim_sample, partial_diffusion_counterfactual, per_sample_seed, Denoiser};
use bridgekit::synthdata::{build_dataset, split_of, Manifest, ManifestRow, SampleLoader, Split};
use bridgekit::training::{train_with, Dataset, Objective, TrainOutput};
use bridgekit::{Error, RngStream, Tensor};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser)]
#[command(
    name = "bridgekit",
    version,
    about = "Diffusion bridge counterfactuals on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired phantom dataset with its manifest.
    GenData(GenDataArgs),
    /// Train a bridge (dbsm) or baseline (dsm) model.
    Train(TrainArgs),
    /// Produce counterfactuals from pathological inputs.
    Sample(SampleArgs),
    /// Score counterfactuals against a dataset.
    Eval(EvalArgs),
    /// Run a built-in verification suite.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Manifest split to train on: train, val, test or all.
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A dataset directory or a single BTEN file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Zero noise on the first step out of T.
    #[arg(long)]
    strict: bool,
    /// Also write 8-bit PGM previews.
    #[arg(long)]
    preview: bool,
    /// Manifest split to sample when --input is a dataset directory.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    check: String,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::ConfigLine { .. } | Error::Generation(_) => EXIT_USAGE,
                Error::Io { .. } => EXIT_IO,
                Error::Data(_) | Error::Format { .. } | Error::Contract(_) | Error::Domain(_) => EXIT_DATA,
                Error::NonFiniteGradient { .. } => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("BRIDGEKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("BRIDGEKIT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    Ok(cfg)
}

/// Logs the resolved config and stores it as `run.cfg` in `dir`.
fn record_config(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let text = cfg.to_text();
    eprint!("{text}");
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Option<Split>> {
    Ok(match s {
        "all" => None,
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        _ => return Err(Error::Config(format!("unknown split `{s}` (train|val|test|all)")).into()),
    })
}

fn select_rows(manifest: &Manifest, split: Option<Split>) -> Vec<ManifestRow> {
    manifest
        .rows
        .iter()
        .filter(|r| split.is_none_or(|s| split_of(&r.id) == s))
        .cloned()
        .collect()
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<u8> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.data.n = n;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    if cfg.data.n == 0 {
        bail!(Error::Config("data.n must be at least 1".into()));
    }
    record_config(&cfg, &a.out)?;
    let manifest = build_dataset(cfg.data.seed, cfg.data.n, &cfg.data.phantom, &cfg.data.lesion, &a.out)?;
    eprintln!("wrote {} samples to {}", manifest.rows.len(), a.out.display());
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<u8> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = match (&a.config, &resume) {
        (None, Some(ck)) => RunConfig::parse(&ck.config_text())?,
        _ => load_config(a.config.as_deref())?,
    };
    cfg.validate()?;
    if let Some(ck) = &resume {
        if ck.net != cfg.net || ck.schedule != cfg.schedule || ck.train.objective != cfg.train.objective {
            bail!(Error::Config(
                "resume checkpoint was trained with a different network, schedule or objective".into()
            ));
        }
    }
    let split = parse_split(&a.split)?;
    let manifest = Manifest::load(&a.data)?;
    let rows = select_rows(&manifest, split);
    if rows.is_empty() {
        bail!(Error::Data(format!(
            "split `{}` of {} is empty",
            a.split,
            a.data.display()
        )));
    }

    let mut loader = SampleLoader::new(&a.data);
    let paired = rows.iter().all(|r| !r.pathological_path.is_empty());
    let dataset = if paired && cfg.train.objective == Objective::Dbsm {
        let pairs = rows
            .iter()
            .map(|r| Ok((loader.tensor(&r.healthy_path)?, loader.tensor(&r.pathological_path)?)))
            .collect::<bridgekit::Result<_>>()?;
        Dataset::Paired(pairs)
    } else {
        let healthy = rows
            .iter()
            .map(|r| loader.tensor(&r.healthy_path))
            .collect::<bridgekit::Result<_>>()?;
        Dataset::Unpaired(healthy)
    };

    record_config(&cfg, &a.out)?;
    let state = resume.map(|ck| ck.state);
    if let Some(s) = &state {
        eprintln!("resuming at step {}", s.step);
    }
    let ckpt = train_with(
        &cfg.train,
        &cfg.schedule,
        &dataset,
        &cfg.net,
        state,
        &TrainOutput::to_dir(&a.out),
    )?;
    eprintln!(
        "trained {} steps on {} samples, loss ema {:.6}",
        ckpt.state.step,
        dataset.len(),
        ckpt.state.loss_ema
    );
    Ok(0)
}

/// Named inputs to sample: `(output stem, pathological image)`.
fn sample_inputs(input: &Path, split: Option<Split>) -> anyhow::Result<Vec<(String, Tensor)>> {
    if input.is_dir() {
        let manifest = Manifest::load(input)?;
        let mut loader = SampleLoader::new(input);
        let out: Vec<(String, Tensor)> = select_rows(&manifest, split)
            .into_iter()
            .map(|r| Ok((r.id.clone(), loader.tensor(&r.pathological_path)?)))
            .collect::<bridgekit::Result<_>>()?;
        if out.is_empty() {
            bail!(Error::Data(format!("no samples selected from {}", input.display())));
        }
        return Ok(out);
    }
    let entries = read_bten(input)?;
    let entry = match find(&entries, "pathological") {
        Ok(e) => e,
        Err(_) if entries.len() == 1 => &entries[0],
        Err(_) => bail!(Error::Data(format!("{} has no `pathological` entry", input.display()))),
    };
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("input file name is not valid UTF-8"))?;
    Ok(vec![(stem.to_string(), entry.to_tensor()?)])
}

fn write_pgm(path: &Path, image: &Tensor) -> anyhow::Result<()> {
    let shape = image.shape();
    if shape.len() != 2 {
        bail!(Error::Data(format!("preview needs a 2-D image, got shape {shape:?}")));
    }
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", shape[1], shape[0]).into_bytes();
    bytes.extend(image.data().iter().map(|&v| (255.0 * (v - lo) / span).round() as u8));
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> anyhow::Result<u8> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.schedule = ckpt.schedule.clone();
    cfg.net = ckpt.net.clone();
    cfg.train = ckpt.train.clone();
    let method = match ckpt.objective() {
        Some(Objective::Dsm) => SampleMethod::Partial,
        _ => SampleMethod::Dbim,
    };
    if a.config.is_some() && cfg.sample.method != method {
        bail!(Error::Config(format!(
            "sample.method={} does not match a {} checkpoint",
            cfg.sample.method.as_str(),
            ckpt.train.objective.as_str()
        )));
    }
    cfg.sample.method = method;
    if let Some(n) = a.steps {
        match method {
            SampleMethod::Dbim => cfg.sample.sampler.n_steps = n,
            SampleMethod::Partial => cfg.sample.ddpm_steps = n,
        }
    }
    if let Some(eta) = a.eta {
        cfg.sample.sampler.eta = eta;
    }
    if let Some(seed) = a.seed {
        cfg.sample.sampler.seed = seed;
    }
    cfg.sample.sampler.strict |= a.strict;
    cfg.validate()?;
    let split = parse_split(&a.split)?;
    let inputs = sample_inputs(&a.input, split)?;

    record_config(&cfg, &a.out)?;
    let sm = &cfg.sample;
    match method {
        SampleMethod::Dbim => eprintln!(
            "sampling {} inputs: dbim steps={} eta={} grid={} strict={}",
            inputs.len(),
            sm.sampler.n_steps,
            sm.sampler.eta,
            sm.sampler.grid.as_str(),
            sm.sampler.strict
        ),
        SampleMethod::Partial => eprintln!(
            "sampling {} inputs: partial t_star={} steps={}",
            inputs.len(),
            sm.t_star,
            sm.ddpm_steps
        ),
    }

    let schedule = &cfg.schedule;
    let outputs: Vec<Tensor> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (_, x))| match method {
            SampleMethod::Dbim => {
                let sampler = bridgekit::sampling::SamplerConfig {
                    seed: per_sample_seed(sm.sampler.seed, i as u64),
                    ..sm.sampler.clone()
                };
                dbim_sample(&ckpt, schedule, x, &sampler)
            }
            SampleMethod::Partial => {
                let mut rng = RngStream::new(sm.sampler.seed, 77).derive(i as u64);
                partial_diffusion_counterfactual(
                    &ckpt,
                    schedule,
                    x,
                    sm.t_star * schedule.horizon,
                    sm.ddpm_steps,
                    &mut rng,
                )
            }
        })
        .collect::<bridgekit::Result<_>>()?;

    for ((stem, _), cf) in inputs.iter().zip(&outputs) {
        write_bten(
            a.out.join(format!("{stem}.bten")),
            &[BtenEntry::f64("counterfactual", cf)],
        )?;
        if a.preview {
            write_pgm(&a.out.join(format!("{stem}.pgm")), cf)?;
        }
    }
    eprintln!("wrote {} counterfactuals to {}", outputs.len(), a.out.display());
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<u8> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let split = parse_split(&a.split)?;
    let manifest = Manifest::load(&a.data_dir)?;
    let rows = select_rows(&manifest, split);
    if rows.is_empty() {
        bail!(Error::Data(format!(
            "split `{}` of {} is empty",
            a.split,
            a.data_dir.display()
        )));
    }
    let missing: Vec<&str> = rows
        .iter()
        .filter(|r| !a.pred_dir.join(format!("{}.bten", r.id)).is_file())
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!(Error::Data(format!(
            "{} prediction(s) missing from {}: {}",
            missing.len(),
            a.pred_dir.display(),
            missing.join(", ")
        )));
    }

    let mut loader = SampleLoader::new(&a.data_dir);
    let samples = rows
        .iter()
        .map(|r| loader.load(r))
        .collect::<bridgekit::Result<Vec<_>>>()?;
    let preds = rows
        .iter()
        .map(|r| {
            let entries = read_bten(a.pred_dir.join(format!("{}.bten", r.id)))?;
            find(&entries, "counterfactual")?.to_tensor()
        })
        .collect::<bridgekit::Result<Vec<_>>>()?;
    let cases: Vec<Case> = rows
        .iter()
        .zip(&samples)
        .zip(&preds)
        .map(|((r, s), p)| Case {
            id: &r.id,
            pathological: &s.pathological,
            counterfactual: p,
            lesion_mask: &s.lesion_mask,
            healthy: &s.healthy,
        })
        .collect();
    let mut report = evaluate_cohort(&cfg.eval.method_name, &cases, &cfg.data.phantom, cfg.eval.smooth_radius)?;
    bridgekit::evaluation::assign_ranks(std::slice::from_mut(&mut report))?;

    let dir = match a.report.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    record_config(&cfg, &dir)?;
    let summary = a.report.with_extension("summary.txt");
    report.write(&a.report, &summary)?;
    println!("{}", bridgekit::evaluation::MetricsReport::summary_header());
    println!("{}", report.summary_line());
    for n in &report.notes {
        eprintln!("note: {n}");
    }
    Ok(0)
}

fn oracle_cmd(a: OracleArgs) -> anyhow::Result<u8> {
    let suite = Suite::parse(&a.check)?;
    let checks = suite.run()?;
    let mut ok = true;
    for c in &checks {
        println!("{c}");
        ok &= c.passed();
    }
    println!("{}: {}", suite.as_str(), if ok { "PASS" } else { "FAIL" });
    Ok(if ok { 0 } else { 1 })
}
