//! `vadapter`: data generation, training, sampling, composed sampling,
//! benchmarking, score serving and oracle self-checks.
//!
//! Settings come from `--config` (sectioned `key = value`), then flags
//! override them: flags > config > defaults. Every command that writes
//! files also writes `manifest.txt` to the output directory.

mod config;
mod manifest;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use vadapter::adapter::{cfg_sample, video_adapter_sample, ScoreSource};
use vadapter::denoiser::{init_denoiser, train_denoiser, ConditionSpec, DenoiserCheckpoint};
use vadapter::diffusion::NoiseSchedule;
use vadapter::eval::run_benchmark;
use vadapter::oracle::closure_checks;
use vadapter::rng::derive_seed;
use vadapter::scorewire::{serve, ModelMap, RemoteScoreSource};
use vadapter::tensor::unstack_clamped;
use vadapter::worlds::{split_corpora, DatasetFile, Record};

use config::RunConfig;
use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "vadapter",
    version,
    about = "Score-composition adaptation of small video diffusion models"
)]
struct Cli {
    /// Run config; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `[run] out_dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Root seed (overrides `[run] seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the broad corpus and the split adaptation corpus.
    GenData,
    /// Train the pretrained prior or the adapter on a dataset file.
    Train(TrainArgs),
    /// Guided sampling from one checkpoint.
    Sample(SampleArgs),
    /// Composed sampling from an adapter and a pretrained prior.
    AdaptSample(AdaptArgs),
    /// Run the benchmark plan and write the report.
    Eval,
    /// Serve checkpoints' ε-predictions over TCP until killed.
    Serve(ServeArgs),
    /// Run the three cross-oracle closure loops.
    OracleCheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Pretrained,
    Adapter,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Pretrained => "pretrained",
            Role::Adapter => "adapter",
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    role: Role,
    /// Dataset file to train on.
    #[arg(long)]
    data: PathBuf,
    /// Training steps (overrides the role's `steps`).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct Guidance {
    /// Style label to condition on (default: the adaptation style).
    #[arg(long)]
    label: Option<u32>,
    /// Number of clips (overrides `[benchmark] samples`).
    #[arg(long)]
    count: Option<usize>,
    /// Guidance weight (overrides `[composition] alpha`).
    #[arg(long)]
    alpha: Option<f64>,
    /// Langevin corrector steps per level (overrides `[composition] mcmc_steps`).
    #[arg(long)]
    mcmc_steps: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    guidance: Guidance,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    adapter: PathBuf,
    /// Local pretrained checkpoint.
    #[arg(long, conflicts_with = "remote")]
    pretrained: Option<PathBuf>,
    /// Served pretrained model as `host:port/model-id`.
    #[arg(long)]
    remote: Option<String>,
    /// Prior strength (overrides `[composition] gamma`).
    #[arg(long)]
    gamma: Option<f64>,
    /// Final fraction of steps without the prior (overrides `[composition] cutoff_fraction`).
    #[arg(long)]
    cutoff: Option<f64>,
    #[command(flatten)]
    guidance: Guidance,
}

#[derive(Args)]
struct ServeArgs {
    /// `id=path`, repeatable.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// Bind address (overrides `[service] addr`).
    #[arg(long)]
    addr: Option<String>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse_with_seed(&text, cli.seed).with_context(|| match &cli.config {
        Some(p) => format!("parsing config {}", p.display()),
        None => "building the default config".into(),
    })?;
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<DenoiserCheckpoint> {
    DenoiserCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_samples(batch: Array2<f32>, model: &DenoiserCheckpoint, label: u32, path: &Path) -> Result<()> {
    let shape = model.shape();
    let records = unstack_clamped(batch.view(), shape)?
        .into_iter()
        .map(|video| Record {
            video,
            label,
            first_frame: None,
            edges: None,
        })
        .collect();
    DatasetFile::new(shape, model.descriptor.vocab as u32, records, None)?.save(path)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let corpora = split_corpora(&cfg.plan.broad, &cfg.plan.adapt).context("worlds: generating corpora")?;
    let mut m = Manifest::new("gen-data");
    for (name, d) in [
        ("pretrain.vads", &corpora.pretrain),
        ("adapt_train.vads", &corpora.adapt_train),
        ("adapt_test.vads", &corpora.adapt_test),
    ] {
        let p = cfg.out_dir.join(name);
        d.save(&p)?;
        println!("{}: {} clips", p.display(), d.len());
        m.artifact(&p);
    }
    m.write(cfg)?;
    Ok(())
}

fn train(cfg: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    let data = DatasetFile::load(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let role = args.role.name();
    let plan = match args.role {
        Role::Pretrained => &mut cfg.plan.pretrained,
        Role::Adapter => &mut cfg.plan.adapter,
    };
    if let Some(s) = args.steps {
        plan.steps = s;
    }
    let plan = plan.clone();
    let sched = cfg.plan.schedule()?;
    let desc = plan.descriptor(data.shape(), data.vocab() as usize);
    let init = init_denoiser(&desc, &sched, derive_seed(cfg.seed, &format!("{role}/init")))?;
    let set = data.to_training_set(desc.cond_mode)?;
    let out = train_denoiser(
        &init,
        &set,
        &plan.train_config(derive_seed(cfg.seed, &format!("{role}/train"))),
        &sched,
    )
    .context("denoiser: training")?;
    let mut ckpt = out.checkpoint;
    ckpt.meta.dataset = data.file_hash()?;
    let path = cfg.out_dir.join(format!("{role}.vadp"));
    ckpt.save(&path)?;
    let tail = out.loss_curve.iter().rev().take(50).collect::<Vec<_>>();
    let recent = tail.iter().copied().sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "{}: {} parameters, recent loss {recent:.4}",
        path.display(),
        ckpt.param_count()
    );
    let mut m = Manifest::new("train");
    m.input("data", &args.data);
    m.artifact(&path);
    m.write(cfg)?;
    Ok(())
}

fn apply_guidance(cfg: &mut RunConfig, g: &Guidance) -> u32 {
    if let Some(a) = g.alpha {
        cfg.plan.composition.alpha = a;
    }
    if let Some(k) = g.mcmc_steps {
        cfg.plan.composition.mcmc_steps = k;
    }
    if let Some(n) = g.count {
        cfg.plan.samples = n;
    }
    g.label.unwrap_or_else(|| cfg.plan.target_style())
}

fn sample(cfg: &mut RunConfig, args: &SampleArgs) -> Result<()> {
    let label = apply_guidance(cfg, &args.guidance);
    let model = load_checkpoint(&args.model)?;
    let sched = model.schedule.build()?;
    let c = &cfg.plan.composition;
    let seed = derive_seed(cfg.seed, "sample");
    let batch = cfg_sample(
        &model,
        c.alpha,
        &sched,
        &ConditionSpec::label(label),
        cfg.plan.samples,
        seed,
        c.corrector(),
    )
    .context("adapter: sampling")?;
    let path = cfg.out_dir.join("samples.vads");
    save_samples(batch, &model, label, &path)?;
    println!("{}", path.display());
    let mut m = Manifest::new("sample");
    m.input("model", &args.model);
    m.artifact(&path);
    m.write(cfg)?;
    Ok(())
}

/// `host:port/model-id` → (address, id).
fn parse_remote(spec: &str) -> Result<(std::net::SocketAddr, String)> {
    let (addr, id) = spec
        .split_once('/')
        .context("remote must look like host:port/model-id")?;
    Ok((
        addr.parse().with_context(|| format!("remote address '{addr}'"))?,
        id.to_string(),
    ))
}

fn same_schedule(a: &NoiseSchedule, b: &NoiseSchedule) -> bool {
    a.num_steps() == b.num_steps() && a.logsnr_range() == b.logsnr_range()
}

fn adapt_sample(cfg: &mut RunConfig, args: &AdaptArgs) -> Result<()> {
    let label = apply_guidance(cfg, &args.guidance);
    if let Some(g) = args.gamma {
        cfg.plan.composition.gamma = g;
    }
    if let Some(c) = args.cutoff {
        cfg.plan.composition.cutoff_fraction = c;
    }
    let adapter = load_checkpoint(&args.adapter)?;
    let sched = adapter.schedule.build()?;
    let mut m = Manifest::new("adapt-sample");
    m.input("adapter", &args.adapter);
    let prior: Box<dyn ScoreSource> = match (&args.pretrained, &args.remote) {
        (Some(p), None) => {
            let pre = load_checkpoint(p)?;
            if !same_schedule(&pre.schedule.build()?, &sched) {
                bail!("adapter and pretrained checkpoints use different noise schedules");
            }
            m.input("pretrained", p);
            Box::new(pre)
        }
        (None, Some(r)) => {
            let (addr, id) = parse_remote(r)?;
            Box::new(
                RemoteScoreSource::new(addr, id, adapter.descriptor.data_dim()).with_timeout(cfg.service.timeout()),
            )
        }
        _ => bail!("give exactly one of --pretrained or --remote"),
    };
    let seed = derive_seed(cfg.seed, "sample");
    let batch = video_adapter_sample(
        &adapter,
        prior.as_ref(),
        &cfg.plan.composition,
        &sched,
        &ConditionSpec::label(label),
        cfg.plan.samples,
        seed,
    )
    .context("adapter: composed sampling")?;
    let path = cfg.out_dir.join("samples.vads");
    save_samples(batch, &adapter, label, &path)?;
    println!("{}", path.display());
    m.artifact(&path);
    m.write(cfg)?;
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let corpora = split_corpora(&cfg.plan.broad, &cfg.plan.adapt).context("worlds: generating corpora")?;
    let report = run_benchmark(&cfg.plan, &corpora, |line| eprintln!("{line}")).context("eval: benchmark")?;
    let table = cfg.out_dir.join("report.tsv");
    fs::write(&table, report.table())?;
    let full = cfg.out_dir.join("report.txt");
    fs::write(&full, report.render())?;
    print!("{}", report.table());
    let mut m = Manifest::new("eval");
    m.artifact(&table);
    m.write(cfg)?;
    Ok(())
}

fn run_server(cfg: &RunConfig, args: &ServeArgs) -> Result<()> {
    let mut models: ModelMap = HashMap::new();
    for spec in &args.models {
        let (id, path) = spec.split_once('=').context("--model must look like id=path")?;
        let ckpt = load_checkpoint(Path::new(path))?;
        if models.insert(id.to_string(), Arc::new(ckpt)).is_some() {
            bail!("model id '{id}' given twice");
        }
    }
    let addr = args.addr.clone().unwrap_or_else(|| cfg.service.addr.clone());
    let handle = serve(models, addr.as_str(), cfg.service.server_config()).context("scorewire: starting server")?;
    println!("listening on {}", handle.addr());
    handle.wait();
    Ok(())
}

fn oracle_check(cfg: &RunConfig) -> Result<()> {
    let checks = closure_checks(cfg.seed).context("oracle: closure checks")?;
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        println!("{tag}  {}: {:.3e} (tolerance {:.1e})", c.name, c.metric, c.tolerance);
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} closure loops failed", checks.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    cfg.validate()?;
    match &cli.command {
        Command::Serve(args) => return run_server(&cfg, args),
        Command::OracleCheck => return oracle_check(&cfg),
        _ => {}
    }
    prepare_out_dir(&cfg)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train(args) => train(&mut cfg, args),
        Command::Sample(args) => sample(&mut cfg, args),
        Command::AdaptSample(args) => adapt_sample(&mut cfg, args),
        Command::Eval => eval(&cfg),
        Command::Serve(_) | Command::OracleCheck => unreachable!(),
    }
}
