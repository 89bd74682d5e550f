use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use agentprint::cluster::{self, AssignmentRow, KMeansConfig};
use agentprint::features::FeatureSet;
use agentprint::indicators::{self, IndicatorSet, SampleInfo};
use agentprint::nn::{grad_check, EncoderConfig};
use agentprint::order::{read_orders_file, windows_for_log, write_orders_file, AgentId, MarketOrder, Sample};
use agentprint::pipeline::{self, TripletSets};
use agentprint::synth::{self, MarketConfig};
use agentprint::train::{self, Checkpoint, TrainConfig};
use agentprint::triplets::{self, DEFAULT_HORIZON};
use agentprint::{eval, rng::derive_seed};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Gradient check tolerance on the maximum relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "agentprint", version, about = "Triplet-loss embeddings of market-order windows")]
#[command(args_override_self = true)]
struct Cli {
    /// Seed for every random choice of the stage.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file of default flag values: top-level keys for every stage, `[stage]` tables per subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic order log.
    Generate(GenerateArgs),
    /// Cut an order log into 50-order windows and write their manifest.
    Windows(WindowsArgs),
    /// Split days 4:1 and sample train and test triplets.
    Triplets(TripletArgs),
    /// Train an encoder on training triplets.
    Train(TrainArgs),
    /// Failure rate of a trained encoder on test triplets.
    Eval(EvalArgs),
    /// Train and evaluate one encoder per feature set on the same triplets.
    Ablate(AblateArgs),
    /// Embed windows, pick k by the elbow rule and cluster them.
    Cluster(ClusterArgs),
    /// Behavioral indicators per window and their per-cluster summary.
    Indicators(IndicatorArgs),
    /// Per-agent cluster profiles and passive/aggressive ratios.
    Report(ReportArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 30)]
    agents: u32,
    #[arg(long, default_value_t = 25)]
    days: u32,
    /// Full market description in TOML; replaces --agents, --days and --ablation.
    #[arg(long)]
    market: Option<PathBuf>,
    /// Use the four archetypes that differ only in modifications and queues.
    #[arg(long)]
    ablation: bool,
    /// Regime switch as AGENT:DAY:ARCHETYPE (repeatable).
    #[arg(long = "switch")]
    switches: Vec<String>,
    /// Also write passive fills to this CSV.
    #[arg(long)]
    passive: Option<PathBuf>,
    /// Also write the resolved market description as TOML.
    #[arg(long)]
    write_market: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct WindowsArgs {
    #[arg(long)]
    orders: PathBuf,
    #[arg(long, default_value_t = pipeline::TRIPLET_STRIDE)]
    stride: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Corpus {
    #[arg(long)]
    orders: PathBuf,
    /// Window manifest written by `windows`.
    #[arg(long)]
    windows: PathBuf,
}

impl Corpus {
    fn load(&self) -> Result<(Vec<MarketOrder>, Vec<Sample>)> {
        let orders = read_orders_file(&self.orders)?;
        let rows = triplets::read_manifest_file(&self.windows)?;
        let windows = triplets::resolve_manifest(&orders, &rows)?;
        Ok((orders, windows))
    }
}

#[derive(Args, Debug)]
struct TripletArgs {
    #[command(flatten)]
    corpus: Corpus,
    /// Training triplets [default: 20000, or 100000 with --paper-scale].
    #[arg(long = "train")]
    n_train: Option<usize>,
    #[arg(long = "test", default_value_t = pipeline::TEST_TRIPLETS)]
    n_test: usize,
    #[arg(long)]
    paper_scale: bool,
    /// Locality horizon in seconds.
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    horizon: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainOpts {
    /// Epochs [default: 50, or 500 with --paper-scale].
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long)]
    paper_scale: bool,
    /// Checkpoint every N epochs (0: final only).
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        let base = if self.paper_scale { TrainConfig::paper_scale(seed) } else { TrainConfig::desk(seed) };
        let mut cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size,
            checkpoint_every: self.checkpoint_every,
            ..base
        };
        cfg.adam.lr = self.lr;
        cfg
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: Corpus,
    #[arg(long)]
    triplets: PathBuf,
    /// basic, basic-m or basic-mqs.
    #[arg(long, default_value = "basic-mqs")]
    feature_set: FeatureSet,
    #[command(flatten)]
    opts: TrainOpts,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    corpus: Corpus,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    corpus: Corpus,
    #[arg(long)]
    train_triplets: PathBuf,
    #[arg(long)]
    test_triplets: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Order log to embed.
    #[arg(long)]
    orders: PathBuf,
    /// Manifest of the windows to cluster [default: non-overlapping windows of the log].
    #[arg(long)]
    windows: Option<PathBuf>,
    /// Fixed k; otherwise chosen by the elbow rule over --k-min..=--k-max.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    #[arg(long, default_value_t = 12)]
    k_max: usize,
    /// Dimensions kept by PCA for plotting.
    #[arg(long, default_value_t = 2)]
    pca_dim: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct IndicatorArgs {
    #[arg(long)]
    orders: PathBuf,
    /// Assignments written by `cluster`.
    #[arg(long)]
    assignments: PathBuf,
    /// Manifest the assignments refer to [default: non-overlapping windows of the log].
    #[arg(long)]
    windows: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    orders: PathBuf,
    #[arg(long)]
    assignments: PathBuf,
    #[arg(long)]
    windows: Option<PathBuf>,
    /// Agents to profile (repeatable) [default: all].
    #[arg(long = "agent")]
    agents: Vec<u32>,
    /// Passive fills written by `generate --passive`.
    #[arg(long)]
    passive: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 3)]
    input_width: usize,
    #[arg(long, default_value_t = 4)]
    hidden1: usize,
    #[arg(long, default_value_t = 3)]
    hidden2: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn generate(a: &GenerateArgs, seed: u64) -> Result<()> {
    let mut config = match &a.market {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            MarketConfig { seed, ..MarketConfig::from_toml(&text)? }
        }
        None if a.ablation => pipeline::ablation_market(a.agents, a.days, seed),
        None => MarketConfig::preset(a.agents, a.days, seed),
    };
    for s in &a.switches {
        let parts: Vec<&str> = s.split(':').collect();
        let [agent, day, arch] = parts[..] else { bail!("switch {s:?} is not AGENT:DAY:ARCHETYPE") };
        config = config.with_switch(AgentId(agent.parse()?), day.parse()?, arch)?;
    }
    let orders = synth::generate(&config)?;
    write_orders_file(&a.out, &orders)?;
    if let Some(p) = &a.passive {
        synth::write_passive(create(p)?, &synth::generate_passive(&config, &orders)?)?;
    }
    if let Some(p) = &a.write_market {
        create(p)?.write_all(config.to_toml()?.as_bytes())?;
    }
    eprintln!("{} orders from {} agents over {} days", orders.len(), config.agents.len(), config.n_days);
    Ok(())
}

fn windows(a: &WindowsArgs) -> Result<()> {
    let orders = read_orders_file(&a.orders)?;
    let w = windows_for_log(&orders, a.stride)?;
    triplets::write_manifest(create(&a.out)?, &w)?;
    eprintln!("{} windows", w.len());
    Ok(())
}

fn make_triplets(a: &TripletArgs, seed: u64) -> Result<()> {
    let (orders, windows) = a.corpus.load()?;
    let split = pipeline::split_log(&orders, seed)?;
    let default_train = if a.paper_scale { train::PAPER_TRIPLETS } else { train::DESK_TRIPLETS };
    let sets = pipeline::sample_sets(&windows, &split, a.n_train.unwrap_or(default_train), a.n_test, a.horizon, seed)?;
    out_dir(&a.out_dir)?;
    triplets::write_triplets_file(&a.out_dir.join("train_triplets.csv"), &sets.train)?;
    triplets::write_triplets_file(&a.out_dir.join("test_triplets.csv"), &sets.test)?;
    serde_json::to_writer_pretty(create(&a.out_dir.join("split.json"))?, &split)?;
    eprintln!("{} train / {} test triplets", sets.train.len(), sets.test.len());
    Ok(())
}

fn save_checkpoints(dir: &Path) -> impl FnMut(&Checkpoint) -> agentprint::Result<()> + '_ {
    move |ck| {
        eprintln!("epoch {} mean loss {:.6}", ck.epoch, ck.history.last().copied().unwrap_or(f64::NAN));
        ck.save(&dir.join(format!("checkpoint_epoch_{:04}.json", ck.epoch)))
    }
}

fn finish_training(dir: &Path, ck: &Checkpoint) -> Result<()> {
    ck.save(&dir.join("checkpoint.json"))?;
    train::write_history(create(&dir.join("history.csv"))?, &ck.history)?;
    Ok(())
}

fn run_train(a: &TrainArgs, seed: u64) -> Result<()> {
    let (_, windows) = a.corpus.load()?;
    let trip = triplets::read_triplets_file(&a.triplets)?;
    out_dir(&a.out_dir)?;
    let ck = match &a.resume {
        Some(p) => pipeline::resume(Checkpoint::load(p)?, &windows, &trip, save_checkpoints(&a.out_dir))?,
        None => pipeline::train_encoder(&windows, &trip, a.feature_set, a.opts.config(seed), save_checkpoints(&a.out_dir))?,
    };
    finish_training(&a.out_dir, &ck)
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let (_, windows) = a.corpus.load()?;
    let ck = Checkpoint::load(&a.model)?;
    let trip = triplets::read_triplets_file(&a.triplets)?;
    let e = pipeline::evaluate(&ck.params, &ck.norm, &windows, &trip)?;
    eval::write_report(create(&a.out)?, &eval::report_rows(ck.feature_set, e.global, &e.per_agent))?;
    eprintln!("failure rate {:.4} ({} ties)", e.global.rate(), e.global.ties);
    Ok(())
}

fn run_ablate(a: &AblateArgs, seed: u64) -> Result<()> {
    let (_, windows) = a.corpus.load()?;
    let sets = TripletSets {
        train: triplets::read_triplets_file(&a.train_triplets)?,
        test: triplets::read_triplets_file(&a.test_triplets)?,
    };
    let entries = pipeline::ablate(&windows, &sets, a.opts.config(seed))?;
    out_dir(&a.out_dir)?;
    pipeline::write_ablation(create(&a.out_dir.join("ablation.csv"))?, &entries)?;
    let mut rows = Vec::new();
    for e in &entries {
        rows.extend(eval::report_rows(e.feature_set, e.evaluation.global, &e.evaluation.per_agent));
        let name = e.feature_set.label().replace('+', "_");
        e.checkpoint.save(&a.out_dir.join(format!("checkpoint_{name}.json")))?;
        eprintln!("{}: failure rate {:.4}", e.feature_set.label(), e.evaluation.global.rate());
    }
    eval::write_report(create(&a.out_dir.join("report.csv"))?, &rows)?;
    Ok(())
}

/// Windows named by a manifest, or the non-overlapping windows of the log.
fn analysis_windows(orders: &[MarketOrder], manifest: Option<&Path>) -> Result<Vec<Sample>> {
    Ok(match manifest {
        Some(p) => triplets::resolve_manifest(orders, &triplets::read_manifest_file(p)?)?,
        None => windows_for_log(orders, pipeline::CLUSTER_STRIDE)?,
    })
}

fn write_matrix(path: &Path, prefix: &str, ids: &[usize], rows: &[&[f64]]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    let dim = rows.first().map_or(0, |r| r.len());
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..dim).map(|j| format!("{prefix}{j}")));
    wtr.write_record(&header)?;
    for (id, r) in ids.iter().zip(rows) {
        let mut rec = vec![id.to_string()];
        rec.extend(r.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn run_cluster(a: &ClusterArgs, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let orders = read_orders_file(&a.orders)?;
    let windows = analysis_windows(&orders, a.windows.as_deref())?;
    let emb = pipeline::embed(&ck, &windows)?;
    let points: Vec<&[f64]> = emb.iter().map(|e| e.as_slice()).collect();
    let cfg = KMeansConfig::default();
    out_dir(&a.out_dir)?;
    let fit = match a.k {
        Some(k) => cluster::kmeans(&points, k, seed, &cfg)?,
        None => {
            let ks: Vec<usize> = (a.k_min..=a.k_max).collect();
            let (elbow, fits) = cluster::elbow_select(&points, &ks, seed, &cfg)?;
            let mut wtr = csv::Writer::from_writer(create(&a.out_dir.join("elbow.csv"))?);
            wtr.write_record(["k", "wcss"])?;
            for (k, w) in elbow.ks.iter().zip(&elbow.wcss) {
                wtr.write_record([k.to_string(), w.to_string()])?;
            }
            wtr.flush()?;
            serde_json::to_writer_pretty(create(&a.out_dir.join("elbow.json"))?, &elbow)?;
            if elbow.low_confidence {
                eprintln!("warning: weak elbow (knee distance {:.3})", elbow.knee_distance);
            }
            let pos = ks.iter().position(|&k| k == elbow.knee).expect("knee is one of ks");
            fits.into_iter().nth(pos).expect("one fit per k")
        }
    };
    cluster::write_model(create(&a.out_dir.join("cluster_model.json"))?, &fit.model)?;
    let ids: Vec<usize> = (0..windows.len()).collect();
    let rows: Vec<AssignmentRow> = windows
        .iter()
        .zip(&fit.labels)
        .enumerate()
        .map(|(i, (w, &c))| AssignmentRow { sample_id: i, agent: w.agent(), cluster: c })
        .collect();
    cluster::write_assignments(create(&a.out_dir.join("assignments.csv"))?, &rows)?;
    write_matrix(&a.out_dir.join("embeddings.csv"), "e", &ids, &points)?;
    let dim = a.pca_dim.min(points.first().map_or(0, |p| p.len()));
    let (model, projected) = cluster::pca(&points, dim)?;
    let prow: Vec<&[f64]> = projected.iter().map(Vec::as_slice).collect();
    write_matrix(&a.out_dir.join("pca.csv"), "pc", &ids, &prow)?;
    let mut wtr = csv::Writer::from_writer(create(&a.out_dir.join("pca_variance.csv"))?);
    wtr.write_record(["component", "explained_ratio"])?;
    for (j, r) in model.explained_ratio.iter().enumerate() {
        wtr.write_record([j.to_string(), r.to_string()])?;
    }
    wtr.flush()?;
    eprintln!("k = {} on {} windows, wcss {:.4}", fit.model.k, windows.len(), fit.model.wcss);
    Ok(())
}

struct Labeled {
    orders: Vec<MarketOrder>,
    info: Vec<SampleInfo>,
    labels: Vec<usize>,
    sets: Vec<IndicatorSet>,
}

fn labeled(orders: &Path, manifest: Option<&Path>, assignments: &Path) -> Result<Labeled> {
    let orders = read_orders_file(orders)?;
    let windows = analysis_windows(&orders, manifest)?;
    let rows = cluster::read_assignments(File::open(assignments).with_context(|| format!("opening {}", assignments.display()))?)?;
    let mut info = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut sets = Vec::with_capacity(rows.len());
    for r in &rows {
        let w = windows.get(r.sample_id).with_context(|| format!("sample {} not among the windows", r.sample_id))?;
        if w.agent() != r.agent {
            bail!("sample {} belongs to agent {}, assignments say {}", r.sample_id, w.agent(), r.agent);
        }
        info.push(SampleInfo::of(r.sample_id, w));
        labels.push(r.cluster);
        sets.push(indicators::indicators(w)?);
    }
    Ok(Labeled { orders, info, labels, sets })
}

fn run_indicators(a: &IndicatorArgs) -> Result<()> {
    let l = labeled(&a.orders, a.windows.as_deref(), &a.assignments)?;
    out_dir(&a.out_dir)?;
    indicators::write_indicators(create(&a.out_dir.join("indicators.csv"))?, &l.info, &l.labels, &l.sets)?;
    let summary = indicators::cluster_summary(&l.sets, &l.labels)?;
    indicators::write_cluster_summary(create(&a.out_dir.join("cluster_summary.csv"))?, &summary)?;
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let l = labeled(&a.orders, a.windows.as_deref(), &a.assignments)?;
    let agents: Vec<AgentId> = if a.agents.is_empty() {
        l.info.iter().map(|i| i.agent).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        a.agents.iter().map(|&id| AgentId(id)).collect()
    };
    out_dir(&a.out_dir)?;
    for &agent in &agents {
        let p = indicators::agent_profile(agent, &l.sets, &l.labels, &l.info)?;
        let path = |kind: &str| a.out_dir.join(format!("agent_{agent}_{kind}.csv"));
        indicators::write_profile_quantiles(create(&path("quantiles"))?, &p)?;
        indicators::write_profile_hours(create(&path("hours"))?, &p)?;
        indicators::write_profile_timeline(create(&path("timeline"))?, &p)?;
    }
    if let Some(pp) = &a.passive {
        let passive = synth::read_passive(File::open(pp).with_context(|| format!("opening {}", pp.display()))?)?;
        let mut wtr = csv::Writer::from_writer(create(&a.out_dir.join("passive_ratio.csv"))?);
        wtr.write_record(["agent", "passive_aggressive_ratio"])?;
        for &agent in &agents {
            let r = indicators::passive_aggressive_ratio(&l.orders, &passive, agent)?;
            wtr.write_record([agent.to_string(), r.to_string()])?;
        }
        wtr.flush()?;
    }
    eprintln!("profiled {} agents", agents.len());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<bool> {
    let config = EncoderConfig { input_width: a.input_width, hidden1: a.hidden1, hidden2: a.hidden2, ..EncoderConfig::new(a.input_width) };
    let mut worst: f64 = 0.0;
    for s in seed..seed + a.seeds {
        let r = grad_check(config, s)?;
        println!("seed {s}: max relative error {:.3e} (loss {:.4}, hinge active: {})", r.max_rel_error, r.loss, r.hinge_active);
        worst = worst.max(r.max_rel_error);
    }
    let ok = worst < GRADCHECK_TOL;
    println!("{}: worst {worst:.3e} vs tolerance {GRADCHECK_TOL:.0e}", if ok { "ok" } else { "FAILED" });
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    let seed = cli.seed;
    match &cli.command {
        Command::Generate(a) => generate(a, seed)?,
        Command::Windows(a) => windows(a)?,
        Command::Triplets(a) => make_triplets(a, seed)?,
        Command::Train(a) => run_train(a, seed)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Ablate(a) => run_ablate(a, seed)?,
        Command::Cluster(a) => run_cluster(a, derive_seed(seed, &[0xc1])) ?,
        Command::Indicators(a) => run_indicators(a)?,
        Command::Report(a) => run_report(a)?,
        Command::Gradcheck(a) => return gradcheck(a, seed),
    }
    Ok(true)
}

/// Turns config entries into flags placed right after the subcommand, so flags given on
/// the command line (which come later) override them.
fn config_flags(path: &Path, subcommand: &str) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
    let mut out = Vec::new();
    let mut push = |key: &str, v: &toml::Value| -> Result<()> {
        let flag = format!("--{}", key.replace('_', "-"));
        let values: Vec<&toml::Value> = match v {
            toml::Value::Array(a) => a.iter().collect(),
            v => vec![v],
        };
        for v in values {
            match v {
                toml::Value::Boolean(true) => out.push(flag.clone().into()),
                toml::Value::Boolean(false) => {}
                toml::Value::String(s) => out.extend([flag.clone().into(), s.into()]),
                toml::Value::Integer(i) => out.extend([flag.clone().into(), i.to_string().into()]),
                toml::Value::Float(f) => out.extend([flag.clone().into(), f.to_string().into()]),
                other => bail!("{}: unsupported value for {key}: {other}", path.display()),
            }
        }
        Ok(())
    };
    for (k, v) in &table {
        if k != "config" && !v.is_table() {
            push(k, v)?;
        }
    }
    if let Some(toml::Value::Table(section)) = table.get(subcommand) {
        for (k, v) in section {
            push(k, v)?;
        }
    }
    Ok(out)
}

fn parse() -> Result<Cli> {
    let args: Vec<OsString> = std::env::args_os().collect();
    let cli = Cli::parse_from(&args);
    let Some(path) = &cli.config else { return Ok(cli) };
    let matches = Cli::command().get_matches_from(&args);
    let name = matches.subcommand_name().expect("subcommand is required").to_string();
    let at = args.iter().position(|a| a.to_str() == Some(name.as_str())).expect("subcommand appears in argv");
    let mut merged = args[..=at].to_vec();
    merged.extend(config_flags(path, &name)?);
    merged.extend_from_slice(&args[at + 1..]);
    let matches = Cli::command().try_get_matches_from(&merged).unwrap_or_else(|e| e.exit());
    Ok(Cli::from_arg_matches(&matches)?)
}

fn main() -> ExitCode {
    let outcome = parse().and_then(|cli| {
        if let Some(n) = cli.threads {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting thread pool")?;
        }
        run(&cli)
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
