use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dptrain::clipping::{bench_clip, ClipMethod, ClipMode};
use dptrain::numkit::{Rng, Stream};
use dptrain::privacy::{calibrate_sigma, rdp_epsilon, PrivacyLedger};
use dptrain::reattention::{distraction_sweep, effective_errors};
use dptrain::seqdata::{
    build_dataset, ingest_interactions, zipf_synthetic, DatasetConfig, LogFormat, SequenceBatch,
    SequenceDataset, SyntheticConfig,
};
use dptrain::traineval::{
    evaluate, run_experiment_grid, train, BatchSpec, EvalOptions, GridSpec, ModelSpec, NoiseSpec,
    Sampling, TrainConfig,
};
use dptrain::transformer::{
    finite_difference_check, init_params, load_checkpoint, save_checkpoint, ModelConfig,
    ModelParams,
};

#[derive(Parser)]
#[command(name = "dptrain", version, about = "Differentially private Transformer training for next-item prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a JSON report.
    Train(TrainArgs),
    /// Score a checkpoint with NDCG@K and HIT@K.
    Eval(EvalArgs),
    /// Time per-sample norm computation and report auxiliary memory.
    BenchClip(BenchArgs),
    /// Privacy accounting: ε for a noise multiplier, or the reverse.
    Accountant(AccountantArgs),
    /// Monte-Carlo attention distraction and its correction.
    Distraction(DistractionArgs),
    /// Finite-difference gradient check on a tiny random model.
    CheckGrad(CheckGradArgs),
    /// Write a synthetic long-tailed interaction log as TSV.
    Synth(SynthArgs),
    /// Batch-size by learning-rate grid with seed replicates.
    Grid(GridArgs),
    /// Print dataset statistics.
    Summary(DataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    MovielensDat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Interaction log; omit to use the built-in synthetic corpus.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tsv")]
    format: Format,
    /// Fail on malformed lines instead of skipping them.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Seed of the synthetic corpus.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 2000)]
    synth_users: usize,
    #[arg(long, default_value_t = 200)]
    synth_items: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, conflicts_with = "sigma", required_unless_present = "sigma")]
    epsilon: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Defaults to 1/(10·users).
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, conflicts_with = "q")]
    batch: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value = "on")]
    reattention: Switch,
    #[arg(long, value_enum, default_value = "on")]
    sharing: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    #[arg(long, default_value = "normalize")]
    clip_mode: ClipMode,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0.2)]
    warmup: f64,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
    /// Fixed-size batches instead of Poisson sampling.
    #[arg(long)]
    uniform: bool,
    /// Keep corrected attention scores unnormalized.
    #[arg(long)]
    no_renorm: bool,
    /// Record wall-clock time in the report.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    exclude_seen: bool,
    #[arg(long)]
    sampled_negatives: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise multiplier the checkpoint was trained with; enables the attention correction.
    #[arg(long, requires = "batch")]
    sigma: Option<f64>,
    /// Nominal training batch size, used with --sigma.
    #[arg(long, requires = "sigma")]
    batch: Option<usize>,
    #[arg(long)]
    no_renorm: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Naive,
    Ghost,
    Phantom,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 32)]
    b: usize,
    #[arg(long, default_value_t = 50)]
    l: usize,
    #[arg(long, default_value_t = 3416)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, value_enum, default_value = "phantom")]
    method: Method,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only print the analytic memory report.
    #[arg(long)]
    memory_only: bool,
}

#[derive(Args)]
struct AccountantArgs {
    #[arg(long, conflicts_with = "epsilon", required_unless_present = "epsilon")]
    sigma: Option<f64>,
    /// Calibrate the noise multiplier for this target instead.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    q: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
}

#[derive(Args)]
struct DistractionArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])]
    sigma_sq: Vec<f64>,
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 250)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, value_enum, default_value = "on")]
    sharing: Switch,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 1.1)]
    exponent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 5.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
    batches: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 3e-3, 5e-3])]
    lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0])]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "on")]
    reattention: Switch,
    #[arg(long, value_enum, default_value = "on")]
    sharing: Switch,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_dataset(a: &DataArgs) -> Result<SequenceDataset> {
    let cfg = DatasetConfig {
        min_count: a.min_count,
        max_len: a.max_len,
    };
    let log = match &a.data {
        Some(path) => {
            let format = match a.format {
                Format::Tsv => LogFormat::Tsv,
                Format::MovielensDat => LogFormat::MovielensDat,
            };
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let (log, report) = ingest_interactions(BufReader::new(file), format, a.strict)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            log
        }
        None => {
            let synth = SyntheticConfig {
                users: a.synth_users,
                vocab_size: a.synth_items,
                ..SyntheticConfig::default()
            };
            zipf_synthetic(&synth, &mut Rng::new(a.data_seed, Stream::Data))?
        }
    };
    Ok(build_dataset(&log, cfg)?)
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let noise = match (a.epsilon, a.sigma) {
        (Some(e), None) => NoiseSpec::Epsilon(e),
        (None, Some(s)) => NoiseSpec::Sigma(s),
        _ => bail!("give exactly one of --epsilon and --sigma"),
    };
    let batch = match (a.batch, a.q) {
        (_, Some(q)) => BatchSpec::Rate(q),
        (Some(b), None) => BatchSpec::Size(b),
        (None, None) => BatchSpec::Size(256.min(dataset.n_users())),
    };
    let config = TrainConfig {
        noise,
        delta: a.delta,
        epochs: a.epochs,
        warmup_fraction: a.warmup,
        batch,
        sampling: if a.uniform { Sampling::Uniform } else { Sampling::Poisson },
        learning_rate: a.lr,
        clip_norm: a.clip_norm,
        clip_mode: a.clip_mode,
        model: ModelSpec {
            d_model: a.d_model,
            n_blocks: a.blocks,
            n_heads: a.heads,
            d_ff: a.d_model,
            ..ModelSpec::default()
        },
        dropout: a.dropout,
        reattention: a.reattention.into(),
        sharing: a.sharing.into(),
        seed: a.seed,
        eval_every: a.eval_every,
        renormalize: !a.no_renorm,
        record_runtime: a.timing,
        ..TrainConfig::default()
    };
    let outcome = train(&config, &dataset)?;
    if let Some(path) = &a.checkpoint {
        save_checkpoint(&outcome.params, path)?;
    }
    for m in &outcome.report.history {
        eprintln!(
            "epoch {:>4}  NDCG@{k} {:6.2}  HIT@{k} {:6.2}  eps {:.3}",
            m.epoch,
            m.ndcg,
            m.hit,
            m.epsilon,
            k = config.eval.k
        );
    }
    write_or_print(&outcome.report.to_json(), a.out.as_deref())?;
    if let dptrain::traineval::RunStatus::Aborted(why) = &outcome.report.status {
        bail!("training aborted: {why}");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let params: ModelParams<f64> = load_checkpoint(&a.checkpoint)?;
    if params.config.vocab_size != dataset.vocab_size {
        bail!(
            "checkpoint vocabulary {} does not match dataset vocabulary {}",
            params.config.vocab_size,
            dataset.vocab_size
        );
    }
    let opts = EvalOptions {
        k: a.k,
        exclude_seen: a.exclude_seen,
        sampled_negatives: a.sampled_negatives,
        seed: a.seed,
    };
    let errors = match (a.sigma, a.batch) {
        (Some(sigma), Some(b)) => Some(effective_errors(sigma, b as f64, &dataset.frequencies.sequence_rate)?),
        _ => None,
    };
    let m = evaluate(&params, &dataset, &opts, errors.as_ref().map(|e| (e, !a.no_renorm)))?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let method = match a.method {
        Method::Naive => ClipMethod::Naive,
        Method::Ghost => ClipMethod::Ghost,
        Method::Phantom => ClipMethod::Phantom,
    };
    if a.memory_only {
        let r = dptrain::clipping::aux_memory_report(a.b, a.l, a.m, a.d, method)?;
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        let r = bench_clip(a.b, a.l, a.m, a.d, method, a.repeats, a.seed)?;
        println!("{}", serde_json::to_string_pretty(&r)?);
    }
    Ok(())
}

fn cmd_accountant(a: AccountantArgs) -> Result<()> {
    let sigma = match (a.sigma, a.epsilon) {
        (Some(s), _) => s,
        (None, Some(e)) => calibrate_sigma(e, a.delta, a.q, a.steps)?,
        _ => bail!("give --sigma or --epsilon"),
    };
    let mut ledger = PrivacyLedger::new(sigma, a.q, a.delta);
    ledger.advance(a.steps);
    let (eps, order) = ledger.epsilon_with_order()?;
    debug_assert_eq!(eps, rdp_epsilon(sigma, a.q, a.steps, a.delta)?);
    let out = serde_json::json!({
        "sigma_dp": sigma,
        "q": a.q,
        "steps": a.steps,
        "delta": a.delta,
        "epsilon": eps,
        "order": order,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_distraction(a: DistractionArgs) -> Result<()> {
    let rows = distraction_sweep(&a.sigma_sq, a.samples, a.seed)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "sigma_sq\tpredicted\tobserved\tnoiseless\tmonte_carlo\treattended")?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
    for r in rows {
        writeln!(
            out,
            "{:.2}\t{:.4}\t{:.4}\t{}\t{}\t{}",
            r.sigma_sq,
            r.predicted_inflation,
            r.observed_inflation,
            fmt(&r.noiseless),
            fmt(&r.monte_carlo),
            fmt(&r.reattended)
        )?;
    }
    Ok(())
}

fn cmd_check_grad(a: CheckGradArgs) -> Result<()> {
    let mut cfg = ModelConfig::new(10, 4);
    cfg.d_model = 8;
    cfg.d_ff = 8;
    cfg.n_heads = 2;
    cfg.share_embedding = a.sharing.into();
    let params: ModelParams<f64> = init_params(&cfg, &mut Rng::new(a.seed, Stream::Init))?;
    let seqs: [&[usize]; 3] = [&[1, 3, 3, 7, 2], &[4, 10, 4], &[9, 1, 6, 6, 5]];
    let batch = SequenceBatch::from_sequences(&seqs, vec![0, 1, 2], 4);
    let report = finite_difference_check(
        &params,
        &batch,
        a.step,
        a.coords,
        &mut Rng::new(a.seed, Stream::Custom(3)),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed(1e-4) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        users: a.users,
        vocab_size: a.items,
        exponent: a.exponent,
        ..SyntheticConfig::default()
    };
    let log = zipf_synthetic(&cfg, &mut Rng::new(a.seed, Stream::Data))?;
    let mut text = String::new();
    for r in &log.records {
        text.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp));
    }
    std::fs::write(&a.out, text)?;
    eprintln!("{} interactions written to {}", log.records.len(), a.out.display());
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let base = TrainConfig {
        noise: NoiseSpec::Epsilon(a.epsilon),
        epochs: a.epochs,
        reattention: a.reattention.into(),
        sharing: a.sharing.into(),
        model: ModelSpec {
            d_model: a.d_model,
            d_ff: a.d_model,
            ..ModelSpec::default()
        },
        ..TrainConfig::default()
    };
    let spec = GridSpec {
        base,
        batches: a.batches.iter().map(|&b| BatchSpec::Size(b)).collect(),
        learning_rates: a.lrs.clone(),
        seeds: a.seeds.clone(),
    };
    let report = run_experiment_grid(&spec, &dataset);
    print!("{}", report.to_text());
    if let Some(p) = &a.csv {
        std::fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn cmd_summary(a: DataArgs) -> Result<()> {
    let dataset = load_dataset(&a)?;
    println!("{}", serde_json::to_string_pretty(&dataset.summary())?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BenchClip(a) => cmd_bench(a),
        Command::Accountant(a) => cmd_accountant(a),
        Command::Distraction(a) => cmd_distraction(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Summary(a) => cmd_summary(a),
    }
}
