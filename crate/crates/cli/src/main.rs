use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vlmkit::bench::{self, BenchConfig};
use vlmkit::costmodel::{self, CostReport};
use vlmkit::io::{self, dataset::resolve_image, DatasetKind, Records};
use vlmkit::training::sweep::{ratio_sweep, SweepConfig};
use vlmkit::training::{
    self, build_pairs, CaptionExample, DpoSample, Stage, StageData, TrainConfig,
};
use vlmkit::vision::synthetic;
use vlmkit::{CompressionKind, CompressionStrategy, Component, GenerationParams, Image, Model, ModelConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Vision-language runtime with image-token compression.
#[derive(Parser)]
#[command(name = "vlmkit", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized checkpoint.
    Init(InitArgs),
    /// Caption an image.
    Generate(GenerateArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Build minimal-edit preference pairs from (original, edited) records.
    DpoPairs(DpoPairsArgs),
    /// Pretrain one projector per compression ratio and report validation curves.
    Sweep(SweepArgs),
    /// Measure time-to-first-token and decode speed per compression ratio.
    Bench(BenchArgs),
    /// Hosted-API token, energy and FLOP estimates for an image.
    Cost(CostArgs),
    /// Print a checkpoint's config, tensors and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Tiny,
}

#[derive(Args)]
struct InitArgs {
    /// ModelConfig JSON; defaults to --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Override the compression kind.
    #[arg(long)]
    strategy: Option<CompressionKind>,
    /// Override the compression ratio.
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Binary PPM (P6) image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = synthetic::CAPTION_PROMPT)]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Argmax decoding (the default).
    #[arg(long, conflicts_with = "sample")]
    greedy: bool,
    /// Sample from the softmax at --temperature, seeded by --seed.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stage: Stage,
    /// JSONL dataset (caption/sft records for pretrain and sft, dpo records for dpo).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Held-out JSONL dataset of the same kind.
    #[arg(long, requires = "data")]
    val_data: Option<PathBuf>,
    /// Train on N synthetic colored-box samples instead of a file.
    #[arg(long)]
    synthetic: Option<usize>,
    /// TrainConfig JSON; flags below override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Metrics CSV (step,loss,val_loss,val_ppl).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct DpoPairsArgs {
    /// JSONL records {image, prompt, original, edited}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    tau: f32,
    /// Pair JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Base checkpoint supplying vision and LM weights; a fresh tiny model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,9,81")]
    ratios: Vec<usize>,
    #[arg(long, default_value = "reshape")]
    strategy: CompressionKind,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 20)]
    eval_every: usize,
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    #[arg(long, default_value_t = 16)]
    n_val: usize,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Curve CSV; stdout when omitted.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,9,81")]
    ratios: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 128)]
    decode_tokens: usize,
    /// PPM image; a synthetic one when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Report JSON; a CSV with the same stem is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    width: i64,
    #[arg(long)]
    height: i64,
    /// Joules per token.
    #[arg(long, default_value_t = costmodel::DEFAULT_JOULES_PER_TOKEN)]
    jpt: f32,
    /// Battery capacity in kilojoules.
    #[arg(long, default_value_t = costmodel::DEFAULT_BATTERY_JOULES / 1000.0)]
    battery_kj: f32,
    /// Checkpoint whose LM dims drive the FLOP estimates; default dims otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}


/// A bad flag value or config file; exits with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<vlmkit::Error>() {
        Some(vlmkit::Error::Config(_) | vlmkit::Error::Parameter(_)) => EXIT_USAGE,
        Some(
            vlmkit::Error::Input(_)
            | vlmkit::Error::Dataset { .. }
            | vlmkit::Error::Checkpoint(_)
            | vlmkit::Error::Io { .. }
            | vlmkit::Error::Json(_)
            | vlmkit::Error::Decode(_),
        ) => EXIT_INPUT,
        Some(_) => EXIT_RUNTIME,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_INPUT,
        None => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();

    let result = match cli.command {
        Command::Init(a) => init(a),
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::DpoPairs(a) => dpo_pairs(a),
        Command::Sweep(a) => sweep(a),
        Command::Bench(a) => run_bench(a),
        Command::Cost(a) => cost(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn load_model(path: &Path) -> anyhow::Result<Model<f32>> {
    let model = Model::load(path)?;
    log::info!(
        "loaded {} ({} parameters, {} image tokens)",
        path.display(),
        model.weights.param_count(),
        model.image_tokens()
    );
    Ok(model)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| vlmkit::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufWriter::new(f))
}

fn init(a: InitArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ModelConfig>(&text)
                .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => match a.preset {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
        },
    };
    if let Some(kind) = a.strategy {
        cfg.strategy.kind = kind;
    }
    if let Some(r) = a.ratio {
        cfg.strategy.ratio = r;
    }
    cfg.validate()?;
    let model = Model::<f32>::init(cfg, a.seed)?;
    model.save(&a.out)?;
    log::info!(
        "wrote {} ({} parameters, {} image tokens)",
        a.out.display(),
        model.weights.param_count(),
        model.image_tokens()
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let image = Image::read_ppm(&a.image)?;
    let params = GenerationParams {
        max_new: a.max_new,
        temperature: a.temperature,
        seed: a.seed,
        greedy: !a.sample,
        stop_at_eos: true,
    };
    let out = model.generate(&image, &a.prompt, &params)?;
    log::info!("image_tokens={} prompt_len={} generated={}", out.image_tokens, out.prompt_len, out.tokens.len());
    println!("{}", out.text);
    eprintln!(
        "{}",
        json!({
            "ttft_ms": out.ttft.as_secs_f64() * 1e3,
            "decode_tps": out.decode_tps(),
            "image_tokens": out.image_tokens,
        })
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.train_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| usage(format!("invalid train config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.stage = a.stage;
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(steps <- steps, learning_rate <- lr, batch_size <- batch_size, beta <- beta, tau <- tau, seed <- seed, eval_every <- eval_every);
    cfg.validate()?;
    Ok(cfg)
}

fn caption_data(model: &Model<f32>, path: &Path) -> anyhow::Result<StageData> {
    let ds = io::read_jsonl_dataset(path, DatasetKind::Sft)?;
    let Records::Sft(records) = ds.records else {
        bail!("expected caption records in {}", path.display());
    };
    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let image = Image::read_ppm(resolve_image(path, &r.image))?;
        out.push(CaptionExample::new(model.encode_image(&image)?, &r.prompt, &r.response));
    }
    Ok(StageData::Caption(out))
}

fn dpo_data(reference: &Model<f32>, path: &Path, tau: f32) -> anyhow::Result<StageData> {
    let ds = io::read_jsonl_dataset(path, DatasetKind::Dpo)?;
    let Records::Dpo(records) = ds.records else {
        bail!("expected dpo records in {}", path.display());
    };
    let report = build_pairs(&records, tau)?;
    log::info!("{}: {} pairs admitted, {} rejected", path.display(), report.admitted.len(), report.rejected.len());
    if report.admitted.is_empty() {
        return Err(vlmkit::Error::Dataset {
            path: path.to_path_buf(),
            detail: format!("no pair within tau {tau}"),
        }
        .into());
    }
    let mut out = Vec::with_capacity(report.admitted.len());
    for p in &report.admitted {
        let image = Image::read_ppm(resolve_image(path, &p.image))?;
        let emb = reference.encode_image(&image)?;
        out.push(DpoSample::new(reference, emb, &p.prompt, &p.chosen, &p.rejected)?);
    }
    Ok(StageData::Dpo(out))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(&a)?;
    let mut model = load_model(&a.checkpoint)?;
    // The reference policy is the model as it enters the stage.
    let reference = model.clone();
    let (train_data, val_data) = match (&a.data, a.synthetic) {
        (Some(path), _) => {
            let load = |p: &Path| match cfg.stage {
                Stage::Dpo => dpo_data(&reference, p, cfg.tau),
                _ => caption_data(&reference, p),
            };
            (load(path)?, a.val_data.as_deref().map(load).transpose()?)
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(usage("--synthetic needs at least one sample"));
            }
            let n_val = (n / 4).max(1);
            match cfg.stage {
                Stage::Dpo => (
                    StageData::Dpo(training::synthetic_pairs(&reference, n, cfg.seed)?),
                    Some(StageData::Dpo(training::synthetic_pairs(&reference, n_val, cfg.seed + 1)?)),
                ),
                _ => (
                    StageData::Caption(training::synthetic_captions(&reference, n, cfg.seed)?),
                    Some(StageData::Caption(training::synthetic_captions(&reference, n_val, cfg.seed + 1)?)),
                ),
            }
        }
        (None, None) => return Err(usage("one of --data or --synthetic is required")),
    };
    let report = training::train_stage(&mut model, &cfg, &train_data, val_data.as_ref())?;
    model.save(&a.out)?;
    if let Some(path) = &a.metrics {
        let mut w = create(path)?;
        training::write_metrics_csv(&report.metrics, &mut w)?;
        w.flush()?;
    }
    let last = report.metrics.last();
    println!(
        "{}",
        json!({
            "stage": report.stage,
            "steps": cfg.steps,
            "trainable_tensors": report.trainable.len(),
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "val_loss": last.and_then(|m| m.val_loss),
            "val_ppl": last.and_then(|m| m.val_ppl),
            "val_margin": last.and_then(|m| m.val_margin),
        })
    );
    Ok(())
}

fn dpo_pairs(a: DpoPairsArgs) -> anyhow::Result<()> {
    if !(a.tau > 0.0 && a.tau <= 1.0) {
        return Err(usage(format!("--tau must lie in (0, 1], got {}", a.tau)));
    }
    let ds = io::read_jsonl_dataset(&a.input, DatasetKind::Dpo)?;
    let Records::Dpo(records) = ds.records else {
        return Err(anyhow!("expected dpo records"));
    };
    let report = build_pairs(&records, a.tau)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for p in &report.admitted {
        writeln!(out, "{}", serde_json::to_string(p)?)?;
    }
    out.flush()?;
    for r in &report.rejected {
        log::info!("record {} rejected: {}", r.index, r.reason);
    }
    eprintln!(
        "{}",
        json!({
            "records": records.len(),
            "admitted": report.admitted.len(),
            "rejected": report.rejected.len(),
            "malformed_lines": ds.warnings.len(),
        })
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let base = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => Model::init(ModelConfig::tiny(), a.seed)?,
    };
    let mut cfg = SweepConfig {
        kind: a.strategy,
        ratios: a.ratios.clone(),
        n_train: a.n_train,
        n_val: a.n_val,
        data_seed: a.seed,
        ..Default::default()
    };
    cfg.train.steps = a.steps;
    cfg.train.eval_every = a.eval_every;
    cfg.train.seed = a.seed;
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    let report = ratio_sweep(&base, &cfg)?;
    match &a.out_csv {
        Some(p) => {
            let mut w = create(p)?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    if let Some(p) = &a.out_json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)
            .map_err(|e| vlmkit::Error::Io { path: p.clone(), source: e })?;
    }
    for c in &report.curves {
        log::info!(
            "{} tokens: train loss {:.3} -> {:.3}",
            c.image_tokens,
            c.initial_train_loss,
            c.final_train_loss
        );
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        runs: a.runs,
        warmup: a.warmup,
        decode_tokens: a.decode_tokens,
        ..Default::default()
    };
    cfg.validate()?;
    // Read once up front so a bad checkpoint is an input error, not a
    // per-configuration failure.
    let base = load_model(&a.checkpoint)?;
    for &r in &a.ratios {
        CompressionStrategy::new(base.config.strategy.kind, r).validate(base.config.vision.seq_len())?;
    }
    let image = match &a.image {
        Some(p) => Image::read_ppm(p)?,
        None => synthetic::generate(1, base.config.vision.image_size, 0).remove(0).image,
    };
    let strategies: Vec<CompressionStrategy> = a
        .ratios
        .iter()
        .map(|&r| CompressionStrategy::new(base.config.strategy.kind, r))
        .collect();
    let matrix = bench::run_matrix(&strategies, &image, &cfg, |s| {
        let model = load_model(&a.checkpoint).map_err(|e| vlmkit::Error::Input(describe(&e)))?;
        if s == model.config.strategy {
            Ok(model)
        } else {
            model.with_strategy(s, 0)
        }
    })?;
    print!("{}", matrix.table());
    for (label, err) in &matrix.failures {
        eprintln!("{label}: {err}");
    }
    if let Some(out) = &a.out {
        matrix.write_json(out)?;
        let csv = out.with_extension("csv");
        let mut w = create(&csv)?;
        matrix.write_csv(&mut w)?;
        w.flush()?;
        log::info!("wrote {} and {}", out.display(), csv.display());
    }
    if matrix.reports.is_empty() {
        bail!("every configuration failed");
    }
    Ok(())
}

fn cost(a: CostArgs) -> anyhow::Result<()> {
    let lm = match &a.checkpoint {
        Some(p) => load_model(p)?.config.lm,
        None => ModelConfig::default().lm,
    };
    let report = CostReport::for_image(a.width, a.height, a.jpt, a.battery_kj * 1000.0, &lm)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn inspect(a: InspectArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "format: OVLM v{}", io::checkpoint::FORMAT_VERSION)?;
    writeln!(out, "config: {}", model.config.to_json())?;
    writeln!(
        out,
        "strategy: {} ratio {} ({} image tokens)",
        model.config.strategy.kind,
        model.config.strategy.ratio,
        model.image_tokens()
    )?;
    writeln!(out, "tensors: {}", model.weights.len())?;
    for (name, t) in model.weights.iter() {
        writeln!(out, "  {name} {:?} f32", t.shape())?;
    }
    for c in [Component::Vision, Component::Projector, Component::Lm] {
        writeln!(out, "{c:?} parameters: {}", model.weights.component_param_count(c))?;
    }
    writeln!(out, "total parameters: {}", model.weights.param_count())?;
    Ok(())
}
