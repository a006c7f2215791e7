//! The `desta` command line. Lives in the library so tests can drive it
//! without spawning processes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adapter::AdapterKind;
use crate::caption::{
    check_records, compute_manifest_stats, default_caption_prompts, default_prompts, default_templates,
    generate_dataset, load_prompts, load_templates, synthesize_metadata, CaptionRecord, CaptionResources,
    GeneratorKind, Lexicon, MetadataRecord, OfflineParaphraser, RemoteGenerator, TextGenerator,
};
use crate::config::ProjectConfig;
use crate::eval::{
    aggregate, evaluate_instances, format_instance_table, format_sweep_table, instruction_pairs, lora_scale_sweep,
    synthesize_tasks, validate_tasks, zero_shot_metrics, AllowedSetDetector, DestaResponder, EvalError,
    InstructionModel, Split, TaskInstance, ZeroShotResponse,
};
use crate::model::DestaModel;
use crate::tensor::checkpoint::Checkpoint;
use crate::tokenizer::{Tokenizer, EOS};
use crate::trainer::{
    caption_items, distinct_batch, fit, instruction_items, load_weights, regenerate, FeatureSource, FitOptions, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Loss below which `--overfit-one-batch` counts as converged.
pub const OVERFIT_LOSS: f64 = 0.1;
const OVERFIT_BATCH: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "desta", version, about = "Speech-text alignment by descriptive captions, at desk scale")]
pub struct Cli {
    /// TOML config; replaces the preset entirely.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Overfit,
    Default,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes seeded toy metadata.
    SynthMetadata {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value = "toy")]
        corpus: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Builds the caption manifest from metadata.
    CaptionGen {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the statistics block here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Prints statistics of a caption manifest.
    Stats {
        #[arg(long)]
        captions: PathBuf,
    },
    /// Writes attribute question tasks for the given metadata.
    SynthTasks {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    Train(TrainArgs),
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    /// Caption manifest for caption training.
    #[arg(long, required_unless_present = "instruct_tasks")]
    pub captions: Option<PathBuf>,
    /// Instruction-tune on the seen split of these tasks instead.
    #[arg(long, conflicts_with = "captions")]
    pub instruct_tasks: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_parser = parse_adapter)]
    pub adapter: Option<AdapterKind>,
    /// Train on the first four examples until the loss drops below 0.1.
    #[arg(long)]
    pub overfit_one_batch: bool,
    /// Continue from a training checkpoint (weights, optimizer, counters).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start from a checkpoint's weights with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    /// Without one, the freshly initialised model is evaluated.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub lora_scale: Option<f64>,
    /// Comma-separated scales; bare `--sweep` uses the configured list.
    #[arg(long, num_args = 0..=1, default_missing_value = "", allow_negative_numbers = true)]
    pub sweep: Option<String>,
    #[arg(long, value_parser = parse_adapter)]
    pub adapter: Option<AdapterKind>,
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
}

fn parse_adapter(s: &str) -> Result<AdapterKind, String> {
    s.parse()
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, msg: msg.into() }
    }
    fn numeric(msg: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, msg: msg.into() }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::numeric(e.to_string()),
            other => Failure::usage(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Identity { .. } => Failure::numeric(e.to_string()),
            EvalError::Train(t) => t.into(),
            other => Failure::usage(other.to_string()),
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),+) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::usage(e.to_string())
            }
        }
    )+};
}
usage_from!(
    crate::config::ConfigError,
    crate::caption::CaptionError,
    crate::model::ModelError,
    crate::tensor::checkpoint::CheckpointError,
    crate::jsonl::JsonlError
);

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code; messages go to stderr, results to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<ProjectConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ProjectConfig::load(p)?,
        None => match cli.preset {
            Preset::Toy => ProjectConfig::toy(),
            Preset::Overfit => ProjectConfig::overfit(),
            Preset::Default => ProjectConfig::default(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    Ok(cfg)
}

fn execute(cli: Cli) -> CmdResult {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::SynthMetadata { n, corpus, out } => {
            let records = synthesize_metadata(n, cfg.seed, &corpus);
            crate::jsonl::write(&out, &records)?;
            println!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
        Command::CaptionGen { metadata, out, stats } => cmd_caption_gen(&cfg, &metadata, &out, stats.as_deref()),
        Command::Stats { captions } => {
            let records: Vec<CaptionRecord> = read_input(&captions)?;
            println!("{}", to_json(&compute_manifest_stats(&records)));
            Ok(())
        }
        Command::SynthTasks { metadata, out, samples } => {
            let meta = read_metadata(&metadata)?;
            let tasks = synthesize_tasks(&meta, samples.unwrap_or(cfg.eval.samples_per_instance), cfg.seed);
            crate::jsonl::write(&out, &tasks)?;
            println!("wrote {} task instances to {}", tasks.len(), out.display());
            Ok(())
        }
        Command::Train(args) => cmd_train(&cfg, &args),
        Command::Eval(args) => cmd_eval(&cfg, &args),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("{}: file not found", path.display())));
    }
    Ok(crate::jsonl::read(path)?)
}

fn read_metadata(path: &Path) -> Result<Vec<MetadataRecord>, Failure> {
    let records: Vec<MetadataRecord> = read_input(path)?;
    check_records(&records)?;
    Ok(records)
}

fn caption_resources(cfg: &ProjectConfig) -> Result<CaptionResources, Failure> {
    let p = &cfg.pipeline;
    Ok(CaptionResources {
        prompts: match &p.prompts {
            Some(path) => load_prompts(path)?,
            None => default_prompts(),
        },
        templates: match &p.templates {
            Some(path) => load_templates(path)?,
            None => default_templates(),
        },
        lexicon: match &p.lexicon {
            Some(path) => Lexicon::load(path)?,
            None => Lexicon::default(),
        },
        tokenizer: Tokenizer::default(),
    })
}

fn cmd_caption_gen(cfg: &ProjectConfig, metadata: &Path, out: &Path, stats_path: Option<&Path>) -> CmdResult {
    let records = read_metadata(metadata)?;
    let res = caption_resources(cfg)?;
    let p = &cfg.pipeline;
    let generator: Box<dyn TextGenerator> = match p.generator {
        GeneratorKind::Offline => Box::new(OfflineParaphraser::new(res.lexicon.clone())),
        GeneratorKind::Remote => {
            let endpoint = RemoteGenerator::resolve_endpoint(p.endpoint.as_deref())
                .ok_or_else(|| Failure::usage("remote generator selected but no endpoint configured"))?;
            Box::new(RemoteGenerator::new(endpoint, Duration::from_secs_f64(p.timeout_s), p.retries))
        }
    };
    let batch = generate_dataset(&records, &res, p.captions_per_audio, generator.as_ref(), cfg.seed);
    let attempted = records.len() * p.captions_per_audio;
    let ratio = if attempted == 0 { 0.0 } else { batch.skipped.len() as f64 / attempted as f64 };
    if ratio > p.max_skip_ratio {
        for s in batch.skipped.iter().take(10) {
            eprintln!("skipped {} draw {}: {}", s.audio_id, s.draw, s.reason);
        }
        return Err(Failure::data(format!(
            "{} of {attempted} draws skipped ({:.1}%), above the limit of {:.1}%",
            batch.skipped.len(),
            100.0 * ratio,
            100.0 * p.max_skip_ratio
        )));
    }
    crate::jsonl::write(out, &batch.records)?;
    let stats = compute_manifest_stats(&batch.records);
    let text = to_json(&stats);
    if let Some(path) = stats_path {
        write_file(path, &format!("{text}\n"))?;
    }
    println!("{text}");
    log::info!("{} captions written, {} draws skipped", batch.records.len(), batch.skipped.len());
    Ok(())
}

fn feature_source(cfg: &ProjectConfig, dir: Option<&Path>) -> FeatureSource {
    match dir.map(Path::to_path_buf).or_else(|| cfg.paths.features_dir.clone()) {
        Some(d) => FeatureSource::Dir(d),
        None => FeatureSource::Synthetic {
            base_frames: cfg.paths.synthetic_frames.unwrap_or(cfg.encoder.frames),
            seed: cfg.seed,
        },
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("{}: checkpoint not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn caption_prompts(cfg: &ProjectConfig) -> Result<Vec<String>, Failure> {
    match &cfg.pipeline.caption_prompts {
        None => Ok(default_caption_prompts()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    adapter: &'static str,
    steps: usize,
    epochs_completed: usize,
    final_loss: Option<f64>,
    trainable_params: usize,
    checkpoint: String,
}

fn cmd_train(cfg: &ProjectConfig, args: &TrainArgs) -> CmdResult {
    let meta = read_metadata(&args.metadata)?;
    let mut model = DestaModel::new(cfg.model_config(args.adapter), cfg.seed)?;
    let tok = Tokenizer::default();
    let features = feature_source(cfg, args.features_dir.as_deref());
    let (mut items, mut tcfg) = match (&args.captions, &args.instruct_tasks) {
        (Some(c), _) => {
            let captions: Vec<CaptionRecord> = read_input(c)?;
            let prompts = caption_prompts(cfg)?;
            let items = caption_items(&model, &tok, &captions, &meta, &prompts, &features, cfg.seed)?;
            (items, cfg.trainer.clone())
        }
        (None, Some(t)) => {
            let tasks: Vec<TaskInstance> = read_input(t)?;
            validate_tasks(&tasks)?;
            let pairs = instruction_pairs(&tasks, Split::Seen);
            (instruction_items(&model, &tok, &pairs, &meta, &features)?, cfg.instruct.clone())
        }
        (None, None) => return Err(Failure::usage("either --captions or --instruct-tasks is required")),
    };
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    if let Some(p) = &args.init {
        load_weights(&mut model, load_checkpoint(p)?)?;
    }
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::usage(format!("{}: {e}", args.out_dir.display())))?;
    write_file(&args.out_dir.join("config.toml"), &cfg.to_toml())?;

    let mut stop_below = None;
    let mut ckpt_dir = Some(args.out_dir.clone());
    if args.overfit_one_batch {
        items = distinct_batch(&items, OVERFIT_BATCH);
        if items.len() < OVERFIT_BATCH {
            return Err(Failure::usage(format!("need {OVERFIT_BATCH} captions with distinct inputs, found {}", items.len())));
        }
        tcfg.batch_size = OVERFIT_BATCH;
        stop_below = Some(OVERFIT_LOSS);
        // One step per epoch here; per-epoch checkpoints would only add noise.
        ckpt_dir = None;
    }
    let report = fit(
        &mut model,
        &items,
        &tcfg,
        FitOptions {
            out_dir: ckpt_dir,
            log_path: Some(args.out_dir.join("train_log.jsonl")),
            resume,
            stop_below,
        },
    )?;
    let final_path = args.out_dir.join("final.ckpt");
    report.final_checkpoint.save(&final_path)?;
    let summary = TrainSummary {
        adapter: model.adapter_kind_name(),
        steps: report.steps,
        epochs_completed: report.epochs_completed,
        final_loss: report.final_loss(),
        trainable_params: model.count_trainable_params().total,
        checkpoint: final_path.display().to_string(),
    };
    println!("{}", to_json(&summary));

    if args.overfit_one_batch {
        let loss = report.final_loss().unwrap_or(f64::INFINITY);
        let mut reproduced = 0;
        for it in &items {
            let target: Vec<u32> = it.example.target_tokens.iter().copied().filter(|&t| t != EOS).collect();
            let out = regenerate(&model, it, target.len() + 4)?;
            reproduced += (out == target) as usize;
        }
        println!(
            "overfit: loss {loss:.4} after {} steps; {reproduced}/{} targets reproduced verbatim",
            report.steps,
            items.len()
        );
        if loss >= OVERFIT_LOSS {
            return Err(Failure::numeric(format!("overfit run did not reach loss {OVERFIT_LOSS}")));
        }
    }
    Ok(())
}

fn parse_scales(text: &str, fallback: &[f64]) -> Result<Vec<f64>, Failure> {
    if text.trim().is_empty() {
        return Ok(fallback.to_vec());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Failure::usage(format!("bad scale `{s}`: {e}")))
        })
        .collect()
}

fn check_scale(s: f64) -> CmdResult {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Failure::usage(format!("LoRA scale {s} outside [0, 1]")))
    }
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    lora_scale: Option<f64>,
    report: &'a crate::eval::EvalReport,
    zero_shot: &'a crate::eval::ZeroShotReport,
}

fn cmd_eval(cfg: &ProjectConfig, args: &EvalArgs) -> CmdResult {
    let scale = args.lora_scale;
    if let Some(s) = scale {
        check_scale(s)?;
    }
    let sweep = args
        .sweep
        .as_deref()
        .map(|t| parse_scales(t, &cfg.eval.sweep))
        .transpose()?;
    if let Some(scales) = &sweep {
        scales.iter().try_for_each(|&s| check_scale(s))?;
    }
    let meta = read_metadata(&args.metadata)?;
    let tasks: Vec<TaskInstance> = read_input(&args.tasks)?;
    validate_tasks(&tasks)?;
    let ckpt = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let adapter = match (args.adapter, ckpt.as_ref().and_then(|c| c.meta.get("adapter"))) {
        (Some(k), _) => Some(k),
        (None, Some(name)) => Some(name.parse::<AdapterKind>().map_err(Failure::usage)?),
        (None, None) => None,
    };
    let mut model = DestaModel::new(cfg.model_config(adapter), cfg.seed)?;
    if let Some(c) = ckpt {
        load_weights(&mut model, c)?;
    }
    let features = feature_source(cfg, args.features_dir.as_deref());
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::usage(format!("{}: {e}", args.out_dir.display())))?;
    let mut responder = DestaResponder::new(
        &mut model,
        Tokenizer::default(),
        &tasks,
        &meta,
        &features,
        cfg.eval.max_new_tokens,
    )?;

    if let Some(scales) = sweep {
        let rows = lora_scale_sweep(&mut responder, &tasks, &scales, &AllowedSetDetector)?;
        if let Some(bad) = rows.iter().find(|r| !r.report.identity_holds()) {
            return Err(EvalError::Identity { scale: bad.scale }.into());
        }
        let table = format_sweep_table(&rows);
        write_file(&args.out_dir.join("sweep.json"), &format!("{}\n", to_json(&rows)))?;
        write_file(&args.out_dir.join("sweep_table.txt"), &table)?;
        print!("{table}");
        return Ok(());
    }

    if let Some(s) = scale {
        responder.set_lora_scale(s)?;
    }
    let (results, predictions) = evaluate_instances(&mut responder, &tasks)?;
    let report = aggregate(&results)?;
    let allowed: std::collections::BTreeMap<(&str, usize), Vec<String>> = tasks
        .iter()
        .flat_map(|t| t.samples.iter().enumerate().map(move |(i, s)| ((t.instance_id.as_str(), i), s.allowed())))
        .collect();
    let responses: Vec<ZeroShotResponse> = predictions
        .iter()
        .map(|p| ZeroShotResponse {
            question_id: format!("{}/{}", p.instance_id, p.sample),
            text: p.prediction.clone(),
            label: p.label.clone(),
            allowed: allowed[&(p.instance_id.as_str(), p.sample)].clone(),
        })
        .collect();
    let zero_shot = zero_shot_metrics(&responses, &AllowedSetDetector)?;
    if !zero_shot.identity_holds() {
        return Err(EvalError::Identity { scale: scale.unwrap_or(1.0) }.into());
    }
    let table = format_instance_table(&report);
    let out = EvalOutput {
        lora_scale: scale,
        report: &report,
        zero_shot: &zero_shot,
    };
    write_file(&args.out_dir.join("eval_report.json"), &format!("{}\n", to_json(&out)))?;
    write_file(&args.out_dir.join("eval_table.txt"), &table)?;
    crate::jsonl::write(args.out_dir.join("predictions.jsonl"), &predictions)?;
    print!("{table}");
    Ok(())
}
