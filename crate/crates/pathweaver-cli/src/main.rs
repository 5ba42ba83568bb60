//! Command-line surface for the pathweaver planner: corpus synthesis,
//! training, planning, evaluation, ablation, and checkpoint inspection,
//! all driven by one JSON config with flag > file > profile precedence.

use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use pathweaver::config::{Config, ConfigError, Profile};
use pathweaver::corpus::{
    build_vocabulary, generate, load_jsonl, save_jsonl, slice_corpus, Conversation,
    CorpusError, KnowledgeTriple, PathStep, Utterance,
};
use pathweaver::decoding::{plan, PlanError, PlanOptions};
use pathweaver::eval::{
    ablate, evaluate_e2e, evaluate_planning, render_ablation, render_gen_eval,
    render_plan_eval, EvalError, ExecMode, OfflineResponder, RemoteResponder, Responder,
};
use pathweaver::num::scalar::Scalar;
use pathweaver::planner::{ModelError, PlannerModel, Variant};
use pathweaver::responder::{LlmClient, PromptCaps, ResponderError};
use pathweaver::training::{
    load_checkpoint, save_checkpoint, train, Checkpoint, Precision, TrainError,
};

#[derive(Parser)]
#[command(name = "pathweaver", version, about = "Dialogue path planning toolkit")]
struct Cli {
    /// JSON config file overlaying the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default bundle: desk (laptop-scale) or paper (original scale).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Seed for both corpus synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fusion variant: ff|of|ob|bf|no-ff.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Decoder depth override.
    #[arg(long, global = true)]
    layers: Option<usize>,
    /// Output path override (command-specific meaning).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write it as JSONL.
    Synth,
    /// Train a model on the corpus and write a checkpoint plus loss log.
    Train,
    /// Plan a dialogue path for one instance file.
    Plan {
        /// JSON file with knowledge/profile/history/target.
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        constrained: bool,
        #[arg(long, default_value_t = false, action = ArgAction::Set)]
        target_forcing: bool,
    },
    /// Score planned next pairs against gold continuations.
    EvalPlan {
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        constrained: bool,
        /// Scheduling: sequential|parallel.
        #[arg(long, default_value = "parallel")]
        exec: String,
    },
    /// Simulate dialogues end-to-end and score the responses.
    EvalE2e {
        /// Use the configured chat-completions endpoint instead of the
        /// offline responder.
        #[arg(long)]
        remote: bool,
        #[arg(long, default_value_t = false, action = ArgAction::Set)]
        target_forcing: bool,
        /// Evaluate at most this many dialogues.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "parallel")]
        exec: String,
    },
    /// Train and score every fusion variant across decoder depths.
    Ablate {
        /// Comma-separated decoder depths for the grid.
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 4usize])]
        ablate_layers: Vec<usize>,
        #[arg(long, default_value = "parallel")]
        exec: String,
    },
    /// Print checkpoint metadata without loading weights into a model.
    Inspect {
        /// Checkpoint path; defaults to the configured one.
        checkpoint: Option<PathBuf>,
    },
    /// Print the fully resolved configuration.
    ShowConfig,
}

/// One failure category per documented exit code.
enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
    Transport(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Transport(_) => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Divergence(_) => "divergence",
            CliError::Transport(_) => "transport",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::Divergence(m)
            | CliError::Transport(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::PairBudget { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ResponderError> for CliError {
    fn from(e: ResponderError) -> Self {
        match e {
            ResponderError::Config(_) | ResponderError::MissingApiKey { .. } => {
                CliError::Config(e.to_string())
            }
            ResponderError::Transport { .. } | ResponderError::Protocol(_) => {
                CliError::Transport(e.to_string())
            }
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Plan(p) => p.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Corpus(c) => c.into(),
            EvalError::Responder(r) => r.into(),
            EvalError::Metric(m) => CliError::Data(m.to_string()),
            EvalError::Empty(m) => CliError::Data(m),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let line = json!({
            "error": {"code": e.code(), "kind": e.kind(), "message": e.message()}
        });
        eprintln!("{line}");
        std::process::exit(e.code());
    }
}

fn resolve_config(cli: &Cli) -> Result<Config, CliError> {
    let profile = cli
        .profile
        .as_deref()
        .map(|p| p.parse::<Profile>().map_err(CliError::Config))
        .transpose()?;
    let mut cfg = Config::resolve(cli.config.as_deref(), profile)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(variant) = &cli.variant {
        cfg.planner.variant = variant.parse::<Variant>().map_err(CliError::Config)?;
    }
    if let Some(layers) = cli.layers {
        cfg.planner.n_decoder_layers = layers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, cli.out.as_deref()),
        Command::Train => cmd_train(&cfg, cli.out.as_deref()),
        Command::Plan { instance, constrained, target_forcing } => {
            let options = PlanOptions {
                constrained: *constrained,
                target_forcing: *target_forcing,
                max_pairs: None,
            };
            cmd_plan(&cfg, instance, &options, cli.out.as_deref())
        }
        Command::EvalPlan { constrained, exec } => {
            let options = PlanOptions { constrained: *constrained, ..PlanOptions::default() };
            cmd_eval_plan(&cfg, &options, parse_exec(exec)?, cli.out.as_deref())
        }
        Command::EvalE2e { remote, target_forcing, limit, exec } => cmd_eval_e2e(
            &cfg,
            *remote,
            *target_forcing,
            *limit,
            parse_exec(exec)?,
            cli.out.as_deref(),
        ),
        Command::Ablate { ablate_layers, exec } => {
            cmd_ablate(&cfg, ablate_layers, parse_exec(exec)?, cli.out.as_deref())
        }
        Command::Inspect { checkpoint } => cmd_inspect(&cfg, checkpoint.as_deref()),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}

fn parse_exec(s: &str) -> Result<ExecMode, CliError> {
    s.parse::<ExecMode>().map_err(CliError::Config)
}

fn load_corpus(cfg: &Config) -> Result<Vec<Conversation>, CliError> {
    let path = &cfg.paths.corpus;
    if !path.exists() {
        return Err(CliError::Data(format!(
            "corpus file {} does not exist; run synth first or point paths.corpus at data",
            path.display()
        )));
    }
    Ok(load_jsonl(path, cfg.planner.max_pairs)?)
}

fn load_model(cfg: &Config) -> Result<PlannerModel<f32>, CliError> {
    let path = &cfg.paths.checkpoint;
    if !path.exists() {
        return Err(CliError::Data(format!(
            "checkpoint {} does not exist; run train first",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?.into_model::<f32>()?)
}

/// Write a report as pretty JSON and as an aligned text table.
fn write_report(
    dir: &Path,
    stem: &str,
    json_value: &serde_json::Value,
    table: &str,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let json_path = dir.join(format!("{stem}.json"));
    let text_path = dir.join(format!("{stem}.txt"));
    std::fs::write(&json_path, format!("{:#}\n", json_value))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", json_path.display())))?;
    std::fs::write(&text_path, format!("{table}\n"))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", text_path.display())))?;
    Ok(())
}

fn cmd_synth(cfg: &Config, out: Option<&Path>) -> Result<(), CliError> {
    let convs = generate(&cfg.synth)?;
    let path = out.unwrap_or(&cfg.paths.corpus);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    save_jsonl(path, &convs)?;
    let examples = slice_corpus(&convs, cfg.synth.history_turns).len();
    println!(
        "{}",
        json!({"conversations": convs.len(), "examples": examples, "path": path})
    );
    Ok(())
}

fn cmd_train(cfg: &Config, out: Option<&Path>) -> Result<(), CliError> {
    match cfg.train.precision {
        Precision::F32 => cmd_train_typed::<f32>(cfg, out),
        Precision::F64 => cmd_train_typed::<f64>(cfg, out),
    }
}

fn cmd_train_typed<T: Scalar>(cfg: &Config, out: Option<&Path>) -> Result<(), CliError> {
    let convs = load_corpus(cfg)?;
    let examples = slice_corpus(&convs, cfg.synth.history_turns);
    let vocab = build_vocabulary(&convs)?;
    let mut model =
        PlannerModel::<T>::init(cfg.encoder.clone(), cfg.planner.clone(), vocab, cfg.train.seed)?;
    let report = train(&mut model, &examples, &cfg.train)?;

    let ckpt_path = out.unwrap_or(&cfg.paths.checkpoint);
    save_checkpoint(&report.checkpoint, ckpt_path)?;
    let log_value = serde_json::to_value(&report.log).expect("log serializes");
    std::fs::create_dir_all(&cfg.paths.report_dir)
        .map_err(|e| CliError::Data(format!("cannot create report dir: {e}")))?;
    let log_path = cfg.paths.report_dir.join("train_log.json");
    std::fs::write(&log_path, format!("{:#}\n", log_value))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", log_path.display())))?;

    if report.diverged {
        return Err(CliError::Divergence(format!(
            "training diverged ({}); last good parameters saved to {}",
            report.divergence_detail.unwrap_or_else(|| "non-finite value".into()),
            ckpt_path.display()
        )));
    }
    println!(
        "{}",
        json!({
            "epochs": report.log.len(),
            "best_epoch": report.best_epoch,
            "best_dev_accuracy": report.best_dev_accuracy,
            "checkpoint": ckpt_path,
            "loss_log": log_path,
        })
    );
    Ok(())
}

/// A planning instance: the conversation state to plan from. Extra fields
/// (a full corpus line, say) are ignored, so any corpus JSONL line works.
#[derive(Deserialize)]
struct PlanInstance {
    #[serde(default)]
    knowledge: Vec<KnowledgeTriple>,
    #[serde(default)]
    profile: Vec<(String, String)>,
    #[serde(default)]
    history: Vec<Utterance>,
    target: PathStep,
}

fn cmd_plan(
    cfg: &Config,
    instance_path: &Path,
    options: &PlanOptions,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let text = std::fs::read_to_string(instance_path).map_err(|e| {
        CliError::Data(format!("cannot read instance {}: {e}", instance_path.display()))
    })?;
    let instance: PlanInstance = serde_json::from_str(&text).map_err(|e| {
        CliError::Data(format!("instance {} is malformed: {e}", instance_path.display()))
    })?;
    let result = plan(
        &model,
        &instance.knowledge,
        &instance.profile,
        &instance.history,
        &instance.target,
        options,
    )?;
    let value = result.to_json();
    match out {
        Some(path) => std::fs::write(path, format!("{:#}\n", value))
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?,
        None => println!("{:#}", value),
    }
    Ok(())
}

fn cmd_eval_plan(
    cfg: &Config,
    options: &PlanOptions,
    mode: ExecMode,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let convs = load_corpus(cfg)?;
    let examples = slice_corpus(&convs, cfg.synth.history_turns);
    let eval = evaluate_planning(&model, &examples, options, mode)?;
    let table = render_plan_eval(&eval);
    let value = serde_json::to_value(eval).expect("eval serializes");
    let dir = out.unwrap_or(&cfg.paths.report_dir);
    write_report(dir, "eval_plan", &value, &table)?;
    println!("{table}");
    Ok(())
}

fn cmd_eval_e2e(
    cfg: &Config,
    remote: bool,
    target_forcing: bool,
    limit: Option<usize>,
    mode: ExecMode,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let mut convs = load_corpus(cfg)?;
    if let Some(n) = limit {
        convs.truncate(n);
    }
    let options = PlanOptions { target_forcing, ..PlanOptions::default() };
    let responder: Box<dyn Responder> = if remote {
        let client = LlmClient::new(cfg.llm.clone())?;
        Box::new(RemoteResponder { client, caps: PromptCaps::default() })
    } else {
        Box::new(OfflineResponder)
    };
    let eval = evaluate_e2e(
        &model,
        &convs,
        cfg.synth.history_turns,
        &options,
        &responder,
        mode,
    )?;
    let table = render_gen_eval(&eval);
    let value = serde_json::to_value(eval).expect("eval serializes");
    let dir = out.unwrap_or(&cfg.paths.report_dir);
    write_report(dir, "eval_e2e", &value, &table)?;
    println!("{table}");
    Ok(())
}

fn cmd_ablate(
    cfg: &Config,
    layer_counts: &[usize],
    mode: ExecMode,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let convs = load_corpus(cfg)?;
    let cells = ablate::<f32>(
        &convs,
        &cfg.encoder,
        &cfg.planner,
        &cfg.train,
        cfg.synth.history_turns,
        &Variant::ALL,
        layer_counts,
        mode,
    )?;
    let table = render_ablation(&cells);
    let value = serde_json::to_value(&cells).expect("cells serialize");
    let dir = out.unwrap_or(&cfg.paths.report_dir);
    write_report(dir, "ablate", &value, &table)?;
    println!("{table}");
    Ok(())
}

fn cmd_inspect(cfg: &Config, path: Option<&Path>) -> Result<(), CliError> {
    let path = path.unwrap_or(&cfg.paths.checkpoint);
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt: Checkpoint = load_checkpoint(path)?;
    let n_parameters: usize = ckpt.arrays.iter().map(|(_, r, c, _)| r * c).sum();
    println!(
        "{}",
        json!({
            "version": ckpt.version,
            "meta": ckpt.meta,
            "encoder": ckpt.encoder,
            "planner": ckpt.planner,
            "vocab_size": ckpt.vocab.len(),
            "n_arrays": ckpt.arrays.len(),
            "n_parameters": n_parameters,
        })
    );
    Ok(())
}
