use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dfr_core::corpus::{load_dialogues, load_kb, Dialogue, DialogueContext, KbLevel, KnowledgeBase};
use dfr_core::encoder::{load_checkpoint, save_checkpoint, EncoderParams};
use dfr_core::generator::llm::{LlmAdapter, PromptTemplates};
use dfr_core::generator::transport::{HttpTransport, KEY_VAR};
use dfr_core::generator::{GeneratorAdapter, OracleGenerator};
use dfr_core::pretrain::pretrain_loop;
use dfr_core::retriever::{build_index, retrieve};
use dfr_core::runtime::{
    evaluate, save_checkpoint_with_meta, sweep_k, sweep_table, trace_turn, train, EvalConfig, RunConfig,
};
use dfr_core::synthetic::{generate, SyntheticConfig};

#[derive(Parser)]
#[command(name = "dfr", version, about = "Train and evaluate a knowledge retriever from generator feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a knowledge base and dialogue files for consistency.
    ValidateData {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, required = true, num_args = 1..)]
        dialogues: Vec<PathBuf>,
    },
    /// Contrastive pre-training on distantly labeled turns.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        dialogues: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the retriever from generator feedback.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        dialogues: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        adapter: AdapterArgs,
        #[command(flatten)]
        train: TrainFlags,
        /// Directory that receives the best checkpoint and its metadata.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval and response metrics over a dialogue file.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        dialogues: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        adapter: AdapterArgs,
        /// Recall cut-offs.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5, 10])]
        k: Vec<usize>,
        /// Entities handed to the generator.
        #[arg(long)]
        generation_k: Option<usize>,
        #[arg(long)]
        retrieval_only: bool,
        /// Write per-turn records and the summary as JSON lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Top-K entities for one query.
    Retrieve {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Rendered context, e.g. "[user]: cheap chinese food".
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Feedback record for one dialogue turn, as JSON.
    Trace {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        dialogues: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        adapter: AdapterArgs,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        dialogue: String,
        /// Zero-based turn index.
        #[arg(long, default_value_t = 0)]
        turn: usize,
    },
    /// Evaluate across several values of K.
    SweepK {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        dialogues: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        adapter: AdapterArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long)]
        retrieval_only: bool,
    },
    /// Write a generated corpus with known gold entities.
    Synth {
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 500)]
        dialogues: usize,
        #[arg(long)]
        confusable: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for kb.json, train.json and validation.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long, value_enum, default_value_t = Level::Dataset)]
    level: Level,
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Dataset,
    Session,
}

impl From<Level> for KbLevel {
    fn from(l: Level) -> Self {
        match l {
            Level::Dataset => KbLevel::Dataset,
            Level::Session => KbLevel::Session,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Encoder checkpoint file, or a directory holding `encoder.ckpt`.
    /// Without it the encoder is freshly initialized from `--init-seed`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

#[derive(Args)]
struct AdapterArgs {
    #[arg(long, value_enum, default_value_t = AdapterKind::Oracle)]
    adapter: AdapterKind,
    /// Include the built-in demonstrations in LLM prompts.
    #[arg(long)]
    few_shot: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterKind {
    Oracle,
    Llm,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// rank_bleu, rank_entityf1, argmin_bleu or argmin_entityf1.
    #[arg(long)]
    strategy: Option<String>,
    /// dual or positive_only.
    #[arg(long)]
    loss_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    refresh_every: Option<u64>,
    #[arg(long)]
    validate_every: Option<u64>,
    #[arg(long)]
    start_step: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(value: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .with_context(|| format!("unknown {what} {value:?}"))
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let t = &mut cfg.train;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    t.$field = v;
                }
            )*};
        }
        set!(k, beam, eta, tau, lr, seed, refresh_every, validate_every, start_step, steps, accumulation, batch_size);
        if let Some(s) = &self.strategy {
            t.strategy = parse_enum(s, "strategy")?;
        }
        if let Some(m) = &self.loss_mode {
            t.loss_mode = parse_enum(m, "loss mode")?;
        }
        t.validate()?;
        Ok(())
    }
}

fn run_config(data: &DataArgs) -> Result<RunConfig> {
    Ok(RunConfig::load(data.config.as_deref(), data.level.into())?)
}

fn load_data(data: &DataArgs) -> Result<KnowledgeBase> {
    load_kb(&data.kb, data.level.into()).with_context(|| format!("loading {}", data.kb.display()))
}

fn dialogues(path: &Path, kb: &KnowledgeBase) -> Result<Vec<Dialogue>> {
    load_dialogues(path, kb).with_context(|| format!("loading {}", path.display()))
}

fn load_params(model: &ModelArgs, cfg: &RunConfig) -> Result<EncoderParams> {
    match &model.checkpoint {
        Some(path) => {
            let file = if path.is_dir() { path.join("encoder.ckpt") } else { path.clone() };
            load_checkpoint(&file).with_context(|| format!("loading {}", file.display()))
        }
        None => Ok(EncoderParams::init(model.init_seed, cfg.encoder.clone())?),
    }
}

fn adapter(args: &AdapterArgs, cfg: &RunConfig) -> Result<Box<dyn GeneratorAdapter>> {
    match args.adapter {
        AdapterKind::Oracle => Ok(Box::new(OracleGenerator::new(cfg.oracle.clone())?)),
        AdapterKind::Llm => {
            let timeout = Duration::from_secs(cfg.llm.timeout_secs);
            let transport = match &cfg.llm.endpoint {
                Some(endpoint) => HttpTransport::new(endpoint.clone(), std::env::var(KEY_VAR).ok(), timeout),
                None => HttpTransport::from_env(timeout)?,
            };
            let templates = if args.few_shot || cfg.llm.few_shot {
                PromptTemplates::few_shot()
            } else {
                PromptTemplates::default()
            };
            Ok(Box::new(LlmAdapter::new(transport, cfg.llm.clone(), templates)?))
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ValidateData { data, dialogues: files } => {
            let kb = load_data(&data)?;
            let mut total = 0;
            let mut turns = 0;
            for f in &files {
                let ds = dialogues(f, &kb)?;
                total += ds.len();
                turns += ds.iter().map(|d| d.turns.len()).sum::<usize>();
            }
            println!("ok: {} entities, {total} dialogues, {turns} turns", kb.len());
        }
        Command::Pretrain {
            data,
            dialogues: file,
            model,
            epochs,
            out,
        } => {
            let mut cfg = run_config(&data)?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            let kb = load_data(&data)?;
            let ds = dialogues(&file, &kb)?;
            let params = load_params(&model, &cfg)?;
            let (trained, report) = pretrain_loop(&ds, &kb, &params, &cfg.pretrain)?;
            save_checkpoint(&trained, &out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Train {
            data,
            dialogues: file,
            validation,
            model,
            adapter: adapter_args,
            train: flags,
            out,
        } => {
            let mut cfg = run_config(&data)?;
            flags.apply(&mut cfg)?;
            let kb = load_data(&data)?;
            let ds = dialogues(&file, &kb)?;
            let val = dialogues(&validation, &kb)?;
            let params = load_params(&model, &cfg)?;
            let gen = adapter(&adapter_args, &cfg)?;
            let outcome = train(&ds, &val, &kb, gen.as_ref(), &params, &cfg.train)?;
            save_checkpoint_with_meta(&outcome.best, &out)?;
            write_json(&out.join("history.json"), &outcome.history)?;
            write_json(&out.join("stats.json"), &outcome.stats)?;
            println!("{}", serde_json::to_string(&outcome.best.meta)?);
        }
        Command::Eval {
            data,
            dialogues: file,
            model,
            adapter: adapter_args,
            k,
            generation_k,
            retrieval_only,
            report,
        } => {
            let cfg = run_config(&data)?;
            let kb = load_data(&data)?;
            let ds = dialogues(&file, &kb)?;
            let params = load_params(&model, &cfg)?;
            let gen = adapter(&adapter_args, &cfg)?;
            let eval_cfg = EvalConfig {
                generation_k: generation_k.unwrap_or(cfg.train.k),
                ks: k,
                retrieval_only,
                scope: cfg.train.scope,
                max_failure_rate: cfg.train.max_failure_rate,
            };
            let out = evaluate(&ds, &kb, &params, gen.as_ref(), &eval_cfg)?;
            if let Some(path) = report {
                fs::write(&path, out.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{}", out.report.to_table());
        }
        Command::Retrieve { data, model, query, k } => {
            let cfg = run_config(&data)?;
            let kb = load_data(&data)?;
            let params = load_params(&model, &cfg)?;
            let index = build_index(&kb, &params)?;
            let top = retrieve(&DialogueContext::from_user(query), &index, &params, k)?;
            for e in &top.entries {
                println!("{:.6}\t{}\t{}", e.score, e.entity_id, kb.get(&e.entity_id).map(|x| x.linearize()).unwrap_or_default());
            }
        }
        Command::Trace {
            data,
            dialogues: file,
            model,
            adapter: adapter_args,
            train: flags,
            dialogue,
            turn,
        } => {
            let mut cfg = run_config(&data)?;
            flags.apply(&mut cfg)?;
            let kb = load_data(&data)?;
            let ds = dialogues(&file, &kb)?;
            let d = ds
                .iter()
                .find(|d| d.id == dialogue)
                .with_context(|| format!("no dialogue {dialogue:?}"))?;
            let params = load_params(&model, &cfg)?;
            let gen = adapter(&adapter_args, &cfg)?;
            let record = trace_turn(d, turn, &kb, &params, gen.as_ref(), &cfg.train)?;
            println!("{}", serde_json::to_string(&record)?);
        }
        Command::SweepK {
            data,
            dialogues: file,
            model,
            adapter: adapter_args,
            k,
            retrieval_only,
        } => {
            let cfg = run_config(&data)?;
            let kb = load_data(&data)?;
            let ds = dialogues(&file, &kb)?;
            let params = load_params(&model, &cfg)?;
            let gen = adapter(&adapter_args, &cfg)?;
            let base = EvalConfig {
                retrieval_only,
                scope: cfg.train.scope,
                max_failure_rate: cfg.train.max_failure_rate,
                ..EvalConfig::default()
            };
            let rows = sweep_k(&ds, &kb, &params, gen.as_ref(), &k, &base)?;
            print!("{}", sweep_table(&rows));
        }
        Command::Synth {
            entities,
            dialogues: n,
            confusable,
            seed,
            out,
        } => {
            if entities == 0 || n == 0 {
                bail!("entities and dialogues must be positive");
            }
            let corpus = generate(&SyntheticConfig {
                entities,
                dialogues: n,
                confusable,
                seed,
                ..SyntheticConfig::default()
            });
            fs::create_dir_all(&out)?;
            write_json(&out.join("kb.json"), &corpus.kb.to_file())?;
            write_json(&out.join("train.json"), &serde_json::json!({ "dialogues": corpus.train }))?;
            write_json(&out.join("validation.json"), &serde_json::json!({ "dialogues": corpus.validation }))?;
            println!(
                "wrote {} entities, {} training and {} validation dialogues to {}",
                corpus.kb.len(),
                corpus.train.len(),
                corpus.validation.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
