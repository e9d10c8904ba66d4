use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use kvmatch::checkpoint;
use kvmatch::config::{Ablation, RunConfig};
use kvmatch::docmodel::{
    corpus_stats, generate_split, load_corpus_dir, load_funsd_document, save_funsd_document, Document,
};
use kvmatch::inference::{extraction_records, records_to_jsonl, MapperMode};
use kvmatch::model::Model;
use kvmatch::training::{evaluate_with, train, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "kvmatch", version, about = "Key-value matching for form information extraction")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both `generator.seed` and `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Switches one component off. Repeatable.
    #[arg(long, global = true, value_enum)]
    ablate: Vec<AblateArg>,
    /// Key-to-category mapping used at inference.
    #[arg(long, global = true, value_enum)]
    mapper: Option<MapperArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test corpus under `paths.data_dir`.
    Gen,
    /// Train on `data_dir/train`, writing the checkpoint and metrics to `paths.run_dir`.
    Train,
    /// Score a checkpoint on `data_dir/test`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also print one row per category.
        #[arg(long)]
        per_category: bool,
    },
    /// Extract entities from one FUNSD-format document.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines output; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateArg {
    Focal,
    Kv,
    Num2vec,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MapperArg {
    Lookup,
    Semantic,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.generator.seed = seed;
        cfg.train.seed = seed;
    }
    for a in &cli.ablate {
        cfg.apply_ablation(match a {
            AblateArg::Focal => Ablation::Focal,
            AblateArg::Kv => Ablation::Kv,
            AblateArg::Num2vec => Ablation::Num2vec,
        });
    }
    if let Some(m) = cli.mapper {
        cfg.inference.mapper = match m {
            MapperArg::Lookup => MapperMode::Lookup,
            MapperArg::Semantic => MapperMode::Semantic,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let echo = cfg.to_toml_string()?;
    info!("resolved configuration:\n{echo}");
    fs::write(dir.join("config.toml"), echo).with_context(|| format!("writing config echo to {}", dir.display()))
}

fn load_split(dir: &Path) -> Result<Vec<Document>> {
    if !dir.is_dir() {
        bail!("corpus directory {} does not exist", dir.display());
    }
    Ok(load_corpus_dir(dir, None)?)
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let (train_docs, test_docs) = generate_split(&cfg.generator)?;
    let data = &cfg.paths.data_dir;
    for (name, docs) in [("train", &train_docs), ("test", &test_docs)] {
        let dir = data.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for doc in docs.iter() {
            save_funsd_document(doc, &dir.join(format!("{}.json", doc.id)))?;
        }
    }
    let stats = corpus_stats(&train_docs, &test_docs);
    let manifest = serde_json::json!({ "stats": stats, "generator": cfg.generator });
    fs::write(data.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    write_echo(cfg, data)?;
    println!(
        "generated {} train and {} test documents in {} (kv_ratio {:.4}, {} categories)",
        stats.num_train,
        stats.num_test,
        data.display(),
        stats.kv_ratio,
        stats.num_categories
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train_docs = load_split(&cfg.paths.train_dir())?;
    if train_docs.is_empty() {
        bail!("no training documents in {}", cfg.paths.train_dir().display());
    }
    let test_dir = cfg.paths.test_dir();
    let test_docs = if test_dir.is_dir() { load_split(&test_dir)? } else { Vec::new() };
    let run = &cfg.paths.run_dir;
    fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
    write_echo(cfg, run)?;

    let mut model = Model::from_corpus(cfg.model_config(), &train_docs, cfg.train.seed)?;
    let options = TrainOptions {
        metrics_path: Some(cfg.paths.metrics()),
        checkpoint_path: Some(cfg.paths.checkpoint()),
        eval: (!test_docs.is_empty()).then_some((test_docs.as_slice(), &cfg.inference)),
    };
    let history = train(&mut model, &train_docs, &cfg.train, &cfg.loss, &options)?;
    let last = history.steps.last().map_or(f64::NAN, |s| s.loss_total);
    println!(
        "trained {} steps over {} epochs, final loss {last:.5}; checkpoint {}",
        history.steps.len(),
        cfg.train.epochs,
        cfg.paths.checkpoint().display()
    );
    if let Some(report) = history.epoch_reports.last() {
        println!("held-out pair F1 {:.4}, entity F1 {:.4}", report.pair.f1, report.entity.f1);
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint_path: Option<&PathBuf>) -> Result<Model> {
    let path = checkpoint_path.cloned().unwrap_or_else(|| cfg.paths.checkpoint());
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let (model, epoch) = checkpoint::load(&path)?;
    info!("loaded {} (epoch {epoch})", path.display());
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig, checkpoint_path: Option<&PathBuf>, per_category: bool) -> Result<()> {
    let model = load_model(cfg, checkpoint_path)?;
    let docs = load_split(&cfg.paths.test_dir())?;
    let mapper = model.mapper(&cfg.inference)?;
    let report = evaluate_with(&model, &docs, &cfg.inference, &mapper)?;
    println!(
        "documents {}  pair P {:.4} R {:.4} F1 {:.4}  entity P {:.4} R {:.4} F1 {:.4}",
        report.documents,
        report.pair.precision,
        report.pair.recall,
        report.pair.f1,
        report.entity.precision,
        report.entity.recall,
        report.entity.f1
    );
    if per_category {
        print!("{}", report.format_table());
    }
    let run = &cfg.paths.run_dir;
    fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
    fs::write(run.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, input: &Path, checkpoint_path: Option<&PathBuf>, output: Option<&PathBuf>) -> Result<()> {
    let model = load_model(cfg, checkpoint_path)?;
    let doc = load_funsd_document(input)?;
    let mapper = model.mapper(&cfg.inference)?;
    let extraction = model.extract(&doc, &cfg.inference, &mapper)?;
    let records = extraction_records(&doc, &extraction.result, cfg.inference.label_scheme);
    let text = records_to_jsonl(&records)?;
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint, per_category } => cmd_eval(&cfg, checkpoint.as_ref(), *per_category),
        Command::Infer { input, checkpoint, output } => cmd_infer(&cfg, input, checkpoint.as_ref(), output.as_ref()),
    }
}
