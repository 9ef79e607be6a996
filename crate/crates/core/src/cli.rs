//! Command-line entry point. Every subcommand resolves a [`RunConfig`] from
//! `--config` (the bundled toy config when absent), `VTBR_*` environment
//! overrides and the `--out`/`--seed` flags, in that order of precedence.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 when a stage fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Lineage, RunConfig};
use crate::error::{Error, Result};
use crate::pipeline::{
    eval_stage, export_saliency, finetune_stage, gen_captions, load_caption_model, load_reid_model, pretrain_stage,
    run_pipeline, save_eval_report, save_finetune, synth_data, DomainData, InitSource, RunDir,
};

#[derive(Debug, Parser)]
#[command(
    name = "vtbr",
    version,
    about = "Caption pretraining and re-identification on synthetic pedestrians"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; the bundled toy config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate attribute records, caption corpora and the vocabulary.
    GenCaptions(Common),
    /// Split identities and render every image of a run directory.
    SynthData(Common),
    /// Train the caption model on the pretraining images.
    Pretrain(Common),
    /// Fine-tune a backbone for retrieval on a split's training images.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// A checkpoint path, or `random`.
        #[arg(long)]
        init: String,
        /// Split manifest of the training domain.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a fine-tuned checkpoint on one or more splits.
    Eval {
        /// Fine-tuned checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Split manifest of the training domain.
        #[arg(long)]
        data: PathBuf,
        /// Further split manifests evaluated by direct transfer.
        #[arg(long = "cross-domain")]
        cross_domain: Vec<PathBuf>,
        /// Comma-separated identities whose first query image gets a saliency map.
        #[arg(long, value_delimiter = ',', requires = "caption_model")]
        saliency: Vec<u64>,
        /// Pretraining checkpoint used for saliency maps.
        #[arg(long = "caption-model")]
        caption_model: Option<PathBuf>,
        /// Directory for reports and maps.
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Export caption saliency maps.
    Saliency {
        /// Pretraining checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Split manifest.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated identities.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
        /// Target the value phrase of this attribute category instead of the
        /// whole caption.
        #[arg(long)]
        attribute: Option<String>,
        #[arg(long, default_value = "saliency")]
        out: PathBuf,
    },
    /// Run every stage into a fresh run directory.
    Pipeline(Common),
}

/// Loads the configuration and applies environment and flag overrides.
pub fn resolve_config(
    path: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    config.apply_env(env)?;
    if let Some(out) = out {
        config.out = out.to_path_buf();
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.propagate_seed();
    config.validate()?;
    Ok(config)
}

fn common_config(c: &Common) -> Result<RunConfig> {
    resolve_config(c.config.as_deref(), c.out.as_deref(), c.seed, std::env::vars())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCaptions(c) => {
            let config = common_config(&c).map_err(|e| e.in_stage("config"))?;
            let run = RunDir::create(&config.out).map_err(|e| e.in_stage("gen-captions"))?;
            let report = gen_captions(&config, &run).map_err(|e| e.in_stage("gen-captions"))?;
            print_json(&report)
        }
        Command::SynthData(c) => {
            let config = common_config(&c).map_err(|e| e.in_stage("config"))?;
            let run = RunDir::create(&config.out).map_err(|e| e.in_stage("synth-data"))?;
            let manifests = synth_data(&config, &run).map_err(|e| e.in_stage("synth-data"))?;
            for m in &manifests {
                println!("{}", run.manifest(&m.domain).display());
            }
            Ok(())
        }
        Command::Pretrain(c) => {
            let config = common_config(&c).map_err(|e| e.in_stage("config"))?;
            let run = RunDir::create(&config.out).map_err(|e| e.in_stage("pretrain"))?;
            let (_, report) = pretrain_stage(&config, &run).map_err(|e| e.in_stage("pretrain"))?;
            print_json(&report)
        }
        Command::Finetune { common, init, data } => {
            let config = common_config(&common).map_err(|e| e.in_stage("config"))?;
            (|| {
                let data = DomainData::load(&data)?;
                let outcome = finetune_stage(&config, &InitSource::parse(&init), &data)?;
                std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
                let ckpt = config.out.join("finetune.ckpt");
                save_finetune(
                    &config,
                    &outcome,
                    data.domain(),
                    &ckpt,
                    &config.out.join("finetune.jsonl"),
                )?;
                println!("{}", ckpt.display());
                Ok(())
            })()
            .map_err(|e: Error| e.in_stage("finetune"))
        }
        Command::Eval {
            model,
            data,
            cross_domain,
            saliency,
            caption_model,
            out,
        } => (|| {
            let (reid, meta) = load_reid_model(&model)?;
            let train = DomainData::load(&data)?;
            let mut domains = vec![train];
            for path in &cross_domain {
                domains.push(DomainData::load(path)?);
            }
            let init = meta.extra["init"].as_str().unwrap_or("unknown").to_string();
            let train_domain = domains[0].domain().to_string();
            let lineage = Lineage {
                config_hash: meta.config_hash.clone(),
                seed: meta.seed,
                stage: "eval".into(),
            };
            let reports = eval_stage(&reid, &train_domain, &init, &domains, &lineage)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for r in &reports {
                let path = out.join(format!(
                    "eval_{}_{}.json",
                    r.protocol.train_domain, r.protocol.test_domain
                ));
                save_eval_report(&path, r)?;
            }
            if let Some(caption_model) = caption_model.filter(|_| !saliency.is_empty()) {
                let (cm, vocab) = load_caption_model(&caption_model)?;
                let lineage = Lineage {
                    stage: "saliency".into(),
                    ..lineage
                };
                export_saliency(
                    &cm,
                    &vocab,
                    &domains[0],
                    &saliency,
                    None,
                    &out.join("saliency"),
                    &lineage,
                )?;
            }
            print_json(&reports)
        })()
        .map_err(|e: Error| e.in_stage("eval")),
        Command::Saliency {
            model,
            data,
            ids,
            attribute,
            out,
        } => (|| {
            let (cm, vocab) = load_caption_model(&model)?;
            let (_, meta) = crate::checkpoint::load_checkpoint(&model)?;
            let data = DomainData::load(&data)?;
            let lineage = Lineage {
                config_hash: meta.config_hash,
                seed: meta.seed,
                stage: "saliency".into(),
            };
            let entries = export_saliency(&cm, &vocab, &data, &ids, attribute.as_deref(), &out, &lineage)?;
            print_json(&entries)
        })()
        .map_err(|e: Error| e.in_stage("saliency")),
        Command::Pipeline(c) => {
            let config = common_config(&c).map_err(|e| e.in_stage("config"))?;
            let outcome = run_pipeline(&config)?;
            println!("run directory: {}", outcome.run.root.display());
            if let Some(ppl) = outcome.pretrain.holdout_perplexity {
                println!("held-out caption perplexity: {ppl:.3}");
            }
            for r in &outcome.reports {
                println!(
                    "{} -> {}: mAP {:.2}  rank-1 {:.2}  rank-5 {:.2}  (random mAP {:.2})",
                    r.protocol.train_domain,
                    r.protocol.test_domain,
                    100.0 * r.map,
                    100.0 * r.cmc[&1],
                    100.0 * r.cmc[&5],
                    100.0 * r.random_map
                );
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
