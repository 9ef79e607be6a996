//! End-to-end stages over a run directory: caption corpus generation, image
//! synthesis, caption pretraining, retrieval fine-tuning, evaluation and
//! saliency export.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json                 effective configuration
//! captions/                   schema, annotations, corpora, vocabulary
//! images/<domain>/            rendered images and the split manifest
//! ckpt/                       pretrain.ckpt, finetune.ckpt
//! reports/                    caption, pretraining and evaluation reports, saliency maps
//! logs/                       per-step training metrics (JSON Lines)
//! ```
//!
//! Files whose format has no room for lineage get a `.lineage.json` sidecar.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{attribute_frequencies, load_annotations, save_annotations, AttributeRecord, AttributeSchema};
use crate::captions::{build_vocabulary, generate_corpus, load_corpus, rs_select, save_corpus, Caption, Vocabulary};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{Lineage, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{cross_domain_eval, EvalReport, EvalSet, ImageMeta};
use crate::finetune::{class_map, run_finetune, FinetuneLogLine, InitKind, ReidModel, ReidSample};
use crate::model::CaptionModel;
use crate::pretrain::{run_pretraining, CaptionPair};
use crate::saliency::{saliency_map, saliency_map_for, SaliencyMap};
use crate::scene::{make_split, render_image, ImageRef, ImageTensor, SplitManifest};
use crate::toy::generate_population;

const CAPTION_INDEX: &str = "index.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_jsonl<T: Serialize>(path: &Path, lines: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut buf, line)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the directory skeleton under `root`.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        for dir in ["captions", "images", "ckpt", "reports", "logs"] {
            create_dir(&run.root.join(dir))?;
        }
        Ok(run)
    }

    pub fn captions(&self) -> PathBuf {
        self.root.join("captions")
    }

    pub fn images(&self, domain: &str) -> PathBuf {
        self.root.join("images").join(domain)
    }

    pub fn manifest(&self, domain: &str) -> PathBuf {
        self.images(domain).join("manifest.json")
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(name)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// Domains listed by the caption stage, in generation order.
    pub fn domains(&self) -> Result<Vec<String>> {
        Ok(read_json::<CaptionIndex>(&self.captions().join(CAPTION_INDEX))?.domains)
    }
}

/// Attribute records per domain, from annotation files or the toy generator.
pub fn load_population(config: &RunConfig, schema: &AttributeSchema) -> Result<Vec<(String, Vec<AttributeRecord>)>> {
    if config.data.annotations.is_empty() {
        return generate_population(schema, &config.data.population, config.seed);
    }
    config
        .data
        .annotations
        .iter()
        .map(|(domain, path)| Ok((domain.clone(), load_annotations(path, schema)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaptionIndex {
    domains: Vec<String>,
}

/// Caption counts of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCaptionStats {
    pub records: usize,
    /// Records left after keeping one per distinct (identity, caption).
    pub selected: usize,
    pub distinct_captions: usize,
    pub mean_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub alpha: f64,
    pub vocab_size: usize,
    pub domains: BTreeMap<String, DomainCaptionStats>,
    pub lineage: Lineage,
}

/// Writes the schema, annotations, one caption corpus per domain, the
/// frequency table and the vocabulary under `captions/`.
pub fn gen_captions(config: &RunConfig, run: &RunDir) -> Result<CaptionReport> {
    let lineage = config.lineage("gen-captions");
    let schema = config.schema()?;
    let template = config.template()?;
    template.validate(&schema)?;
    let rs = config.rs()?;
    let population = load_population(config, &schema)?;
    let all: Vec<AttributeRecord> = population.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let freq = attribute_frequencies(&all, &schema, config.captions.scene_unit)?;

    let dir = run.captions();
    create_dir(&dir)?;
    schema.save(&dir.join("schema.json"))?;
    write_json(&dir.join("frequencies.json"), &freq)?;

    let mut corpora = Vec::new();
    let mut domains = BTreeMap::new();
    for (domain, records) in &population {
        let captions = generate_corpus(records, &template, &freq, rs)?;
        let selected = rs_select(records, &captions)?.len();
        let distinct: std::collections::BTreeSet<&[String]> = captions.iter().map(|c| c.tokens()).collect();
        let mean_tokens = captions.iter().map(|c| c.len() as f64).sum::<f64>() / captions.len().max(1) as f64;
        domains.insert(
            domain.clone(),
            DomainCaptionStats {
                records: records.len(),
                selected,
                distinct_captions: distinct.len(),
                mean_tokens,
            },
        );
        let ann = dir.join(format!("{domain}.annotations.jsonl"));
        save_annotations(&ann, records)?;
        lineage.write_sidecar(&ann)?;
        let corpus = dir.join(format!("{domain}.jsonl"));
        save_corpus(&corpus, records, &captions)?;
        lineage.write_sidecar(&corpus)?;
        log::info!(
            "domain {domain}: {} records, {selected} after caption dedup",
            records.len()
        );
        corpora.extend(captions);
    }
    let vocab = build_vocabulary(&corpora, config.captions.min_token_freq)?;
    let vocab_path = dir.join("vocab.json");
    vocab.save(&vocab_path)?;
    lineage.write_sidecar(&vocab_path)?;
    write_json(
        &dir.join(CAPTION_INDEX),
        &CaptionIndex {
            domains: population.iter().map(|(d, _)| d.clone()).collect(),
        },
    )?;
    let report = CaptionReport {
        alpha: config.captions.alpha,
        vocab_size: vocab.len(),
        domains,
        lineage,
    };
    create_dir(&run.reports())?;
    write_json(&run.reports().join("captions.json"), &report)?;
    Ok(report)
}

/// Splits every domain, renders all its images and writes
/// `images/<domain>/manifest.json`.
pub fn synth_data(config: &RunConfig, run: &RunDir) -> Result<Vec<SplitManifest>> {
    let lineage = config.lineage("synth-data").to_value();
    let captions = run.captions();
    let schema = AttributeSchema::load(&captions.join("schema.json"))?;
    let mut manifests = Vec::new();
    for domain in run.domains()? {
        let records = load_annotations(&captions.join(format!("{domain}.annotations.jsonl")), &schema)?;
        let mut manifest = make_split(&records, &config.split, config.seed, &domain)?;
        manifest.annotations = format!("../../captions/{domain}.annotations.jsonl");
        manifest.captions = format!("../../captions/{domain}.jsonl");
        manifest.schema = "../../captions/schema.json".into();
        manifest.images = ".".into();
        manifest.lineage = Some(lineage.clone());
        let dir = run.images(&domain);
        create_dir(&dir)?;
        for r in manifest.all_refs() {
            let image = render_image(
                &records[r.record],
                r.render_seed(manifest.seed),
                &schema,
                &config.render,
            )?;
            image.save(&dir.join(r.file_name()), Some(&lineage))?;
        }
        manifest.save(&run.manifest(&domain))?;
        log::info!(
            "domain {domain}: {} pretrain, {} train, {} query, {} gallery images",
            manifest.pretrain.len(),
            manifest.train.len(),
            manifest.query.len(),
            manifest.gallery.len()
        );
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// A split manifest with its records, captions and image directory resolved.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub manifest: SplitManifest,
    pub schema: AttributeSchema,
    pub records: Vec<AttributeRecord>,
    /// Caption of every record, aligned with `records`.
    pub captions: Vec<Caption>,
    pub image_dir: PathBuf,
}

impl DomainData {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = SplitManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let schema = AttributeSchema::load(&base.join(&manifest.schema))?;
        let records = load_annotations(&base.join(&manifest.annotations), &schema)?;
        let lines = load_corpus(&base.join(&manifest.captions))?;
        let by_record: HashMap<(u64, u64), &str> = lines.iter().map(|l| ((l.id, l.cam), l.caption.as_str())).collect();
        let captions = records
            .iter()
            .map(|r| {
                let text = by_record.get(&(r.identity_id, r.camera_id)).ok_or_else(|| {
                    Error::Caption(format!(
                        "no caption for identity {} camera {}",
                        r.identity_id, r.camera_id
                    ))
                })?;
                Caption::from_text(text, r.identity_id)
            })
            .collect::<Result<Vec<_>>>()?;
        let image_dir = base.join(&manifest.images);
        Ok(Self {
            manifest,
            schema,
            records,
            captions,
            image_dir,
        })
    }

    pub fn domain(&self) -> &str {
        &self.manifest.domain
    }

    pub fn image(&self, r: &ImageRef) -> Result<ImageTensor> {
        ImageTensor::load(&self.image_dir.join(r.file_name()))
    }

    pub fn meta(&self, r: &ImageRef) -> ImageMeta {
        let rec = &self.records[r.record];
        ImageMeta {
            identity: rec.identity_id,
            camera: rec.camera_id,
        }
    }

    fn labelled(&self, refs: &[ImageRef]) -> Result<Vec<(crate::tape::Mat, ImageMeta)>> {
        refs.iter()
            .map(|r| Ok((self.image(r)?.to_mat(), self.meta(r))))
            .collect()
    }

    pub fn eval_set(&self) -> Result<EvalSet> {
        Ok(EvalSet {
            domain: self.manifest.domain.clone(),
            query: self.labelled(&self.manifest.query)?,
            gallery: self.labelled(&self.manifest.gallery)?,
        })
    }

    pub fn train_samples(&self) -> Result<Vec<ReidSample>> {
        Ok(self
            .labelled(&self.manifest.train)?
            .into_iter()
            .map(|(image, meta)| ReidSample {
                image,
                identity: meta.identity,
            })
            .collect())
    }

    /// Caption pairs of the pretraining identities (the training identities
    /// when the split reserves none), optionally one record per distinct
    /// (identity, caption).
    pub fn caption_pairs(&self, vocab: &Vocabulary, dedup: bool) -> Result<Vec<CaptionPair>> {
        let refs = if self.manifest.pretrain.is_empty() {
            &self.manifest.train
        } else {
            &self.manifest.pretrain
        };
        let keep: Vec<bool> = if dedup {
            let mut keep = vec![false; self.records.len()];
            for i in rs_select(&self.records, &self.captions)? {
                keep[i] = true;
            }
            keep
        } else {
            vec![true; self.records.len()]
        };
        refs.iter()
            .filter(|r| keep[r.record])
            .map(|r| {
                Ok(CaptionPair {
                    image: self.image(r)?.to_mat(),
                    tokens: vocab.encode(&self.captions[r.record]),
                })
            })
            .collect()
    }
}

/// Loads the manifests of every domain in a run directory.
pub fn load_domains(run: &RunDir) -> Result<Vec<DomainData>> {
    run.domains()?
        .iter()
        .map(|d| DomainData::load(&run.manifest(d)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub pairs: usize,
    pub holdout_pairs: usize,
    pub vocab_size: usize,
    pub steps: usize,
    /// Held-out caption perplexity after the last step.
    pub holdout_perplexity: Option<f64>,
    pub lineage: Lineage,
}

/// Vocabulary stored with a pretraining checkpoint.
pub fn checkpoint_vocabulary(meta: &CheckpointMeta) -> Result<Vocabulary> {
    let tokens: Vec<String> = serde_json::from_value(meta.extra["vocabulary"].clone())
        .map_err(|e| Error::Caption(format!("checkpoint carries no vocabulary: {e}")))?;
    Vocabulary::from_tokens(tokens)
}

/// Caption model and vocabulary of a pretraining checkpoint.
pub fn load_caption_model(path: &Path) -> Result<(CaptionModel, Vocabulary)> {
    let (params, meta) = load_checkpoint(path)?;
    let vocab = checkpoint_vocabulary(&meta)?;
    Ok((CaptionModel::from_params(meta.model, &params)?, vocab))
}

/// Trains the caption model on every domain's pretraining images and writes
/// `ckpt/pretrain.ckpt`, `logs/pretrain.jsonl` and `reports/pretrain.json`.
pub fn pretrain_stage(config: &RunConfig, run: &RunDir) -> Result<(CaptionModel, PretrainReport)> {
    let lineage = config.lineage("pretrain");
    let vocab = Vocabulary::load(&run.captions().join("vocab.json"))?;
    let mut pairs = Vec::new();
    for data in load_domains(run)? {
        pairs.extend(data.caption_pairs(&vocab, config.captions.rs_select)?);
    }
    let mut model_config = config.model.clone();
    model_config.vocab_size = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7072_6574);
    let mut model = CaptionModel::new(model_config.clone(), &mut rng)?;
    log::info!(
        "pretraining on {} caption pairs, vocabulary {}",
        pairs.len(),
        vocab.len()
    );
    let outcome = run_pretraining(&config.pretrain, &mut model, &pairs)?;

    let log_path = run.logs().join("pretrain.jsonl");
    write_jsonl(&log_path, &outcome.log)?;
    lineage.write_sidecar(&log_path)?;
    let meta = CheckpointMeta {
        stage: "pretrain".into(),
        step: config.pretrain.total_steps,
        seed: config.seed,
        config_hash: lineage.config_hash.clone(),
        model: model_config,
        extra: serde_json::json!({
            "vocabulary": vocab.tokens(),
            "pairs": pairs.len(),
        }),
    };
    save_checkpoint(&model.params, &meta, &run.ckpt("pretrain.ckpt"))?;
    let report = PretrainReport {
        pairs: pairs.len(),
        holdout_pairs: outcome.holdout.len(),
        vocab_size: vocab.len(),
        steps: config.pretrain.total_steps,
        holdout_perplexity: outcome.holdout_perplexity,
        lineage,
    };
    write_json(&run.reports().join("pretrain.json"), &report)?;
    Ok((model, report))
}

/// Where the fine-tuned backbone starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitSource {
    Checkpoint(PathBuf),
    Random,
}

impl InitSource {
    /// `random` or a checkpoint path.
    pub fn parse(text: &str) -> Self {
        if text == "random" {
            InitSource::Random
        } else {
            InitSource::Checkpoint(PathBuf::from(text))
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            InitSource::Checkpoint(_) => "vtbr",
            InitSource::Random => "random",
        }
    }
}

/// Fine-tuned model with its per-step log.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: ReidModel,
    pub log: Vec<FinetuneLogLine>,
    pub init: &'static str,
}

/// Fine-tunes on the training split of `data`. The classifier head is always
/// fresh; the backbone comes from `init`.
pub fn finetune_stage(config: &RunConfig, init: &InitSource, data: &DomainData) -> Result<FinetuneOutcome> {
    let samples = data.train_samples()?;
    let classes = class_map(&samples).len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6669_6e65);
    let mut finetune = config.finetune.clone();
    let mut model = match init {
        InitSource::Checkpoint(path) => {
            let (params, meta) = load_checkpoint(path)?;
            if finetune.init == InitKind::Random {
                finetune.init = InitKind::VtbrCheckpoint;
            }
            let mut model = ReidModel::new(meta.model, classes, &mut rng)?;
            model.load_backbone(&params)?;
            model
        }
        InitSource::Random => {
            finetune.init = InitKind::Random;
            ReidModel::new(config.model.clone(), classes, &mut rng)?
        }
    };
    log::info!(
        "fine-tuning {} backbone on {} images of {classes} identities",
        init.label(),
        samples.len()
    );
    let log = run_finetune(&finetune, &mut model, &samples)?;
    Ok(FinetuneOutcome {
        model,
        log,
        init: init.label(),
    })
}

/// Writes the fine-tuned checkpoint and its metrics log.
pub fn save_finetune(
    config: &RunConfig,
    outcome: &FinetuneOutcome,
    train_domain: &str,
    ckpt: &Path,
    log_path: &Path,
) -> Result<()> {
    let lineage = config.lineage("finetune");
    write_jsonl(log_path, &outcome.log)?;
    lineage.write_sidecar(log_path)?;
    let meta = CheckpointMeta {
        stage: "finetune".into(),
        step: outcome.log.len(),
        seed: config.seed,
        config_hash: lineage.config_hash,
        model: outcome.model.config.clone(),
        extra: serde_json::json!({
            "init": outcome.init,
            "train_domain": train_domain,
            "classes": outcome.model.classes(),
        }),
    };
    save_checkpoint(&outcome.model.params, &meta, ckpt)
}

/// Loads a fine-tuned (or any backbone-bearing) checkpoint for evaluation.
pub fn load_reid_model(path: &Path) -> Result<(ReidModel, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    Ok((ReidModel::from_params(meta.model.clone(), &params)?, meta))
}

/// Evaluates `model` on every domain in `domains`; the report of the
/// training domain is the in-domain one.
pub fn eval_stage(
    model: &ReidModel,
    train_domain: &str,
    init: &str,
    domains: &[DomainData],
    lineage: &Lineage,
) -> Result<Vec<EvalReport>> {
    let lineage = lineage.to_value();
    domains
        .iter()
        .map(|d| {
            let mut report = cross_domain_eval(model, train_domain, &d.eval_set()?, init)?;
            report.lineage = Some(lineage.clone());
            Ok(report)
        })
        .collect()
}

pub fn eval_report_path(run: &RunDir, report: &EvalReport) -> PathBuf {
    run.reports().join(format!(
        "eval_{}_{}.json",
        report.protocol.train_domain, report.protocol.test_domain
    ))
}

pub fn save_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(path, report)
}

/// One exported saliency map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyEntry {
    pub file: String,
    pub domain: String,
    pub identity: u64,
    pub camera: u64,
    pub caption: String,
    /// Attribute category whose value phrase is the target; the whole
    /// caption when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

/// Token positions (into `tokens`) of the first occurrence of `phrase`.
pub fn phrase_positions(tokens: &[usize], phrase: &[usize]) -> Option<Vec<usize>> {
    if phrase.is_empty() {
        return None;
    }
    (1..tokens.len())
        .find(|&i| tokens[i..].starts_with(phrase))
        .map(|start| (start..start + phrase.len()).collect())
}

/// Saliency of `image` for the caption of `record`, or for the value phrase
/// of one attribute category within it.
pub fn record_saliency(
    model: &CaptionModel,
    vocab: &Vocabulary,
    record: &AttributeRecord,
    caption: &Caption,
    image: &ImageTensor,
    attribute: Option<&str>,
) -> Result<SaliencyMap> {
    let tokens = vocab.encode(caption);
    match attribute {
        None => saliency_map(model, image, &tokens),
        Some(category) => {
            let value = record
                .value(category)
                .ok_or_else(|| Error::Range(format!("record has no attribute `{category}`")))?;
            let positions = phrase_positions(&tokens, &vocab.encode_phrase(value))
                .ok_or_else(|| Error::Range(format!("caption does not mention `{value}` ({category})")))?;
            saliency_map_for(model, image, &tokens, &positions)
        }
    }
}

/// Writes maps for the first query image of each identity in `identities`
/// into `dir`, plus an `index.json`.
pub fn export_saliency(
    model: &CaptionModel,
    vocab: &Vocabulary,
    data: &DomainData,
    identities: &[u64],
    attribute: Option<&str>,
    dir: &Path,
    lineage: &Lineage,
) -> Result<Vec<SaliencyEntry>> {
    create_dir(dir)?;
    let mut entries = Vec::new();
    for &id in identities {
        let r = data
            .manifest
            .query
            .iter()
            .chain(data.manifest.all_refs())
            .find(|r| data.records[r.record].identity_id == id)
            .ok_or_else(|| Error::Range(format!("identity {id} has no image in {}", data.domain())))?;
        let record = &data.records[r.record];
        let caption = &data.captions[r.record];
        let map = record_saliency(model, vocab, record, caption, &data.image(r)?, attribute)?;
        let stem = match attribute {
            Some(a) => format!("{}_id{id}_c{}_s{}_{a}", data.domain(), record.camera_id, r.seed),
            None => format!("{}_id{id}_c{}_s{}", data.domain(), record.camera_id, r.seed),
        };
        map.save(dir, &stem)?;
        entries.push(SaliencyEntry {
            file: format!("{stem}.pgm"),
            domain: data.domain().to_string(),
            identity: id,
            camera: record.camera_id,
            caption: caption.text(),
            attribute: attribute.map(str::to_string),
        });
    }
    write_json(
        &dir.join("index.json"),
        &serde_json::json!({ "maps": entries, "lineage": lineage }),
    )?;
    Ok(entries)
}

/// Everything a full pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub run: RunDir,
    pub captions: CaptionReport,
    pub pretrain: PretrainReport,
    pub finetune: FinetuneOutcome,
    pub reports: Vec<EvalReport>,
    pub saliency: Vec<SaliencyEntry>,
}

/// Runs every stage in order into `config.out`. Errors carry the stage name.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let run = RunDir::create(&config.out).map_err(|e| e.in_stage("setup"))?;
    write_json(&run.root.join("config.json"), config).map_err(|e| e.in_stage("setup"))?;

    let captions = gen_captions(config, &run).map_err(|e| e.in_stage("gen-captions"))?;
    synth_data(config, &run).map_err(|e| e.in_stage("synth-data"))?;
    let (caption_model, pretrain) = pretrain_stage(config, &run).map_err(|e| e.in_stage("pretrain"))?;

    let domains = load_domains(&run).map_err(|e| e.in_stage("finetune"))?;
    let train_domain = config
        .eval
        .train_domain
        .clone()
        .or_else(|| domains.first().map(|d| d.domain().to_string()))
        .ok_or_else(|| Error::EmptyInput("no domains").in_stage("finetune"))?;
    let train = domains.iter().find(|d| d.domain() == train_domain).ok_or_else(|| {
        Error::config("eval.train_domain", format!("no domain `{train_domain}`")).in_stage("finetune")
    })?;
    let init = match config.finetune.init {
        InitKind::Random => InitSource::Random,
        InitKind::VtbrCheckpoint | InitKind::External => InitSource::Checkpoint(run.ckpt("pretrain.ckpt")),
    };
    let finetune = (|| {
        let outcome = finetune_stage(config, &init, train)?;
        save_finetune(
            config,
            &outcome,
            &train_domain,
            &run.ckpt("finetune.ckpt"),
            &run.logs().join("finetune.jsonl"),
        )?;
        Ok(outcome)
    })()
    .map_err(|e: Error| e.in_stage("finetune"))?;

    let reports = (|| {
        let reports = eval_stage(
            &finetune.model,
            &train_domain,
            finetune.init,
            &domains,
            &config.lineage("eval"),
        )?;
        for r in &reports {
            save_eval_report(&eval_report_path(&run, r), r)?;
        }
        Ok(reports)
    })()
    .map_err(|e: Error| e.in_stage("eval"))?;

    let saliency = (|| {
        let vocab = Vocabulary::load(&run.captions().join("vocab.json"))?;
        let mut ids: Vec<u64> = train
            .manifest
            .query
            .iter()
            .map(|r| train.records[r.record].identity_id)
            .collect();
        ids.dedup();
        ids.truncate(config.eval.saliency_images);
        export_saliency(
            &caption_model,
            &vocab,
            train,
            &ids,
            None,
            &run.reports().join("saliency"),
            &config.lineage("saliency"),
        )
    })()
    .map_err(|e: Error| e.in_stage("saliency"))?;

    Ok(PipelineOutcome {
        run,
        captions,
        pretrain,
        finetune,
        reports,
        saliency,
    })
}
