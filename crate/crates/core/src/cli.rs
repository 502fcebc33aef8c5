//! The `cmil` command line: data generation, training, prediction,
//! explanation and evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bagio::{self, read_bag, read_bags, read_concepts, read_split, DatasetSplit, SplitPart};
use crate::error::{Error, Result};
use crate::explain::{
    explain_prediction, render_global_svg, render_local_svg, top_patches_per_concept, ConceptAudit, GlobalOptions,
    GroupBy, ProjectionMethod, SCHEMA_VERSION,
};
use crate::metrics::{evaluate, EvalResult, DEFAULT_JSD_BINS};
use crate::model::{Mode, Prediction};
use crate::projection::project;
use crate::synth::{gen_dataset, SynthConfig, CONCEPTS_FILE, SPLIT_FILE};
use crate::trainer::{load_checkpoint, save_checkpoint, train, write_metrics_line, Preset, TrainConfig};

pub const THREADS_ENV: &str = "CMIL_THREADS";

#[derive(Parser, Debug)]
#[command(name = "cmil", version, about = "Concept-based multiple-instance learning on patch-embedding bags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint; one JSON metrics line per epoch on stdout.
    Train(TrainArgs),
    /// Print the prediction for one bag.
    Predict(PredictArgs),
    /// Write local explanation reports for one bag.
    Explain(ExplainArgs),
    /// Evaluate a checkpoint on a split and write global explanation artifacts.
    Eval(EvalArgs),
    /// Check a dataset split for consistency.
    Validate(ValidateArgs),
    /// List the most activated patches for each concept.
    AuditConcepts(AuditArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON overrides merged over the default synthetic config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON overrides merged over the preset; may carry a "preset" key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also append the metrics lines to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub bag: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub bag: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitPart {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitPart::Train,
            SplitArg::Val => SplitPart::Val,
            SplitArg::Test => SplitPart::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GroupArg {
    Predicted,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProjectionArg {
    Pca,
    Tsne,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Path of the evaluation JSON; global.json and global.svg go beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON overrides merged over the default evaluation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, value_enum)]
    pub group_by: Option<GroupArg>,
    #[arg(long, value_enum)]
    pub projection: Option<ProjectionArg>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    pub bins: usize,
    pub global: GlobalOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            bins: DEFAULT_JSD_BINS,
            global: GlobalOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub train: TrainConfig,
    pub provenance: BTreeMap<String, String>,
    #[serde(flatten)]
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub slide_id: String,
    pub prediction: f64,
    pub decision: String,
}

impl PredictionLine {
    fn new(p: &Prediction) -> Self {
        Self {
            slide_id: p.slide_id.clone(),
            prediction: p.prob,
            decision: crate::explain::class_name(u8::from(p.is_positive())).to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub m: usize,
    pub provenance: BTreeMap<String, String>,
    pub concepts: Vec<ConceptAudit>,
}

/// Recursively overlays `over` onto `base`; objects merge key by key,
/// anything else replaces.
pub fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_config_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `base` with `overrides` merged over it, then deserialized strictly.
pub fn resolve_config<T: Serialize + DeserializeOwned>(base: &T, overrides: Option<Value>) -> Result<T> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    if let Some(o) = overrides {
        if !o.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        merge_json(&mut v, o);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn load_overrides(path: Option<&Path>) -> Result<Option<Value>> {
    path.map(read_config_value).transpose()
}

fn file_digest(h: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
    Ok(())
}

/// SHA-256 over the contents of `paths` in order, each length-prefixed.
pub fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        file_digest(&mut h, p)?;
    }
    Ok(hex::encode(h.finalize()))
}

fn hash_blob_with_sidecar(path: &Path) -> Result<String> {
    hash_files(&[path.to_path_buf(), bagio::sidecar_path(path)])
}

fn part_files(split: &DatasetSplit, part: SplitPart) -> Vec<PathBuf> {
    split
        .part(part)
        .into_iter()
        .flat_map(|p| {
            let side = bagio::sidecar_path(&p);
            [p, side]
        })
        .collect()
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn print_line<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value).expect("line serializes");
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

/// File-name-safe version of a slide id.
pub fn file_stem(slide_id: &str) -> String {
    slide_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Caps the rayon pool from `CMIL_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // a pool already built by an earlier call in the same process is fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Validate(a) => validate_cmd(a),
        Command::AuditConcepts(a) => audit_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: SynthConfig = resolve_config(&SynthConfig::default(), load_overrides(a.config.as_deref())?)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let split = gen_dataset(&cfg, &a.out)?;
    let mut files = vec![a.out.join(SPLIT_FILE), a.out.join(CONCEPTS_FILE)];
    for part in SplitPart::ALL {
        files.extend(part_files(&split, part));
    }
    print_line(&serde_json::json!({
        "bags": split.train.len() + split.val.len() + split.test.len(),
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
        "config": cfg,
        "data_sha256": hash_files(&files)?,
    }))
}

/// Train config from preset, file overrides and flags, in that order.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut overrides = load_overrides(a.config.as_deref())?;
    let mut preset = Preset::Full;
    if let Some(Value::Object(o)) = overrides.as_mut() {
        if let Some(p) = o.remove("preset") {
            let name = p.as_str().ok_or_else(|| Error::Config("preset must be a string".into()))?;
            preset = name.parse()?;
        }
    }
    if let Some(p) = a.preset {
        preset = p;
    }
    let mut cfg = resolve_config(&TrainConfig::preset(preset), overrides)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let split_path = a.data.join(SPLIT_FILE);
    let split = read_split(&split_path)?;
    let concepts_path = a.data.join(CONCEPTS_FILE);
    let train_bags = read_bags(&split.part(SplitPart::Train))?;
    let val_bags = read_bags(&split.part(SplitPart::Val))?;
    let dim = train_bags.first().map(|b| b.dim());
    let concepts = read_concepts(&concepts_path, dim)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("concepts_sha256".to_string(), hash_blob_with_sidecar(&concepts_path)?);
    provenance.insert("split_sha256".to_string(), hash_files(&[split_path])?);
    provenance.insert("train_sha256".to_string(), hash_files(&part_files(&split, SplitPart::Train))?);
    provenance.insert("val_sha256".to_string(), hash_files(&part_files(&split, SplitPart::Val))?);

    let mut log = match &a.log {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let stdout = std::io::stdout();
    let out = train(&cfg, concepts, train_bags, val_bags, |r| {
        write_metrics_line(&mut stdout.lock(), r).map_err(|e| Error::io("<stdout>", e))?;
        if let (Some(f), Some(p)) = (log.as_mut(), a.log.as_ref()) {
            write_metrics_line(f, r).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    })?;
    let mut ck = out.checkpoint;
    ck.provenance = provenance;
    save_checkpoint(&ck, &a.out)
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let bag = read_bag(&a.bag)?;
    print_line(&PredictionLine::new(&ck.model.predict(&bag)?))
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let bag = read_bag(&a.bag)?;
    let pred = ck.model.predict(&bag)?;
    let mut report = explain_prediction(&bag, &ck.model, &pred)?;
    report.provenance.insert("checkpoint_sha256".into(), hash_files(&[a.ckpt.clone()])?);
    report.provenance.insert("bag_sha256".into(), hash_blob_with_sidecar(&a.bag)?);
    let stem = file_stem(&report.slide_id);
    write_json_file(&a.out.join(format!("{stem}.explain.json")), &report)?;
    write_bytes(&a.out.join(format!("{stem}.explain.svg")), render_local_svg(&report).as_bytes())?;
    print_line(&PredictionLine::new(&pred))
}

pub fn resolve_eval_config(a: &EvalArgs) -> Result<EvalConfig> {
    let mut cfg: EvalConfig = resolve_config(&EvalConfig::default(), load_overrides(a.config.as_deref())?)?;
    if let Some(s) = a.split {
        cfg.split = SplitPart::from(s).name().to_string();
    }
    if let Some(g) = a.group_by {
        cfg.global.group_by = match g {
            GroupArg::Predicted => GroupBy::Predicted,
            GroupArg::GroundTruth => GroupBy::GroundTruth,
        };
    }
    if let Some(p) = a.projection {
        cfg.global.projection = match p {
            ProjectionArg::Pca => ProjectionMethod::Pca,
            ProjectionArg::Tsne => ProjectionMethod::Tsne,
        };
    }
    if let Some(b) = a.bins {
        cfg.bins = b;
    }
    if cfg.bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    split_part(&cfg.split)?;
    Ok(cfg)
}

fn split_part(name: &str) -> Result<SplitPart> {
    SplitPart::ALL
        .into_iter()
        .find(|p| p.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown split {name:?}")))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = resolve_eval_config(&a)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let split_path = a.data.join(SPLIT_FILE);
    let split = read_split(&split_path)?;
    let part = split_part(&cfg.split)?;
    let bags = read_bags(&split.part(part))?;
    let ev = evaluate(&ck.model, &bags, cfg.bins, &cfg.global)?;
    for w in &ev.result.warnings {
        eprintln!("warning: {w}");
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("checkpoint_sha256".to_string(), hash_files(&[a.ckpt.clone()])?);
    provenance.insert("split_sha256".to_string(), hash_files(&[split_path])?);
    provenance.insert("bags_sha256".to_string(), hash_files(&part_files(&split, part))?);
    let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(mut g) = ev.global {
        g.provenance = provenance.clone();
        write_json_file(&dir.join("global.json"), &g)?;
        write_bytes(&dir.join("global.svg"), render_global_svg(&g).as_bytes())?;
    }
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        train: ck.train,
        provenance,
        result: ev.result,
    };
    write_json_file(&a.out, &report)
}

fn validate_cmd(a: ValidateArgs) -> Result<()> {
    let split = read_split(&a.data.join(SPLIT_FILE))?;
    print_line(&bagio::validate_dataset(&split)?)
}

fn audit_cmd(a: AuditArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let split_path = a.data.join(SPLIT_FILE);
    let split = read_split(&split_path)?;
    let part = SplitPart::from(a.split);
    let bags = read_bags(&split.part(part))?;
    let slides = bags
        .iter()
        .map(|b| Ok((b.slide_id.clone(), project(&b.embeddings, &ck.model.concepts)?.values)))
        .collect::<Result<Vec<_>>>()?;
    let mut provenance = BTreeMap::new();
    provenance.insert("checkpoint_sha256".to_string(), hash_files(&[a.ckpt.clone()])?);
    provenance.insert("bags_sha256".to_string(), hash_files(&part_files(&split, part))?);
    let report = AuditReport {
        schema_version: SCHEMA_VERSION,
        m: a.m,
        provenance,
        concepts: top_patches_per_concept(&slides, &ck.model.concepts.names, a.m)?,
    };
    match &a.out {
        Some(p) => write_json_file(p, &report),
        None => print_line(&report),
    }
}
