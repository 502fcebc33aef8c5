//! Joint training, the AdamW optimizer and the checkpoint format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, BCE_EPS};
use crate::bagio::{Bag, ConceptSet};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc};
use crate::model::{ConceptMil, ModelConfig, Mode};
use crate::rng::{stream_id, stream_rng};
use crate::tensor::Tensor;
use crate::topk::TopKConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub topk: TopKConfig,
    pub adam: AdamConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            epochs: 300,
            lambda: 0.05,
            seed: 0,
            topk: TopKConfig::default(),
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-scale defaults: 300 epochs, K=20.
    Full,
    /// Full-scale defaults with the lower PANDA learning rate.
    Panda,
    /// Small model and K=10 for synthetic desk-scale runs.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "panda" => Ok(Preset::Panda),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self::default();
        match p {
            Preset::Full => base,
            Preset::Panda => Self {
                learning_rate: 1e-4,
                ..base
            },
            Preset::Desk => Self {
                epochs: 40,
                topk: TopKConfig {
                    k: 10,
                    ..TopKConfig::default()
                },
                model: ModelConfig {
                    hidden_dim: 64,
                    attention_dim: 32,
                    concept_attention_dim: 16,
                    ..ModelConfig::default()
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {x}")))
            }
        };
        positive(self.learning_rate, "learning_rate")?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        positive(self.adam.eps, "adam.eps")?;
        for b in [self.adam.beta1, self.adam.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam beta {b} outside [0, 1)")));
            }
        }
        self.topk.validate()?;
        self.model.validate()
    }
}

/// `−[y·ln p + (1−y)·ln(1−p)]` with `p` clamped to `[1e-7, 1−1e-7]`.
pub fn bce_loss(y: u8, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce_img: f64,
    pub bce_concept: f64,
    pub l2_alpha: f64,
    pub total: f64,
}

pub fn total_loss(y: u8, p_img: f64, p_concept: f64, alpha: &[f64], lambda: f64) -> LossBreakdown {
    let bce_img = bce_loss(y, p_img);
    let bce_concept = bce_loss(y, p_concept);
    let l2_alpha = alpha.iter().map(|a| a * a).sum::<f64>();
    LossBreakdown {
        bce_img,
        bce_concept,
        l2_alpha,
        total: bce_img + bce_concept + lambda * l2_alpha,
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], lr: f64, weight_decay: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            weight_decay,
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `None` gradients leave that parameter (and its moments)
    /// untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.numel() != self.m[i].len() || params[i].numel() != self.m[i].len() {
                    return Err(Error::Shape(format!("parameter {i} changed size")));
                }
                if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient {} at element {j} of parameter {i} (step {})",
                        g.data()[j],
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params[i].data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = beta1 * *m + (1.0 - beta1) * gj;
                *v = beta2 * *v + (1.0 - beta2) * gj * gj;
                let mhat = *m / c1;
                let vhat = *v / c2;
                p[j] = p[j] * decay - self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bce_img: f64,
    pub bce_concept: f64,
    pub l2_alpha: f64,
    pub total: f64,
    pub degenerate_steps: usize,
    pub val_auc: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ConceptMil,
    pub train: TrainConfig,
    pub epoch: usize,
    pub rng_digest: String,
    /// Content hashes of the training inputs.
    pub provenance: BTreeMap<String, String>,
}

/// A bag with its concept activations computed once up front.
pub struct PreparedBag {
    pub bag: Bag,
    pub activations: Tensor,
}

pub fn prepare(model: &ConceptMil, bags: Vec<Bag>) -> Result<Vec<PreparedBag>> {
    bags.into_par_iter()
        .map(|bag| {
            let activations = model.activations(&bag.embeddings)?;
            Ok(PreparedBag { bag, activations })
        })
        .collect()
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut h = Sha256::new();
    h.update(rng.get_seed());
    h.update(rng.get_stream().to_le_bytes());
    h.update(rng.get_word_pos().to_le_bytes());
    hex::encode(h.finalize())
}

/// Validation AUC and accuracy; AUC is `None` when a class is missing.
fn validate_epoch(model: &ConceptMil, val: &[PreparedBag]) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let probs = val
        .par_iter()
        .map(|b| model.predict(&b.bag).map(|p| p.prob))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = val.iter().map(|b| b.bag.label).collect();
    let acc = accuracy(&probs, &labels, 0.5).ok();
    Ok((auc(&probs, &labels).ok(), acc))
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Trains from scratch. `on_epoch` sees each record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    concepts: ConceptSet,
    train_bags: Vec<Bag>,
    val_bags: Vec<Bag>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_bags.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut init_rng = stream_rng(cfg.seed, stream_id(&[10]));
    let mut model = ConceptMil::init(cfg.model.clone(), concepts, cfg.topk.k, &mut init_rng)?;
    let train_set = prepare(&model, train_bags)?;
    let val_set = prepare(&model, val_bags)?;

    let mode = cfg.model.mode;
    let n_image = model.image.named().len();
    let sizes: Vec<usize> = model.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(&sizes, cfg.learning_rate, cfg.weight_decay, cfg.adam.clone());
    let mut order_rng = stream_rng(cfg.seed, stream_id(&[11]));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = LossBreakdown::default();
        let mut degenerate_steps = 0;
        for (step, &bi) in order.iter().enumerate() {
            let item = &train_set[bi];
            let selector = if mode == Mode::Joint {
                let alpha = model.image.forward(&item.bag.embeddings)?.alpha;
                let mut noise_rng =
                    stream_rng(cfg.seed, stream_id(&[12, cfg.topk.seed, epoch as u64, step as u64]));
                Some(model.draw_selector(&alpha, &cfg.topk, &mut noise_rng)?)
            } else {
                None
            };
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let graph = model.build_loss(
                &mut tape,
                &vars,
                &item.bag.embeddings,
                &item.activations,
                item.bag.label,
                cfg.lambda,
                selector.as_ref(),
            )?;
            let total = tape.value(graph.loss).item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {total} at epoch {epoch} on {} (last good epoch {})",
                    item.bag.slide_id,
                    epoch - 1
                )));
            }
            let read = |v: Option<crate::autodiff::Var>| v.map_or(0.0, |v| tape.value(v).item());
            sum.bce_img += read(graph.bce_img);
            sum.bce_concept += read(graph.bce_concept);
            sum.l2_alpha += read(graph.l2_alpha);
            sum.total += total;
            degenerate_steps += usize::from(graph.degenerate);

            let grads = tape.backward(graph.loss)?;
            let all = vars.all();
            let active: Vec<Option<&Tensor>> = all
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let trains = if i < n_image { mode.uses_image() } else { mode.uses_concept() };
                    if trains {
                        grads.get(v)
                    } else {
                        None
                    }
                })
                .collect();
            opt.step(&mut model.tensors_mut(), &active).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "{m} at epoch {epoch} (last good epoch {})",
                    epoch - 1
                )),
                other => other,
            })?;
        }
        let n = train_set.len() as f64;
        let (val_auc, val_accuracy) = validate_epoch(&model, &val_set)?;
        let record = EpochRecord {
            epoch,
            bce_img: sum.bce_img / n,
            bce_concept: sum.bce_concept / n,
            l2_alpha: sum.l2_alpha / n,
            total: sum.total / n,
            degenerate_steps,
            val_auc,
            val_accuracy,
        };
        on_epoch(&record)?;
        log.push(record);
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            model,
            train: cfg.clone(),
            epoch: cfg.epochs,
            rng_digest: rng_digest(&order_rng),
            provenance: BTreeMap::new(),
        },
        log,
    })
}

pub fn write_metrics_line(out: &mut impl Write, record: &EpochRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    train: TrainConfig,
    epoch: usize,
    rng_digest: String,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
    concept_names: Vec<String>,
    prompt_template: String,
    embed_dim: usize,
    tensors: Vec<TensorEntry>,
}

const CONCEPT_EMBEDDINGS: &str = "concepts.embeddings";

/// `CMCK`, u32 version, u64 header length, JSON header, then f64 LE blobs.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let model = &ck.model;
    let mut tensors: Vec<(&str, &Tensor)> = vec![(CONCEPT_EMBEDDINGS, &model.concepts.embeddings)];
    tensors.extend(model.named());
    let header = CheckpointHeader {
        train: ck.train.clone(),
        epoch: ck.epoch,
        rng_digest: ck.rng_digest.clone(),
        provenance: ck.provenance.clone(),
        concept_names: model.concepts.names.clone(),
        prompt_template: model.concepts.prompt_template.clone(),
        embed_dim: model.input_dim(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |r: String| Error::format(path, r);
    if bytes.len() < 16 {
        return Err(bad(format!("{} bytes is too short for a checkpoint", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    if hlen > body.len() as u64 {
        return Err(bad(format!("header length {hlen} exceeds file size")));
    }
    let (json, mut blob) = body.split_at(hlen as usize);
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| bad(format!("invalid header: {e}")))?;
    header.train.validate().map_err(|e| bad(e.to_string()))?;

    let mut expected: u64 = 0;
    for t in &header.tensors {
        let n = t
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad(format!("tensor {} is too large", t.name)))?;
        expected = expected
            .checked_add(n)
            .ok_or_else(|| bad("tensor sizes overflow".into()))?;
    }
    if expected != blob.len() as u64 {
        return Err(bad(format!(
            "payload has {} bytes, header declares {expected}",
            blob.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let (chunk, rest) = blob.split_at(n * 8);
        blob = rest;
        let data: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("tensor {} contains non-finite values", t.name)));
        }
        tensors.push((t.name.as_str(), Tensor::new(t.shape.clone(), data).map_err(|e| bad(e.to_string()))?));
    }

    let cfg = &header.train;
    let concept_embeddings = match tensors.first() {
        Some((name, t)) if *name == CONCEPT_EMBEDDINGS => t.clone(),
        _ => return Err(bad("missing concept embeddings".into())),
    };
    let concepts = ConceptSet::new(
        header.concept_names.clone(),
        concept_embeddings,
        header.prompt_template.clone(),
    )
    .map_err(|e| bad(e.to_string()))?;
    if concepts.dim() != header.embed_dim {
        return Err(bad("concept dimension disagrees with header".into()));
    }
    // a template model fixes the expected names and shapes
    let mut rng = stream_rng(0, 0);
    let mut model = ConceptMil::init(cfg.model.clone(), concepts, cfg.topk.k, &mut rng)
        .map_err(|e| bad(e.to_string()))?;
    let names: Vec<&str> = model.named().iter().map(|(n, _)| *n).collect();
    let loaded = &tensors[1..];
    if loaded.len() != names.len() {
        return Err(bad(format!("expected {} parameter tensors, found {}", names.len(), loaded.len())));
    }
    for ((slot, name), (got_name, got)) in model.tensors_mut().into_iter().zip(names).zip(loaded) {
        if name != *got_name || slot.shape() != got.shape() {
            return Err(bad(format!(
                "parameter {got_name} {:?} does not match expected {name} {:?}",
                got.shape(),
                slot.shape()
            )));
        }
        *slot = got.clone();
    }
    model.concept.gamma = cfg.model.gamma;
    model.concept.temperature = cfg.model.temperature;
    Ok(Checkpoint {
        model,
        train: header.train,
        epoch: header.epoch,
        rng_digest: header.rng_digest,
        provenance: header.provenance,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
