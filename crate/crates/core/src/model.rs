//! The dual-branch model: image branch, attention-guided top-K and concept
//! branch wired together, plus the training loss and inference path.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bagio::{Bag, ConceptSet};
use crate::concept_branch::{
    concept_contributions, ConceptBranchParams, ConceptForward, ConceptVars, Contributions,
};
use crate::error::{Error, Result};
use crate::image_branch::{ImageBranchParams, ImageVars};
use crate::projection::project;
use crate::tensor::Tensor;
use crate::topk::{hard_topk, perturbed_topk_on_tape, sample_perturbations, PerturbedSamples, TopKConfig};

/// Which branches are trained and which one answers at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Joint,
    /// Image branch alone (plain attention MIL).
    ImageOnly,
    /// Concept branch on a hard top-K from uniform attention.
    ConceptOnly,
}

impl Mode {
    pub fn uses_image(self) -> bool {
        self != Mode::ConceptOnly
    }

    pub fn uses_concept(self) -> bool {
        self != Mode::ImageOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::ImageOnly => "image-only",
            Mode::ConceptOnly => "concept-only",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "image-only" => Ok(Mode::ImageOnly),
            "concept-only" => Ok(Mode::ConceptOnly),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected joint, image-only or concept-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub concept_attention_dim: usize,
    pub gamma: f64,
    pub temperature: f64,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            attention_dim: 128,
            concept_attention_dim: 128,
            gamma: 0.75,
            temperature: 3.0,
            mode: Mode::Joint,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.attention_dim == 0 || self.concept_attention_dim == 0 {
            return Err(Error::Config("hidden and attention sizes must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptMil {
    pub config: ModelConfig,
    pub concepts: ConceptSet,
    pub image: ImageBranchParams,
    pub concept: ConceptBranchParams,
}

/// How the training graph selects the top-K rows.
#[derive(Clone, Debug)]
pub enum Selector {
    /// Perturbed top-K on min-max normalized attention with these samples.
    Perturbed(Arc<PerturbedSamples>),
    /// Plain gather at fixed indices.
    Frozen(Vec<usize>),
}

/// Tape handles of one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainGraph {
    pub loss: Var,
    pub bce_img: Option<Var>,
    pub bce_concept: Option<Var>,
    pub l2_alpha: Option<Var>,
    pub alpha: Var,
    pub hard_indices: Vec<usize>,
    pub degenerate: bool,
}

/// Tape handles for every parameter of the model, in checkpoint order.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub image: ImageVars,
    pub concept: ConceptVars,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.image.all().to_vec();
        v.extend(self.concept.all());
        v
    }

    /// Replaces the handle at position `i` of [`ModelVars::all`].
    pub fn set(&mut self, i: usize, var: Var) {
        let slot = match i {
            0 => &mut self.image.proj_weight,
            1 => &mut self.image.proj_bias,
            2 => &mut self.image.att_v,
            3 => &mut self.image.att_u,
            4 => &mut self.image.att_w,
            5 => &mut self.image.cls_weight,
            6 => &mut self.image.cls_bias,
            7 => &mut self.concept.att_v,
            8 => &mut self.concept.att_u,
            9 => &mut self.concept.att_w,
            10 => &mut self.concept.cls_weight,
            11 => &mut self.concept.cls_bias,
            _ => panic!("parameter index {i} out of range"),
        };
        *slot = var;
    }
}

/// Everything inference produces for one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub slide_id: String,
    /// Final probability of the configured mode.
    pub prob: f64,
    pub image_prob: f64,
    pub concept: ConceptForward,
    pub alpha: Vec<f64>,
    pub hard_indices: Vec<usize>,
    /// `K×C` activations of the selected patches, in index order.
    pub f_topk: Tensor,
    pub contributions: Contributions,
}

impl Prediction {
    pub fn is_positive(&self) -> bool {
        self.prob >= 0.5
    }
}

impl ConceptMil {
    pub fn init(config: ModelConfig, concepts: ConceptSet, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        concepts.validate()?;
        if k == 0 {
            return Err(Error::Config("top-K size must be at least 1".into()));
        }
        let image = ImageBranchParams::init(concepts.dim(), config.hidden_dim, config.attention_dim, rng);
        let concept = ConceptBranchParams::init(
            k,
            concepts.len(),
            config.concept_attention_dim,
            config.gamma,
            config.temperature,
            rng,
        );
        Ok(Self {
            config,
            concepts,
            image,
            concept,
        })
    }

    pub fn top_k(&self) -> usize {
        self.concept.top_k()
    }

    pub fn input_dim(&self) -> usize {
        self.image.input_dim()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = self.image.named();
        v.extend(self.concept.named());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.image.tensors_mut();
        v.extend(self.concept.tensors_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            image: self.image.bind(tape),
            concept: self.concept.bind(tape),
        }
    }

    fn check_bag(&self, embeddings: &Tensor) -> Result<usize> {
        let (n, d) = embeddings.require_matrix("bag embeddings")?;
        if d != self.input_dim() {
            return Err(Error::Shape(format!(
                "bag embeddings have dimension {d}, model expects {}",
                self.input_dim()
            )));
        }
        if n < self.top_k() {
            return Err(Error::Shape(format!(
                "bag has {n} patches, fewer than top-K {}",
                self.top_k()
            )));
        }
        Ok(n)
    }

    pub fn activations(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.check_bag(embeddings)?;
        Ok(project(embeddings, &self.concepts)?.values)
    }

    /// Draws the perturbation samples for a training step on `alpha`.
    pub fn draw_selector(&self, alpha: &[f64], topk: &TopKConfig, rng: &mut ChaCha8Rng) -> Result<Selector> {
        let lo = alpha.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let normalized: Vec<f64> = if hi > lo {
            alpha.iter().map(|a| (a - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; alpha.len()]
        };
        let samples = sample_perturbations(&normalized, self.top_k(), topk.num_samples, topk.sigma, rng)?;
        Ok(Selector::Perturbed(Arc::new(samples)))
    }

    /// Records the training loss for one bag on `tape`.
    ///
    /// `selector` is `None` in modes without a learned selection; otherwise it
    /// must come from [`ConceptMil::draw_selector`] on this forward's `α`, or be
    /// a frozen index set.
    pub fn build_loss(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        embeddings: &Tensor,
        activations: &Tensor,
        label: u8,
        lambda: f64,
        selector: Option<&Selector>,
    ) -> Result<TrainGraph> {
        let n = self.check_bag(embeddings)?;
        let k = self.top_k();
        let y = f64::from(label);
        let mode = self.config.mode;

        let (alpha, bce_img, l2_alpha) = if mode.uses_image() {
            let input = tape.leaf(embeddings.clone());
            let img = vars.image.forward(tape, input)?;
            let bce = tape.bce(img.prob, y)?;
            let l2 = tape.sq_l2(img.alpha)?;
            (img.alpha, Some(bce), Some(l2))
        } else {
            (tape.leaf(Tensor::filled(vec![n], 1.0 / n as f64)), None, None)
        };

        let mut hard_indices = hard_topk(tape.value(alpha).data(), k)?;
        let mut bce_concept = None;
        let mut degenerate = false;
        if mode.uses_concept() {
            let f = tape.leaf(activations.clone());
            let f_topk = match (mode, selector) {
                (Mode::Joint, Some(Selector::Perturbed(samples))) => {
                    let normalized = tape.normalize_minmax(alpha)?;
                    let soft = perturbed_topk_on_tape(tape, normalized, samples.clone())?;
                    let rows = tape.gather(f, &hard_indices)?;
                    let weights = tape.gather(soft, &hard_indices)?;
                    tape.scale_rows(rows, weights)?
                }
                (_, Some(Selector::Frozen(idx))) => {
                    hard_indices = idx.clone();
                    tape.gather(f, &hard_indices)?
                }
                (Mode::ConceptOnly, None) => tape.gather(f, &hard_indices)?,
                _ => {
                    return Err(Error::InvalidArgument(
                        "joint training needs a top-K selector".into(),
                    ))
                }
            };
            let out = vars.concept.forward(tape, f_topk)?;
            degenerate = out.degenerate;
            bce_concept = Some(tape.bce(out.prob, y)?);
        }

        let mut terms = Vec::new();
        if let Some(b) = bce_img {
            terms.push(b);
        }
        if let Some(b) = bce_concept {
            terms.push(b);
        }
        if let Some(l2) = l2_alpha {
            let lam = tape.scalar(lambda);
            terms.push(tape.mul(l2, lam)?);
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        Ok(TrainGraph {
            loss,
            bce_img,
            bce_concept,
            l2_alpha,
            alpha,
            hard_indices,
            degenerate,
        })
    }

    /// Deterministic inference on embeddings: hard top-K, no noise.
    pub fn predict_embeddings(&self, slide_id: &str, embeddings: &Tensor) -> Result<Prediction> {
        let activations = self.activations(embeddings)?;
        let n = embeddings.rows();
        let (alpha, image_prob) = if self.config.mode.uses_image() {
            let img = self.image.forward(embeddings)?;
            (img.alpha, img.prob)
        } else {
            (vec![1.0 / n as f64; n], 0.5)
        };
        let hard_indices = hard_topk(&alpha, self.top_k())?;
        let f_topk = activations.gather_rows(&hard_indices)?;
        let concept = self.concept.forward(&f_topk)?;
        let contributions = concept_contributions(
            &f_topk,
            &concept.attention.gated,
            self.concept.cls_weight.data(),
            self.concept.cls_bias.item(),
        )?;
        let prob = if self.config.mode == Mode::ImageOnly {
            image_prob
        } else {
            concept.prob
        };
        Ok(Prediction {
            slide_id: slide_id.to_string(),
            prob,
            image_prob,
            concept,
            alpha,
            hard_indices,
            f_topk,
            contributions,
        })
    }

    pub fn predict(&self, bag: &Bag) -> Result<Prediction> {
        self.predict_embeddings(&bag.slide_id, &bag.embeddings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::stream_rng;
    use crate::synth::{gen_bag, gen_concepts, SynthConfig};

    fn small() -> (ConceptMil, Bag) {
        let cfg = SynthConfig {
            n_range: [12, 16],
            dim: 8,
            num_concepts: 5,
            tumor_concept_count: 2,
            ..SynthConfig::default()
        };
        let concepts = gen_concepts(&cfg).unwrap();
        let bag = gen_bag(&cfg, &concepts, &mut stream_rng(1, 1), "s".into(), Some(1)).unwrap();
        let mc = ModelConfig {
            hidden_dim: 6,
            attention_dim: 4,
            concept_attention_dim: 3,
            ..ModelConfig::default()
        };
        let model = ConceptMil::init(mc, concepts, 4, &mut stream_rng(2, 0)).unwrap();
        (model, bag)
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("image-only".parse::<Mode>().unwrap(), Mode::ImageOnly);
        assert!(matches!("both".parse::<Mode>(), Err(Error::Config(_))));
        assert_eq!(serde_json::to_string(&Mode::ConceptOnly).unwrap(), "\"concept-only\"");
    }

    #[test]
    fn predict_is_deterministic_and_decomposes() {
        let (model, bag) = small();
        let a = model.predict(&bag).unwrap();
        let b = model.predict(&bag).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hard_indices.len(), 4);
        assert!((a.contributions.prob() - a.prob).abs() < 1e-12);
    }

    #[test]
    fn bag_of_exactly_k_selects_everything() {
        let (model, bag) = small();
        let e = bag.embeddings.gather_rows(&[0, 3, 5, 7]).unwrap();
        let p = model.predict_embeddings("x", &e).unwrap();
        assert_eq!(p.hard_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn dimension_and_size_mismatch() {
        let (model, bag) = small();
        let wide = Tensor::zeros(vec![bag.num_patches(), 9]);
        assert!(matches!(model.predict_embeddings("x", &wide), Err(Error::Shape(_))));
        let few = bag.embeddings.gather_rows(&[0, 1]).unwrap();
        assert!(matches!(model.predict_embeddings("x", &few), Err(Error::Shape(_))));
    }

    #[test]
    fn concept_only_uses_first_patches() {
        let (mut model, bag) = small();
        model.config.mode = Mode::ConceptOnly;
        let p = model.predict(&bag).unwrap();
        assert_eq!(p.hard_indices, vec![0, 1, 2, 3]);
        assert_eq!(p.prob, p.concept.prob);
    }

    fn loss_value(model: &ConceptMil, bag: &Bag, sel: Option<&Selector>) -> (f64, TrainGraph, Tape) {
        let acts = model.activations(&bag.embeddings).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let g = model
            .build_loss(&mut tape, &vars, &bag.embeddings, &acts, bag.label, 0.05, sel)
            .unwrap();
        (tape.value(g.loss).item(), g, tape)
    }

    #[test]
    fn loss_terms_add_up() {
        let (model, bag) = small();
        let alpha = model.image.forward(&bag.embeddings).unwrap().alpha;
        let sel = model
            .draw_selector(&alpha, &TopKConfig::default(), &mut stream_rng(3, 3))
            .unwrap();
        let (total, g, tape) = loss_value(&model, &bag, Some(&sel));
        let parts = tape.value(g.bce_img.unwrap()).item()
            + tape.value(g.bce_concept.unwrap()).item()
            + 0.05 * tape.value(g.l2_alpha.unwrap()).item();
        assert!((total - parts).abs() < 1e-12);
        let (_, frozen, _) = loss_value(&model, &bag, Some(&Selector::Frozen(vec![1, 2, 3, 9])));
        assert_eq!(frozen.hard_indices, vec![1, 2, 3, 9]);
    }

    #[test]
    fn image_only_loss_ignores_concept_branch() {
        let (mut model, bag) = small();
        model.config.mode = Mode::ImageOnly;
        let (_, g, _) = loss_value(&model, &bag, None);
        assert!(g.bce_concept.is_none());
        assert!(g.bce_img.is_some());
    }

    fn check_all_params(model: &ConceptMil, bag: &Bag, sel: &Selector) -> f64 {
        let acts = model.activations(&bag.embeddings).unwrap();
        let named = model.named();
        let mut worst: f64 = 0.0;
        for (i, (_, t)) in named.iter().enumerate() {
            let err = grad_check(
                |tape, var| {
                    let mut vars = model.bind(tape);
                    vars.set(i, var);
                    let g = model.build_loss(tape, &vars, &bag.embeddings, &acts, bag.label, 0.05, Some(sel))?;
                    Ok(g.loss)
                },
                t,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn joint_loss_gradients_with_frozen_support() {
        let (model, bag) = small();
        let alpha = model.image.forward(&bag.embeddings).unwrap().alpha;
        let idx = hard_topk(&alpha, 4).unwrap();
        let err = check_all_params(&model, &bag, &Selector::Frozen(idx));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn joint_loss_gradients_through_perturbed_topk() {
        let (model, bag) = small();
        let alpha = model.image.forward(&bag.embeddings).unwrap().alpha;
        let tk = TopKConfig {
            sigma: 0.5,
            ..TopKConfig::default()
        };
        let sel = model.draw_selector(&alpha, &tk, &mut stream_rng(4, 4)).unwrap();
        let err = check_all_params(&model, &bag, &sel);
        assert!(err < 1e-2, "{err}");
    }
}
