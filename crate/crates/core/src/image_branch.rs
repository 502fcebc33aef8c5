//! Attention-MIL image branch: ReLU projector, gated patch attention with
//! softmax normalization, and a logistic slide classifier.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBranchParams {
    /// `D×d_h`
    pub proj_weight: Tensor,
    /// `d_h`
    pub proj_bias: Tensor,
    /// `d_h×d_a`, tanh gate
    pub att_v: Tensor,
    /// `d_h×d_a`, sigmoid gate
    pub att_u: Tensor,
    /// `d_a`
    pub att_w: Tensor,
    /// `d_h`
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("init shape")
}

impl ImageBranchParams {
    pub fn init(input_dim: usize, hidden: usize, att: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj_weight: uniform(rng, vec![input_dim, hidden], input_dim),
            proj_bias: uniform(rng, vec![hidden], input_dim),
            att_v: uniform(rng, vec![hidden, att], hidden),
            att_u: uniform(rng, vec![hidden, att], hidden),
            att_w: uniform(rng, vec![att], att),
            cls_weight: uniform(rng, vec![hidden], hidden),
            cls_bias: uniform(rng, vec![], hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.proj_weight.rows()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("image.proj_weight", &self.proj_weight),
            ("image.proj_bias", &self.proj_bias),
            ("image.att_v", &self.att_v),
            ("image.att_u", &self.att_u),
            ("image.att_w", &self.att_w),
            ("image.cls_weight", &self.cls_weight),
            ("image.cls_bias", &self.cls_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.att_v,
            &mut self.att_u,
            &mut self.att_w,
            &mut self.cls_weight,
            &mut self.cls_bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> ImageVars {
        ImageVars {
            proj_weight: tape.leaf(self.proj_weight.clone()),
            proj_bias: tape.leaf(self.proj_bias.clone()),
            att_v: tape.leaf(self.att_v.clone()),
            att_u: tape.leaf(self.att_u.clone()),
            att_w: tape.leaf(self.att_w.clone()),
            cls_weight: tape.leaf(self.cls_weight.clone()),
            cls_bias: tape.leaf(self.cls_bias.clone()),
        }
    }

    /// Full forward pass on plain tensors.
    pub fn forward(&self, embeddings: &Tensor) -> Result<ImageForward> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let input = tape.leaf(embeddings.clone());
        let out = vars.forward(&mut tape, input)?;
        Ok(out.to_values(&tape))
    }
}

/// Tape handles for [`ImageBranchParams`].
#[derive(Clone, Copy, Debug)]
pub struct ImageVars {
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub att_v: Var,
    pub att_u: Var,
    pub att_w: Var,
    pub cls_weight: Var,
    pub cls_bias: Var,
}

impl ImageVars {
    pub fn all(&self) -> [Var; 7] {
        [
            self.proj_weight,
            self.proj_bias,
            self.att_v,
            self.att_u,
            self.att_w,
            self.cls_weight,
            self.cls_bias,
        ]
    }

    /// `V = relu(I·W + b)`
    pub fn project_features(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let (_, d) = tape.value(input).require_matrix("image features")?;
        let expected = tape.value(self.proj_weight).rows();
        if d != expected {
            return Err(Error::Shape(format!(
                "bag embeddings have dimension {d}, model expects {expected}"
            )));
        }
        let xw = tape.matmul(input, self.proj_weight)?;
        let z = tape.add_bias(xw, self.proj_bias)?;
        Ok(tape.relu(z))
    }

    /// Raw gated attention scores `e_n`.
    pub fn raw_attention(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        gated_attention(tape, features, self.att_v, self.att_u, self.att_w)
    }

    /// `α = softmax(e)`
    pub fn attention_scores(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let e = self.raw_attention(tape, features)?;
        tape.softmax(e)
    }

    /// `Σ_n Σ_d w′_d·(v_nd·α_n) + b_img`
    pub fn image_logit(&self, tape: &mut Tape, features: Var, alpha: Var) -> Result<Var> {
        let hidden = tape.value(self.cls_weight).numel();
        let w = tape.reshape(self.cls_weight, vec![hidden, 1])?;
        let per_patch = tape.matmul(features, w)?;
        let n = tape.value(per_patch).rows();
        let per_patch = tape.reshape(per_patch, vec![n])?;
        let weighted = tape.mul(per_patch, alpha)?;
        let s = tape.sum(weighted)?;
        tape.add(s, self.cls_bias)
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<ImageForwardVars> {
        let features = self.project_features(tape, input)?;
        let raw = self.raw_attention(tape, features)?;
        let alpha = tape.softmax(raw)?;
        let logit = self.image_logit(tape, features, alpha)?;
        let prob = tape.sigmoid(logit);
        Ok(ImageForwardVars {
            features,
            raw,
            alpha,
            logit,
            prob,
        })
    }
}

/// `(tanh(X·V) ⊙ sigmoid(X·U))·w`, one score per row of `x`.
pub(crate) fn gated_attention(tape: &mut Tape, x: Var, v: Var, u: Var, w: Var) -> Result<Var> {
    let a = tape.matmul(x, v)?;
    let a = tape.tanh(a);
    let b = tape.matmul(x, u)?;
    let b = tape.sigmoid(b);
    let gated = tape.mul(a, b)?;
    let att = tape.value(w).numel();
    let w = tape.reshape(w, vec![att, 1])?;
    let scores = tape.matmul(gated, w)?;
    let rows = tape.value(scores).rows();
    tape.reshape(scores, vec![rows])
}

#[derive(Clone, Copy, Debug)]
pub struct ImageForwardVars {
    pub features: Var,
    pub raw: Var,
    pub alpha: Var,
    pub logit: Var,
    pub prob: Var,
}

impl ImageForwardVars {
    pub fn to_values(&self, tape: &Tape) -> ImageForward {
        ImageForward {
            features: tape.value(self.features).clone(),
            raw_scores: tape.value(self.raw).data().to_vec(),
            alpha: tape.value(self.alpha).data().to_vec(),
            logit: tape.value(self.logit).item(),
            prob: tape.value(self.prob).item(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageForward {
    pub features: Tensor,
    pub raw_scores: Vec<f64>,
    pub alpha: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
}
