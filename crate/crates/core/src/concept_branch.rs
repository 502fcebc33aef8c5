//! Self-interpretable concept branch.
//!
//! Gated attention runs over the transposed `K×C` concept matrix of the
//! selected patches, so each concept is scored from its `K` activations. Raw
//! scores are centred on their `γ`-percentile, divided by their population
//! standard deviation and squashed with a temperature sigmoid. The logit is
//! linear in the gated concept sums, which makes the per-concept
//! contributions an exact decomposition of it.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{percentile_plan, sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::image_branch::{gated_attention, uniform};
use crate::tensor::Tensor;

/// Raw-score spread below which the gate falls back to a constant 0.5.
pub const MIN_ATTENTION_STD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBranchParams {
    /// `K×d_a`, tanh gate
    pub att_v: Tensor,
    /// `K×d_a`, sigmoid gate
    pub att_u: Tensor,
    /// `d_a`
    pub att_w: Tensor,
    /// `C`
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
    pub gamma: f64,
    pub temperature: f64,
}

impl ConceptBranchParams {
    pub fn init(
        k: usize,
        num_concepts: usize,
        att: usize,
        gamma: f64,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            att_v: uniform(rng, vec![k, att], k),
            att_u: uniform(rng, vec![k, att], k),
            att_w: uniform(rng, vec![att], att),
            cls_weight: uniform(rng, vec![num_concepts], num_concepts),
            cls_bias: uniform(rng, vec![], num_concepts),
            gamma,
            temperature,
        }
    }

    pub fn top_k(&self) -> usize {
        self.att_v.rows()
    }

    pub fn num_concepts(&self) -> usize {
        self.cls_weight.numel()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("percentile level {} outside (0, 1)", self.gamma)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("concept.att_v", &self.att_v),
            ("concept.att_u", &self.att_u),
            ("concept.att_w", &self.att_w),
            ("concept.cls_weight", &self.cls_weight),
            ("concept.cls_bias", &self.cls_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.att_v,
            &mut self.att_u,
            &mut self.att_w,
            &mut self.cls_weight,
            &mut self.cls_bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> ConceptVars {
        ConceptVars {
            att_v: tape.leaf(self.att_v.clone()),
            att_u: tape.leaf(self.att_u.clone()),
            att_w: tape.leaf(self.att_w.clone()),
            cls_weight: tape.leaf(self.cls_weight.clone()),
            cls_bias: tape.leaf(self.cls_bias.clone()),
            gamma: self.gamma,
            temperature: self.temperature,
        }
    }

    /// Full forward pass on a plain `K×C` matrix.
    pub fn forward(&self, f_topk: &Tensor) -> Result<ConceptForward> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let f = tape.leaf(f_topk.clone());
        let out = vars.forward(&mut tape, f)?;
        Ok(out.to_values(&tape))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConceptVars {
    pub att_v: Var,
    pub att_u: Var,
    pub att_w: Var,
    pub cls_weight: Var,
    pub cls_bias: Var,
    pub gamma: f64,
    pub temperature: f64,
}

impl ConceptVars {
    pub fn all(&self) -> [Var; 5] {
        [self.att_v, self.att_u, self.att_w, self.cls_weight, self.cls_bias]
    }

    /// Raw concept scores `β̃ = A^c(Fᵀ)`.
    pub fn concept_attention(&self, tape: &mut Tape, f_topk: Var) -> Result<Var> {
        let (k, c) = tape.value(f_topk).require_matrix("selected concept matrix")?;
        let expected_k = tape.value(self.att_v).rows();
        let expected_c = tape.value(self.cls_weight).numel();
        if k != expected_k || c != expected_c {
            return Err(Error::Shape(format!(
                "concept branch expects {expected_k}x{expected_c}, got {k}x{c}"
            )));
        }
        let ft = tape.transpose(f_topk)?;
        gated_attention(tape, ft, self.att_v, self.att_u, self.att_w)
    }

    /// Returns `(scaled, gated, degenerate)`.
    pub fn scale_attention(&self, tape: &mut Tape, raw: Var) -> Result<(Var, Var, bool)> {
        let values = tape.value(raw).data().to_vec();
        let c = values.len();
        if c < 2 {
            return Err(Error::InvalidArgument("concept attention needs at least 2 concepts".into()));
        }
        if population_std(&values) <= MIN_ATTENTION_STD {
            let scaled = tape.leaf(Tensor::zeros(vec![c]));
            let gated = tape.leaf(Tensor::filled(vec![c], 0.5));
            return Ok((scaled, gated, true));
        }
        let pr = tape.percentile(raw, self.gamma)?;
        let mean = tape.mean(raw)?;
        let centred = tape.sub(raw, mean)?;
        let sq = tape.mul(centred, centred)?;
        let var = tape.mean(sq)?;
        let std = tape.sqrt(var)?;
        let shifted = tape.sub(raw, pr)?;
        let scaled = tape.div(shifted, std)?;
        let t = tape.scalar(self.temperature);
        let z = tape.mul(scaled, t)?;
        let gated = tape.sigmoid(z);
        Ok((scaled, gated, false))
    }

    /// `Σ_j Σ_c w_c·(f_jc·β_c) + b`, computed as `Σ_c w_c·β_c·(Σ_j f_jc) + b`.
    pub fn concept_logit(&self, tape: &mut Tape, f_topk: Var, beta: Var) -> Result<(Var, Var)> {
        let colsum = tape.sum_rows(f_topk)?;
        let gated = tape.mul(colsum, beta)?;
        let weighted = tape.mul(gated, self.cls_weight)?;
        let s = tape.sum(weighted)?;
        let logit = tape.add(s, self.cls_bias)?;
        Ok((colsum, logit))
    }

    pub fn forward(&self, tape: &mut Tape, f_topk: Var) -> Result<ConceptForwardVars> {
        let raw = self.concept_attention(tape, f_topk)?;
        let (scaled, beta, degenerate) = self.scale_attention(tape, raw)?;
        let (colsum, logit) = self.concept_logit(tape, f_topk, beta)?;
        let prob = tape.sigmoid(logit);
        Ok(ConceptForwardVars {
            raw,
            scaled,
            beta,
            colsum,
            logit,
            prob,
            degenerate,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConceptForwardVars {
    pub raw: Var,
    pub scaled: Var,
    pub beta: Var,
    pub colsum: Var,
    pub logit: Var,
    pub prob: Var,
    pub degenerate: bool,
}

impl ConceptForwardVars {
    pub fn to_values(&self, tape: &Tape) -> ConceptForward {
        ConceptForward {
            attention: ConceptAttention {
                raw: tape.value(self.raw).data().to_vec(),
                scaled: tape.value(self.scaled).data().to_vec(),
                gated: tape.value(self.beta).data().to_vec(),
                degenerate: self.degenerate,
            },
            concept_sums: tape.value(self.colsum).data().to_vec(),
            logit: tape.value(self.logit).item(),
            prob: tape.value(self.prob).item(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptAttention {
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
    /// `β`, strictly inside (0, 1).
    pub gated: Vec<f64>,
    /// Raw scores had no spread; `β` fell back to 0.5.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptForward {
    pub attention: ConceptAttention,
    /// `Σ_j f_jc` per concept.
    pub concept_sums: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
}

pub fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Linear-interpolation percentile at rank `γ·(C−1)`.
pub fn percentile(v: &[f64], gamma: f64) -> Result<f64> {
    if v.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "percentile needs at least 2 values, got {}",
            v.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("percentile level {gamma} outside [0, 1]")));
    }
    let (lo, hi, frac) = percentile_plan(v, gamma);
    Ok(v[lo] + frac * (v[hi] - v[lo]))
}

pub fn scale_attention(raw: &[f64], gamma: f64, temperature: f64) -> Result<ConceptAttention> {
    let pr = percentile(raw, gamma)?;
    let std = population_std(raw);
    if std <= MIN_ATTENTION_STD {
        return Ok(ConceptAttention {
            raw: raw.to_vec(),
            scaled: vec![0.0; raw.len()],
            gated: vec![0.5; raw.len()],
            degenerate: true,
        });
    }
    let scaled: Vec<f64> = raw.iter().map(|x| (x - pr) / std).collect();
    let gated = scaled.iter().map(|s| sigmoid(s * temperature)).collect();
    Ok(ConceptAttention {
        raw: raw.to_vec(),
        scaled,
        gated,
        degenerate: false,
    })
}

/// Per-concept contributions `κ_c = w_c·Σ_j f_jc·β_c` and the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Contributions {
    pub kappa: Vec<f64>,
    pub bias: f64,
}

impl Contributions {
    pub fn logit(&self) -> f64 {
        self.kappa.iter().sum::<f64>() + self.bias
    }

    pub fn prob(&self) -> f64 {
        sigmoid(self.logit())
    }
}

pub fn concept_contributions(
    f_topk: &Tensor,
    beta: &[f64],
    cls_weight: &[f64],
    bias: f64,
) -> Result<Contributions> {
    let (k, c) = f_topk.require_matrix("selected concept matrix")?;
    if beta.len() != c || cls_weight.len() != c {
        return Err(Error::Shape(format!(
            "{c} concepts but {} gates and {} weights",
            beta.len(),
            cls_weight.len()
        )));
    }
    let mut sums = vec![0.0; c];
    for j in 0..k {
        for (s, x) in sums.iter_mut().zip(f_topk.row(j)) {
            *s += x;
        }
    }
    let kappa = (0..c).map(|i| sums[i] * beta[i] * cls_weight[i]).collect();
    Ok(Contributions { kappa, bias })
}

/// `(logit, Ŷ)` from plain tensors.
pub fn concept_logit(
    f_topk: &Tensor,
    beta: &[f64],
    cls_weight: &[f64],
    bias: f64,
) -> Result<(f64, f64)> {
    let c = concept_contributions(f_topk, beta, cls_weight, bias)?;
    let logit = c.logit();
    Ok((logit, sigmoid(logit)))
}
