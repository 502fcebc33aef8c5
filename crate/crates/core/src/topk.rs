//! Patch-attention-guided top-K selection.
//!
//! Inference uses a hard top-K (ties broken towards the lower index). Training
//! smooths the selection with the perturbed-maximum method: the soft indicator
//! is the Monte-Carlo mean of top-K one-hot vectors of `α + σ·z_m` with
//! `z_m ~ N(0, I)`, and its Jacobian is estimated by
//! `J ≈ 1/(M·σ) Σ_m y_m z_mᵀ`.
//!
//! The saved perturbation points `u_m = α₀ + σ·z_m` also define a smooth
//! function of `α` by likelihood-ratio reweighting,
//! `F(α) = 1/M Σ_m y_m · φ_σ(u_m − α) / φ_σ(u_m − α₀)`, which equals the plain
//! Monte-Carlo mean at `α₀` and whose gradient there is exactly the estimator
//! above. The tape op evaluates this function, so finite differences under
//! common random numbers are meaningful.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopKConfig {
    pub k: usize,
    pub num_samples: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self {
            k: 20,
            num_samples: 100,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl TopKConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("top-K size must be at least 1".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub soft_indicator: Vec<f64>,
    /// Ascending patch indices of the hard top-K.
    pub hard_indices: Vec<usize>,
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Shape(format!(
            "top-K of size {k} requested from {n} patches"
        )));
    }
    Ok(())
}

/// Indices of the `k` largest values in ascending index order.
pub fn hard_topk(values: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(values.len(), k)?;
    let mut idx = topk_unsorted(values, k);
    idx.sort_unstable();
    Ok(idx)
}

fn topk_unsorted(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order
}

/// Saved noise and per-sample selections of one perturbed forward pass.
#[derive(Clone, Debug)]
pub struct PerturbedSamples {
    pub base: Vec<f64>,
    pub sigma: f64,
    pub k: usize,
    /// `M` standard-normal draws of length `N`; empty when `k == N`.
    pub noise: Vec<Vec<f64>>,
    /// Top-K set of each perturbed vector.
    pub selections: Vec<Vec<usize>>,
}

impl PerturbedSamples {
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Selecting all entries is constant in `α`.
    pub fn selects_all(&self) -> bool {
        self.k == self.base.len()
    }

    pub fn num_samples(&self) -> usize {
        self.noise.len()
    }

    fn point(&self, m: usize, i: usize) -> f64 {
        self.base[i] + self.sigma * self.noise[m][i]
    }
}

/// Draws `M` perturbations of `alpha` and solves each top-K problem.
pub fn sample_perturbations(
    alpha: &[f64],
    k: usize,
    num_samples: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PerturbedSamples> {
    check_k(alpha.len(), k)?;
    if num_samples == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(
            "perturbed top-K needs at least one sample and positive sigma".into(),
        ));
    }
    let n = alpha.len();
    let mut noise = Vec::new();
    let mut selections = Vec::new();
    if k < n {
        noise.reserve(num_samples);
        selections.reserve(num_samples);
        let mut perturbed = vec![0.0; n];
        for _ in 0..num_samples {
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..n {
                perturbed[i] = alpha[i] + sigma * z[i];
            }
            selections.push(topk_unsorted(&perturbed, k));
            noise.push(z);
        }
    }
    Ok(PerturbedSamples {
        base: alpha.to_vec(),
        sigma,
        k,
        noise,
        selections,
    })
}

/// Reuses existing noise draws at a new `alpha` (common random numbers).
pub fn resample_with_noise(alpha: &[f64], like: &PerturbedSamples) -> Result<PerturbedSamples> {
    if alpha.len() != like.len() {
        return Err(Error::Shape("noise length differs from alpha".into()));
    }
    let selections = like
        .noise
        .iter()
        .map(|z| {
            let p: Vec<f64> = alpha.iter().zip(z).map(|(a, e)| a + like.sigma * e).collect();
            topk_unsorted(&p, like.k)
        })
        .collect();
    Ok(PerturbedSamples {
        base: alpha.to_vec(),
        sigma: like.sigma,
        k: like.k,
        noise: like.noise.clone(),
        selections,
    })
}

/// Plain Monte-Carlo mean of the sampled one-hot selections.
pub fn mc_indicator(samples: &PerturbedSamples) -> Vec<f64> {
    let n = samples.len();
    if samples.selects_all() {
        return vec![1.0; n];
    }
    let mut counts = vec![0usize; n];
    for sel in &samples.selections {
        for &i in sel {
            counts[i] += 1;
        }
    }
    let m = samples.num_samples() as f64;
    counts.into_iter().map(|c| c as f64 / m).collect()
}

pub fn perturbed_topk_forward(
    alpha: &[f64],
    cfg: &TopKConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Selection, PerturbedSamples)> {
    let samples = sample_perturbations(alpha, cfg.k, cfg.num_samples, cfg.sigma, rng)?;
    let selection = Selection {
        soft_indicator: mc_indicator(&samples),
        hard_indices: hard_topk(alpha, cfg.k)?,
    };
    Ok((selection, samples))
}

/// `Jᵀ·upstream` with the perturbed-maximizer Jacobian estimator.
pub fn perturbed_topk_backward(upstream: &[f64], samples: &PerturbedSamples) -> Result<Vec<f64>> {
    let n = samples.len();
    if upstream.len() != n {
        return Err(Error::Shape(format!(
            "upstream gradient of length {} for {n} scores",
            upstream.len()
        )));
    }
    if samples.selects_all() {
        return Ok(vec![0.0; n]);
    }
    if samples.num_samples() == 0 {
        return Err(Error::InvalidArgument("no saved perturbation samples".into()));
    }
    let mut grad = vec![0.0; n];
    for (z, sel) in samples.noise.iter().zip(&samples.selections) {
        let dot: f64 = sel.iter().map(|&i| upstream[i]).sum();
        if dot != 0.0 {
            grad.iter_mut().zip(z).for_each(|(g, zj)| *g += dot * zj);
        }
    }
    let scale = 1.0 / (samples.num_samples() as f64 * samples.sigma);
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

fn log_weight(samples: &PerturbedSamples, m: usize, alpha: &[f64]) -> f64 {
    let s2 = samples.sigma * samples.sigma;
    let mut acc = 0.0;
    for (i, &a) in alpha.iter().enumerate() {
        let z = samples.noise[m][i];
        let d = samples.point(m, i) - a;
        acc += z * z - d * d / s2;
    }
    0.5 * acc
}

/// Likelihood-ratio reweighted indicator at `alpha`; equals
/// [`mc_indicator`] when `alpha` is the sampling base.
pub fn reweighted_indicator(samples: &PerturbedSamples, alpha: &[f64]) -> Result<Vec<f64>> {
    let n = samples.len();
    if alpha.len() != n {
        return Err(Error::Shape("alpha length differs from saved samples".into()));
    }
    if samples.selects_all() {
        return Ok(vec![1.0; n]);
    }
    if alpha == samples.base.as_slice() {
        return Ok(mc_indicator(samples));
    }
    let mut out = vec![0.0; n];
    for (m, sel) in samples.selections.iter().enumerate() {
        let w = log_weight(samples, m, alpha).exp();
        for &i in sel {
            out[i] += w;
        }
    }
    let inv = 1.0 / samples.num_samples() as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    Ok(out)
}

fn reweighted_backward(
    samples: &PerturbedSamples,
    alpha: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if alpha == samples.base.as_slice() || samples.selects_all() {
        return perturbed_topk_backward(upstream, samples);
    }
    let n = samples.len();
    let s2 = samples.sigma * samples.sigma;
    let mut grad = vec![0.0; n];
    for (m, sel) in samples.selections.iter().enumerate() {
        let dot: f64 = sel.iter().map(|&i| upstream[i]).sum();
        if dot == 0.0 {
            continue;
        }
        let w = log_weight(samples, m, alpha).exp();
        for j in 0..n {
            grad[j] += dot * w * (samples.point(m, j) - alpha[j]) / s2;
        }
    }
    let inv = 1.0 / samples.num_samples() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(grad)
}

struct PerturbedTopKOp {
    samples: Arc<PerturbedSamples>,
}

impl CustomOp for PerturbedTopKOp {
    fn name(&self) -> &str {
        "perturbed_topk"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let g = reweighted_backward(&self.samples, inputs[0].data(), upstream.data())?;
        Ok(vec![Tensor::vector(g)])
    }
}

/// Records the smoothed indicator of `alpha` on a tape.
pub fn perturbed_topk_on_tape(
    tape: &mut Tape,
    alpha: Var,
    samples: Arc<PerturbedSamples>,
) -> Result<Var> {
    let value = tape.value(alpha);
    value.require_vector("perturbed top-K scores")?;
    let out = reweighted_indicator(&samples, value.data())?;
    Ok(tape.custom(&[alpha], Tensor::vector(out), Box::new(PerturbedTopKOp { samples })))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatherMode {
    /// Hard-support rows weighted by the soft indicator.
    Training,
    Inference,
}

/// Concept rows of the selected patches, `K×C`.
pub fn gather_concepts(f: &Tensor, sel: &Selection, mode: GatherMode) -> Result<Tensor> {
    let rows = f.gather_rows(&sel.hard_indices)?;
    match mode {
        GatherMode::Inference => Ok(rows),
        GatherMode::Training => {
            if sel.soft_indicator.len() != f.rows() {
                return Err(Error::Shape(format!(
                    "soft indicator of length {} for {} patches",
                    sel.soft_indicator.len(),
                    f.rows()
                )));
            }
            let c = rows.cols();
            let mut data = rows.into_data();
            for (k, &i) in sel.hard_indices.iter().enumerate() {
                let w = sel.soft_indicator[i];
                data[k * c..(k + 1) * c].iter_mut().for_each(|x| *x *= w);
            }
            Tensor::matrix(sel.hard_indices.len(), c, data)
        }
    }
}
