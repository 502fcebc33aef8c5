//! Deterministic synthetic datasets with known tumor patches.
//!
//! Concepts are an orthonormal set of directions, the first
//! `tumor_concept_count` of which are tumor concepts. Every patch embedding
//! is `signal_strength` times a random convex combination of either tumor or
//! background concept directions, plus isotropic Gaussian noise. Positive
//! bags carry one contiguous block of tumor patches on the slide grid.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::{self, Bag, ConceptSet, DatasetSplit, PatchRecord};
use crate::error::{Error, Result};
use crate::rng::{stream_id, stream_rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_bags: usize,
    /// Inclusive range of patches per bag.
    pub n_range: [usize; 2],
    pub dim: usize,
    pub num_concepts: usize,
    pub tumor_concept_count: usize,
    pub tumor_fraction_range: [f64; 2],
    pub signal_strength: f64,
    pub noise_std: f64,
    pub positive_rate: f64,
    /// Train / validation / test fractions.
    pub split_ratios: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_bags: 200,
            n_range: [64, 256],
            dim: 64,
            num_concepts: 12,
            tumor_concept_count: 4,
            tumor_fraction_range: [0.2, 0.5],
            signal_strength: 4.0,
            noise_std: 0.5,
            positive_rate: 0.5,
            split_ratios: [0.8, 0.1, 0.1],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [lo, hi] = self.tumor_fraction_range;
        if !(lo > 0.0 && hi < 1.0 && lo < hi) {
            return bad(format!(
                "tumor_fraction_range [{lo}, {hi}] must satisfy 0 < lo < hi < 1"
            ));
        }
        if self.num_concepts < 2 {
            return bad("num_concepts must be at least 2".into());
        }
        if self.tumor_concept_count == 0 || self.tumor_concept_count >= self.num_concepts {
            return bad(format!(
                "tumor_concept_count {} must be in 1..{}",
                self.tumor_concept_count, self.num_concepts
            ));
        }
        if self.dim < self.num_concepts {
            return bad(format!(
                "dim {} is smaller than num_concepts {}",
                self.dim, self.num_concepts
            ));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength.is_finite()) {
            return bad("signal_strength must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be non-negative".into());
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad("positive_rate must lie in (0, 1)".into());
        }
        if self.num_bags == 0 {
            return bad("num_bags must be positive".into());
        }
        let [nmin, nmax] = self.n_range;
        if nmin < 2 || nmin > nmax {
            return bad(format!("n_range [{nmin}, {nmax}] is invalid"));
        }
        for n in nmin..=nmax {
            let (a, b) = tumor_count_bounds(n, lo, hi);
            if a > b {
                return bad(format!(
                    "tumor_fraction_range [{lo}, {hi}] admits no tumor count for a {n}-patch bag"
                ));
            }
        }
        let r = self.split_ratios;
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!("split_ratios {r:?} must be fractions summing to 1"));
        }
        Ok(())
    }
}

fn tumor_count_bounds(n: usize, lo: f64, hi: f64) -> (usize, usize) {
    let a = ((lo * n as f64).ceil() as usize).max(1);
    let b = (hi * n as f64).floor() as usize;
    (a, b.min(n - 1))
}

/// Indices of the designated tumor concepts.
pub fn tumor_concepts(cfg: &SynthConfig) -> std::ops::Range<usize> {
    0..cfg.tumor_concept_count
}

/// `C` orthonormal `D`-dimensional directions from Gram–Schmidt on Gaussian
/// draws (two orthogonalization passes).
pub fn gen_concepts(cfg: &SynthConfig) -> Result<ConceptSet> {
    cfg.validate()?;
    let (c, d) = (cfg.num_concepts, cfg.dim);
    let mut rng = stream_rng(cfg.seed, stream_id(&[0xC0C0]));
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    while rows.len() < c {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push(v);
    }
    let names = (0..c)
        .map(|i| {
            if i < cfg.tumor_concept_count {
                format!("tumor concept {i}")
            } else {
                format!("background concept {}", i - cfg.tumor_concept_count)
            }
        })
        .collect();
    ConceptSet::new(
        names,
        Tensor::from_rows(&rows)?,
        bagio::DEFAULT_PROMPT_TEMPLATE.to_string(),
    )
}

fn convex_weights(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Grid width used to lay out `n` patches row-major.
pub fn grid_width(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

/// One synthetic bag. `force_label` overrides the Bernoulli(positive_rate) draw.
pub fn gen_bag(
    cfg: &SynthConfig,
    concepts: &ConceptSet,
    rng: &mut ChaCha8Rng,
    slide_id: String,
    force_label: Option<u8>,
) -> Result<Bag> {
    let label = match force_label {
        Some(l) if l <= 1 => l,
        Some(l) => return Err(Error::InvalidArgument(format!("label {l} is not 0 or 1"))),
        None => u8::from(rng.random_bool(cfg.positive_rate)),
    };
    let n = rng.random_range(cfg.n_range[0]..=cfg.n_range[1]);
    let width = grid_width(n);
    let coords: Vec<(usize, usize)> = (0..n).map(|i| (i / width, i % width)).collect();

    let mut in_tumor = vec![false; n];
    if label == 1 {
        let [lo, hi] = cfg.tumor_fraction_range;
        let (a, b) = tumor_count_bounds(n, lo, hi);
        let count = rng.random_range(a..=b);
        let center = coords[rng.random_range(0..n)];
        let mut order: Vec<usize> = (0..n).collect();
        let dist = |i: usize| {
            let (r, c) = coords[i];
            let dr = r as i64 - center.0 as i64;
            let dc = c as i64 - center.1 as i64;
            dr * dr + dc * dc
        };
        order.sort_by_key(|&i| (dist(i), i));
        for &i in &order[..count] {
            in_tumor[i] = true;
        }
    }

    let t = cfg.tumor_concept_count;
    let dim = concepts.dim();
    let mut data = Vec::with_capacity(n * dim);
    for &tumor in &in_tumor {
        let range = if tumor { 0..t } else { t..concepts.len() };
        let w = convex_weights(rng, range.len());
        let mut v = vec![0.0; dim];
        for (wk, ci) in w.iter().zip(range) {
            for (x, e) in v.iter_mut().zip(concepts.embeddings.row(ci)) {
                *x += cfg.signal_strength * wk * e;
            }
        }
        if cfg.noise_std > 0.0 {
            for x in &mut v {
                let z: f64 = rng.sample(StandardNormal);
                *x += cfg.noise_std * z;
            }
        }
        data.extend(v);
    }
    let patches = coords
        .iter()
        .zip(&in_tumor)
        .map(|(&(r, c), &f)| PatchRecord {
            row: r as u32,
            col: c as u32,
            in_tumor: Some(f),
        })
        .collect();
    Bag::new(slide_id, label, Tensor::matrix(n, dim, data)?, patches)
}

pub fn slide_id(index: usize) -> String {
    format!("slide_{index:04}")
}

/// A generated dataset held in memory (embeddings in full `f64` precision).
pub struct SynthDataset {
    pub concepts: ConceptSet,
    pub bags: Vec<Bag>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn positive_count(cfg: &SynthConfig) -> usize {
    (cfg.num_bags as f64 * cfg.positive_rate).round() as usize
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let concepts = gen_concepts(cfg)?;
    let mut rng = stream_rng(cfg.seed, stream_id(&[0x5EED]));
    let positives = positive_count(cfg);
    let mut labels: Vec<u8> = (0..cfg.num_bags).map(|i| u8::from(i < positives)).collect();
    labels.shuffle(&mut rng);

    let bags = (0..cfg.num_bags)
        .into_par_iter()
        .map(|i| {
            let mut bag_rng = stream_rng(cfg.seed, stream_id(&[1, i as u64]));
            gen_bag(cfg, &concepts, &mut bag_rng, slide_id(i), Some(labels[i]))
        })
        .collect::<Result<Vec<_>>>()?;

    // stratified split so every part sees both classes
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..cfg.num_bags).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (n * cfg.split_ratios[0]).round() as usize;
        let n_val = ((n * cfg.split_ratios[1]).round() as usize).min(idx.len() - n_train);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SynthDataset {
        concepts,
        bags,
        train,
        val,
        test,
    })
}

pub const CONCEPTS_FILE: &str = "concepts.ccpt";
pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_FILE: &str = "synth_config.json";

/// Writes bags, concept set, split file and the resolved config to `out_dir`.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetSplit> {
    let ds = generate(cfg)?;
    std::fs::create_dir_all(out_dir.join("bags")).map_err(|e| Error::io(out_dir, e))?;
    bagio::write_concepts(&ds.concepts, &out_dir.join(CONCEPTS_FILE))?;
    ds.bags
        .par_iter()
        .map(|bag| bagio::write_bag(bag, &out_dir.join(bag_rel_path(&bag.slide_id))))
        .collect::<Result<Vec<_>>>()?;
    let rel = |ids: &[usize]| -> Vec<PathBuf> {
        ids.iter()
            .map(|&i| bag_rel_path(&ds.bags[i].slide_id))
            .collect()
    };
    let split = DatasetSplit {
        train: rel(&ds.train),
        val: rel(&ds.val),
        test: rel(&ds.test),
        root: out_dir.to_path_buf(),
    };
    bagio::write_split(&split, &out_dir.join(SPLIT_FILE))?;
    let mut cfg_json = serde_json::to_vec_pretty(cfg).expect("config serializes");
    cfg_json.push(b'\n');
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg_json).map_err(|e| Error::io(cfg_path, e))?;
    Ok(split)
}

fn bag_rel_path(slide_id: &str) -> PathBuf {
    PathBuf::from("bags").join(format!("{slide_id}.cmil"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project;

    fn small() -> SynthConfig {
        SynthConfig {
            num_bags: 100,
            n_range: [20, 40],
            dim: 16,
            num_concepts: 6,
            tumor_concept_count: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn concepts_are_orthonormal_and_deterministic() {
        let cfg = small();
        let a = gen_concepts(&cfg).unwrap();
        let b = gen_concepts(&cfg).unwrap();
        assert_eq!(a, b);
        let e = &a.embeddings;
        for i in 0..e.rows() {
            for j in 0..e.rows() {
                let dot: f64 = e.row(i).iter().zip(e.row(j)).map(|(x, y)| x * y).sum();
                if i == j {
                    assert!((dot - 1.0).abs() < 1e-12);
                } else {
                    assert!(dot.abs() < 1e-9, "{i},{j}: {dot}");
                }
            }
        }
    }

    #[test]
    fn square_concept_basis() {
        let cfg = SynthConfig {
            dim: 4,
            num_concepts: 4,
            tumor_concept_count: 1,
            ..small()
        };
        let c = gen_concepts(&cfg).unwrap();
        assert_eq!(c.embeddings.shape(), &[4, 4]);
        for i in 0..4 {
            let n: f64 = c.embeddings.row(i).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dim_smaller_than_concepts_is_rejected() {
        let cfg = SynthConfig {
            dim: 3,
            num_concepts: 4,
            ..small()
        };
        assert!(matches!(gen_concepts(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn forced_labels_control_tumor_patches() {
        let cfg = small();
        let concepts = gen_concepts(&cfg).unwrap();
        let mut rng = stream_rng(3, 0);
        for _ in 0..20 {
            let neg = gen_bag(&cfg, &concepts, &mut rng, "n".into(), Some(0)).unwrap();
            assert!(neg.patches.iter().all(|p| p.in_tumor == Some(false)));
            let pos = gen_bag(&cfg, &concepts, &mut rng, "p".into(), Some(1)).unwrap();
            let t = pos.patches.iter().filter(|p| p.in_tumor == Some(true)).count();
            let frac = t as f64 / pos.num_patches() as f64;
            assert!(frac >= cfg.tumor_fraction_range[0] && frac <= cfg.tumor_fraction_range[1]);
        }
    }

    #[test]
    fn noiseless_tumor_patches_live_in_tumor_subspace() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            signal_strength: 1.0,
            ..small()
        };
        let concepts = gen_concepts(&cfg).unwrap();
        let mut rng = stream_rng(9, 0);
        let bag = gen_bag(&cfg, &concepts, &mut rng, "p".into(), Some(1)).unwrap();
        let acts = project(&bag.embeddings, &concepts).unwrap();
        for (i, p) in bag.patches.iter().enumerate() {
            let row = acts.values.row(i);
            let (own, other) = if p.in_tumor == Some(true) {
                (&row[..2], &row[2..])
            } else {
                (&row[2..], &row[..2])
            };
            // cosine with the generating mixture is the norm of the in-span part
            let in_span: f64 = own.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((in_span - 1.0).abs() < 1e-12, "{in_span}");
            assert!(other.iter().all(|x| x.abs() <= 1e-9));
        }
    }

    #[test]
    fn label_iff_tumor_patch_present() {
        let ds = generate(&small()).unwrap();
        for bag in &ds.bags {
            let any = bag.patches.iter().any(|p| p.in_tumor == Some(true));
            assert_eq!(bag.label == 1, any);
        }
    }

    #[test]
    fn dataset_counts_and_split() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.bags.iter().filter(|b| b.label == 1).count(), 50);
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (80, 10, 10));
    }

    #[test]
    fn invalid_fraction_range_is_config_error() {
        let cfg = SynthConfig {
            tumor_fraction_range: [0.5, 0.2],
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn written_dataset_is_deterministic() {
        let cfg = SynthConfig {
            num_bags: 10,
            ..small()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_dataset(&cfg, a.path()).unwrap();
        gen_dataset(&cfg, b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(
                std::fs::read(&entry).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{}",
                rel.display()
            );
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
