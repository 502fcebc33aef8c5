//! Classification, localization and separability metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::Bag;
use crate::error::{Error, Result};
use crate::explain::{global_from_summaries, point_clouds, project_2d, GlobalExplanation, GlobalOptions, GroupBy, SlideSummary};
use crate::model::{ConceptMil, Prediction};
use crate::tensor::Tensor;

pub const DEFAULT_JSD_BINS: usize = 32;

fn check_pairs(n: usize, m: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("metric over an empty set".into()));
    }
    if n != m {
        return Err(Error::Shape(format!("{n} scores but {m} labels")));
    }
    Ok(())
}

/// Fraction with `(p ≥ threshold) == label`.
pub fn accuracy(preds: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_pairs(preds.len(), labels.len())?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= threshold) == (y == 1))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mann–Whitney AUC with mid-ranks, so ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs both positive and negative examples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based mid-rank of the tie group
        let mid = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            if labels[o] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

/// Hits@K / K over the selected patches.
pub fn disease_localization(selected: &[usize], bag: &Bag) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::InvalidArgument("no selected patches".into()));
    }
    let mut hits = 0;
    for &i in selected {
        let patch = bag.patches.get(i).ok_or_else(|| {
            Error::Shape(format!("patch index {i} out of range for {}", bag.slide_id))
        })?;
        match patch.in_tumor {
            Some(true) => hits += 1,
            Some(false) => {}
            None => {
                return Err(Error::Dataset(format!(
                    "slide {} has no in_tumor flags",
                    bag.slide_id
                )))
            }
        }
    }
    Ok(hits as f64 / selected.len() as f64)
}

/// Base-2 Jensen–Shannon divergence of two histograms (normalized here).
pub fn jsd_histograms(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!("histograms of length {} and {}", p.len(), q.len())));
    }
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if !(sp > 0.0 && sq > 0.0) {
        return Err(Error::InvalidArgument("histogram with no mass".into()));
    }
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        d += 0.5 * kl(a, m) + 0.5 * kl(b, m);
    }
    Ok(d.clamp(0.0, 1.0))
}

/// Equal-width counts over `[lo, hi]`, the top edge closed.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = hi - lo;
    for &x in samples {
        let b = if width > 0.0 {
            (((x - lo) / width) * bins as f64).floor() as usize
        } else {
            0
        };
        h[b.min(bins - 1)] += 1.0;
    }
    h
}

/// JSD between two samples histogrammed on shared bins over the pooled range.
pub fn js_divergence(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("JS divergence of an empty sample".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    jsd_histograms(&histogram(a, lo, hi, bins), &histogram(b, lo, hi, bins))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distance; singleton clusters score 0.
pub fn silhouette(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = points.require_matrix("silhouette points")?;
    check_pairs(n, labels.len())?;
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two clusters".into()));
    }
    let index = |l: usize| clusters.binary_search(&l).unwrap();
    let sizes = labels.iter().fold(vec![0usize; clusters.len()], |mut s, &l| {
        s[index(l)] += 1;
        s
    });
    let mut total = 0.0;
    for i in 0..n {
        let own = index(labels[i]);
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; clusters.len()];
        for j in 0..n {
            if j != i {
                sums[index(labels[j])] += dist(points.row(i), points.row(j));
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..clusters.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDivergence {
    pub concept: String,
    pub jsd: f64,
}

/// Silhouette scores in concept space and on the 2-D projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteScores {
    pub patch_concept_space: f64,
    pub wsi_concept_space: f64,
    pub patch_projected: f64,
    pub wsi_projected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub num_slides: usize,
    pub num_positive: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    /// Mean over slides with at least one tumor patch; `None` without flags.
    pub disease_localization: Option<f64>,
    pub localization_slides: usize,
    pub jsd: Vec<ConceptDivergence>,
    pub jsd_mean: Option<f64>,
    pub silhouette: Option<SilhouetteScores>,
    pub warnings: Vec<String>,
}

pub struct Evaluation {
    pub result: EvalResult,
    pub predictions: Vec<Prediction>,
    /// `None` when a class has fewer than two slides under the grouping.
    pub global: Option<GlobalExplanation>,
}

/// Turns a data-dependent failure into a warning.
fn soften<T>(r: Result<T>, what: &str, warnings: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::Dataset(_) | Error::InvalidArgument(_) | Error::Degenerate(_))) => {
            warnings.push(format!("{what} skipped: {e}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn usize_labels(l: &[u8]) -> Vec<usize> {
    l.iter().map(|&v| usize::from(v)).collect()
}

fn separability(
    slides: &[SlideSummary],
    global: Option<&GlobalExplanation>,
    opts: &GlobalOptions,
) -> Result<SilhouetteScores> {
    let ((patch, patch_labels), (wsi, wsi_labels)) = point_clouds(slides, GroupBy::GroundTruth)?;
    let (patch_2d, wsi_2d) = match global {
        Some(g) => (
            Tensor::from_rows(&g.patch_points.points.iter().map(|p| p.to_vec()).collect::<Vec<_>>())?,
            Tensor::from_rows(&g.wsi_points.points.iter().map(|p| p.to_vec()).collect::<Vec<_>>())?,
        ),
        None => (
            project_2d(&patch, opts.projection, &opts.tsne)?,
            project_2d(&wsi, opts.projection, &opts.tsne)?,
        ),
    };
    let (pl, wl) = (usize_labels(&patch_labels), usize_labels(&wsi_labels));
    Ok(SilhouetteScores {
        patch_concept_space: silhouette(&patch, &pl)?,
        wsi_concept_space: silhouette(&wsi, &wl)?,
        patch_projected: silhouette(&patch_2d, &pl)?,
        wsi_projected: silhouette(&wsi_2d, &wl)?,
    })
}

/// Full metric suite over labelled bags. Separability always uses ground
/// truth; the global report follows `opts.group_by`.
pub fn evaluate(model: &ConceptMil, bags: &[Bag], bins: usize, opts: &GlobalOptions) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let predictions: Vec<Prediction> = bags.par_iter().map(|b| model.predict(b)).collect::<Result<_>>()?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let probs: Vec<f64> = predictions.iter().map(|p| p.prob).collect();
    let mut warnings = Vec::new();
    let num_positive = labels.iter().filter(|&&l| l == 1).count();
    let both = num_positive > 0 && num_positive < bags.len();
    let auc = if both {
        Some(auc(&probs, &labels)?)
    } else {
        warnings.push("AUC undefined: only one class present".to_string());
        None
    };

    let (disease_localization, localization_slides) = if bags.iter().all(Bag::has_tumor_flags) {
        let scores: Vec<f64> = bags
            .iter()
            .zip(&predictions)
            .filter(|(b, _)| b.patches.iter().any(|p| p.in_tumor == Some(true)))
            .map(|(b, p)| disease_localization(&p.hard_indices, b))
            .collect::<Result<_>>()?;
        if scores.is_empty() {
            warnings.push("localization undefined: no slide has tumor patches".to_string());
            (None, 0)
        } else {
            (Some(scores.iter().sum::<f64>() / scores.len() as f64), scores.len())
        }
    } else {
        warnings.push("localization skipped: in_tumor flags missing".to_string());
        (None, 0)
    };

    let slides: Vec<SlideSummary> = predictions.iter().zip(&labels).map(|(p, &l)| SlideSummary::new(p, l)).collect();
    let mut jsd = Vec::new();
    if both {
        for (c, name) in model.concepts.names.iter().enumerate() {
            let pick = |l: u8| -> Vec<f64> { slides.iter().filter(|s| s.label == l).map(|s| s.wsi_values[c]).collect() };
            jsd.push(ConceptDivergence {
                concept: name.clone(),
                jsd: js_divergence(&pick(1), &pick(0), bins)?,
            });
        }
    } else {
        warnings.push("JSD and silhouette undefined: only one class present".to_string());
    }
    let jsd_mean = (!jsd.is_empty()).then(|| jsd.iter().map(|d| d.jsd).sum::<f64>() / jsd.len() as f64);

    let global = soften(
        global_from_summaries(&slides, &model.concepts.names, opts),
        "global explanation",
        &mut warnings,
    )?;
    let silhouette = if both {
        soften(separability(&slides, global.as_ref(), opts), "silhouette", &mut warnings)?
    } else {
        None
    };

    Ok(Evaluation {
        result: EvalResult {
            num_slides: bags.len(),
            num_positive,
            accuracy: accuracy(&probs, &labels, 0.5)?,
            auc,
            disease_localization,
            localization_slides,
            jsd,
            jsd_mean,
            silhouette,
            warnings,
        },
        predictions,
        global,
    })
}
