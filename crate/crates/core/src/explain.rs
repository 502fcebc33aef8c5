//! Local (per-slide) and global (dataset-level) explanations, 2-D
//! projections and concept-audit retrieval.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::Bag;
use crate::error::{Error, Result};
use crate::model::{ConceptMil, Prediction};
use crate::rng::{stream_id, stream_rng};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const CLASS_NAMES: [&str; 2] = ["normal", "tumor"];

pub fn class_name(label: u8) -> &'static str {
    CLASS_NAMES[usize::from(label.min(1))]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `α` per grid cell; `None` where no patch sits.
    pub cells: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopPatch {
    pub patch: usize,
    pub row: u32,
    pub col: u32,
    pub alpha: f64,
    pub concepts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptContribution {
    pub concept: String,
    pub kappa: f64,
    pub gate: f64,
    pub activation_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub schema_version: u32,
    pub slide_id: String,
    pub label: u8,
    pub prediction: f64,
    pub decision: String,
    pub mode: String,
    pub attention_grid: AttentionGrid,
    pub topk: Vec<TopPatch>,
    pub contributions: Vec<ConceptContribution>,
    pub bias: f64,
    /// Content hashes of the inputs, filled in by the caller.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl LocalExplanation {
    pub fn logit(&self) -> f64 {
        self.contributions.iter().map(|c| c.kappa).sum::<f64>() + self.bias
    }
}

pub fn explain_prediction(bag: &Bag, model: &ConceptMil, pred: &Prediction) -> Result<LocalExplanation> {
    let rows = bag.patches.iter().map(|p| p.row as usize + 1).max().unwrap_or(0);
    let cols = bag.patches.iter().map(|p| p.col as usize + 1).max().unwrap_or(0);
    let mut cells = vec![vec![None; cols]; rows];
    for (p, &a) in bag.patches.iter().zip(&pred.alpha) {
        cells[p.row as usize][p.col as usize] = Some(a);
    }
    let topk = pred
        .hard_indices
        .iter()
        .enumerate()
        .map(|(j, &i)| TopPatch {
            patch: i,
            row: bag.patches[i].row,
            col: bag.patches[i].col,
            alpha: pred.alpha[i],
            concepts: pred.f_topk.row(j).to_vec(),
        })
        .collect();
    let contributions = model
        .concepts
        .names
        .iter()
        .enumerate()
        .map(|(c, name)| ConceptContribution {
            concept: name.clone(),
            kappa: pred.contributions.kappa[c],
            gate: pred.concept.attention.gated[c],
            activation_sum: pred.concept.concept_sums[c],
        })
        .collect();
    Ok(LocalExplanation {
        schema_version: SCHEMA_VERSION,
        slide_id: bag.slide_id.clone(),
        label: bag.label,
        prediction: pred.prob,
        decision: class_name(u8::from(pred.is_positive())).to_string(),
        mode: model.config.mode.name().to_string(),
        attention_grid: AttentionGrid { rows, cols, cells },
        topk,
        contributions,
        bias: pred.contributions.bias,
        provenance: BTreeMap::new(),
    })
}

pub fn explain_slide(bag: &Bag, model: &ConceptMil) -> Result<LocalExplanation> {
    let pred = model.predict(bag)?;
    explain_prediction(bag, model, &pred)
}

/// Eight viridis stops, dark to light.
pub const VIRIDIS: [&str; 8] = [
    "#440154", "#46327e", "#365c8d", "#277f8e", "#1fa187", "#4ac16d", "#a0da39", "#fde725",
];

fn hex_rgb(h: &str) -> [f64; 3] {
    let v = u32::from_str_radix(&h[1..], 16).expect("valid stop");
    [(v >> 16) as f64, ((v >> 8) & 0xff) as f64, (v & 0xff) as f64]
}

/// Colour for `t ∈ [0, 1]` by linear interpolation between the stops.
pub fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (hex_rgb(VIRIDIS[i]), hex_rgb(VIRIDIS[i + 1]));
    let c: Vec<u8> = (0..3).map(|k| (a[k] + f * (b[k] - a[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const CELL: usize = 12;

fn bar_chart(svg: &mut String, x0: usize, y0: usize, title: &str, bars: &[(String, f64)]) -> usize {
    let row_h = 16;
    let half = 140.0;
    let max = bars.iter().map(|b| b.1.abs()).fold(0.0, f64::max).max(1e-12);
    let axis = x0 + 200 + half as usize;
    writeln!(svg, r#"<text x="{x0}" y="{}" font-size="12">{}</text>"#, y0 + 12, escape(title)).unwrap();
    for (k, (name, v)) in bars.iter().enumerate() {
        let y = y0 + 20 + k * row_h;
        let w = v.abs() / max * half;
        let x = if *v >= 0.0 { axis as f64 } else { axis as f64 - w };
        let fill = if *v >= 0.0 { "#c0392b" } else { "#2e86c1" };
        writeln!(
            svg,
            r#"<text x="{x0}" y="{}" font-size="10">{}</text><rect x="{x:.2}" y="{y}" width="{w:.2}" height="{}" fill="{fill}"/><text x="{}" y="{}" font-size="9">{v:.4}</text>"#,
            y + 11,
            escape(name),
            row_h - 4,
            axis as f64 + half + 6.0,
            y + 11
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<line x1=\"{axis}\" y1=\"{}\" x2=\"{axis}\" y2=\"{}\" stroke=\"#333\"/>",
        y0 + 18,
        y0 + 20 + bars.len() * row_h
    )
    .unwrap();
    20 + bars.len() * row_h
}

/// Attention heatmap with top-K cells outlined, plus the contribution
/// bar chart sorted by `|κ|`.
pub fn render_local_svg(e: &LocalExplanation) -> String {
    let g = &e.attention_grid;
    let values: Vec<f64> = g.cells.iter().flatten().flatten().cloned().collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let grid_w = g.cols * CELL;
    let mut bars: Vec<(String, f64)> = e.contributions.iter().map(|c| (c.concept.clone(), c.kappa)).collect();
    bars.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
    bars.push(("bias".into(), e.bias));
    let chart_x = grid_w + 30;
    let width = chart_x + 580;
    let height = (g.rows * CELL).max(40 + bars.len() * 16) + 60;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="10" y="16" font-size="13">{} prediction {:.4} ({})</text>"#,
        escape(&e.slide_id),
        e.prediction,
        escape(&e.decision)
    )
    .unwrap();
    let top = 30;
    for (r, row) in g.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let fill = match cell {
                Some(a) if hi > lo => ramp((a - lo) / (hi - lo)),
                Some(_) => ramp(0.0),
                None => "#ffffff".to_string(),
            };
            writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}"/>"#,
                10 + c * CELL,
                top + r * CELL
            )
            .unwrap();
        }
    }
    for p in &e.topk {
        writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"none\" stroke=\"#ff2d55\" stroke-width=\"2\"/>",
            10 + p.col as usize * CELL,
            top + p.row as usize * CELL
        )
        .unwrap();
    }
    bar_chart(&mut s, chart_x, top, "concept contributions", &bars);
    s.push_str("</svg>\n");
    s
}

/// Which label partitions slides in global explanations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    #[default]
    Predicted,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    Pca,
    #[default]
    Tsne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    /// Defaults to `min(30, ⌊(n−1)/3⌋)`.
    pub perplexity: Option<f64>,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: None,
            iterations: 500,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalOptions {
    pub group_by: GroupBy,
    pub projection: ProjectionMethod,
    pub tsne: TsneConfig,
}

/// Per-slide quantities the global views are built from.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideSummary {
    pub slide_id: String,
    pub label: u8,
    pub predicted: u8,
    pub kappa: Vec<f64>,
    /// `Σ_j f_jc·β_c` per concept.
    pub wsi_values: Vec<f64>,
    /// `K×C` concept vectors of the selected patches.
    pub patch_vectors: Tensor,
}

impl SlideSummary {
    pub fn new(pred: &Prediction, label: u8) -> Self {
        let a = &pred.concept;
        Self {
            slide_id: pred.slide_id.clone(),
            label,
            predicted: u8::from(pred.is_positive()),
            kappa: pred.contributions.kappa.clone(),
            wsi_values: a
                .concept_sums
                .iter()
                .zip(&a.attention.gated)
                .map(|(s, b)| s * b)
                .collect(),
            patch_vectors: pred.f_topk.clone(),
        }
    }

    pub fn group(&self, by: GroupBy) -> u8 {
        match by {
            GroupBy::Predicted => self.predicted,
            GroupBy::GroundTruth => self.label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub slides: usize,
    pub mean_contributions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDistribution {
    pub concept: String,
    pub normal: Vec<f64>,
    pub tumor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalExplanation {
    pub schema_version: u32,
    pub group_by: GroupBy,
    pub projection: ProjectionMethod,
    pub concepts: Vec<String>,
    pub classes: Vec<ClassSummary>,
    pub distributions: Vec<ConceptDistribution>,
    pub patch_points: PointSet,
    pub wsi_points: PointSet,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// Patch-level and WSI-level point clouds with their group labels.
pub fn point_clouds(slides: &[SlideSummary], by: GroupBy) -> Result<((Tensor, Vec<u8>), (Tensor, Vec<u8>))> {
    let mut patch_rows = Vec::new();
    let mut patch_labels = Vec::new();
    for s in slides {
        for j in 0..s.patch_vectors.rows() {
            patch_rows.push(s.patch_vectors.row(j).to_vec());
            patch_labels.push(s.group(by));
        }
    }
    let wsi_rows: Vec<Vec<f64>> = slides.iter().map(|s| s.wsi_values.clone()).collect();
    let wsi_labels = slides.iter().map(|s| s.group(by)).collect();
    Ok((
        (Tensor::from_rows(&patch_rows)?, patch_labels),
        (Tensor::from_rows(&wsi_rows)?, wsi_labels),
    ))
}

pub fn global_from_summaries(
    slides: &[SlideSummary],
    concepts: &[String],
    opts: &GlobalOptions,
) -> Result<GlobalExplanation> {
    let c = concepts.len();
    let mut classes = Vec::new();
    for label in [0u8, 1] {
        let members: Vec<&SlideSummary> = slides.iter().filter(|s| s.group(opts.group_by) == label).collect();
        if members.len() < 2 {
            return Err(Error::Dataset(format!(
                "class {} has {} slide(s) under {} grouping; need at least 2",
                class_name(label),
                members.len(),
                match opts.group_by {
                    GroupBy::Predicted => "predicted",
                    GroupBy::GroundTruth => "ground-truth",
                }
            )));
        }
        let mut mean = vec![0.0; c];
        for s in &members {
            for (m, k) in mean.iter_mut().zip(&s.kappa) {
                *m += k;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        classes.push(ClassSummary {
            class: class_name(label).to_string(),
            slides: members.len(),
            mean_contributions: mean,
        });
    }
    let distributions = concepts
        .iter()
        .enumerate()
        .map(|(ci, name)| {
            let pick = |l: u8| {
                slides
                    .iter()
                    .filter(|s| s.group(opts.group_by) == l)
                    .map(|s| s.wsi_values[ci])
                    .collect()
            };
            ConceptDistribution {
                concept: name.clone(),
                normal: pick(0),
                tumor: pick(1),
            }
        })
        .collect();
    let ((patch, patch_labels), (wsi, wsi_labels)) = point_clouds(slides, opts.group_by)?;
    let to_points = |t: Tensor| -> Vec<[f64; 2]> { (0..t.rows()).map(|i| [t.at(i, 0), t.at(i, 1)]).collect() };
    Ok(GlobalExplanation {
        schema_version: SCHEMA_VERSION,
        group_by: opts.group_by,
        projection: opts.projection,
        concepts: concepts.to_vec(),
        classes,
        distributions,
        patch_points: PointSet {
            points: to_points(project_2d(&patch, opts.projection, &opts.tsne)?),
            labels: patch_labels,
        },
        wsi_points: PointSet {
            points: to_points(project_2d(&wsi, opts.projection, &opts.tsne)?),
            labels: wsi_labels,
        },
        provenance: BTreeMap::new(),
    })
}

pub fn summarize(model: &ConceptMil, bags: &[Bag]) -> Result<Vec<SlideSummary>> {
    bags.par_iter()
        .map(|b| Ok(SlideSummary::new(&model.predict(b)?, b.label)))
        .collect()
}

pub fn global_explanations(model: &ConceptMil, bags: &[Bag], opts: &GlobalOptions) -> Result<GlobalExplanation> {
    let slides = summarize(model, bags)?;
    global_from_summaries(&slides, &model.concepts.names, opts)
}

fn scatter(svg: &mut String, x0: usize, y0: usize, size: usize, title: &str, set: &PointSet) {
    writeln!(svg, r#"<text x="{x0}" y="{}" font-size="12">{}</text>"#, y0 - 4, escape(title)).unwrap();
    writeln!(
        svg,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"#999\"/>"
    )
    .unwrap();
    let xs = set.points.iter().map(|p| p[0]);
    let ys = set.points.iter().map(|p| p[1]);
    let (xl, xh) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (yl, yh) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let span = |l: f64, h: f64| if h > l { h - l } else { 1.0 };
    let pad = 8.0;
    let inner = size as f64 - 2.0 * pad;
    for (p, &l) in set.points.iter().zip(&set.labels) {
        let x = x0 as f64 + pad + (p[0] - xl) / span(xl, xh) * inner;
        let y = y0 as f64 + pad + (1.0 - (p[1] - yl) / span(yl, yh)) * inner;
        let fill = if l == 1 { "#c0392b" } else { "#2e86c1" };
        writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{fill}" fill-opacity="0.7"/>"#).unwrap();
    }
}

pub fn render_global_svg(g: &GlobalExplanation) -> String {
    let c = g.concepts.len();
    let chart_h = 20 + c * 16;
    let size = 260;
    let width = 2 * 620;
    let height = chart_h + size + 90;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    for (k, class) in g.classes.iter().enumerate() {
        let bars: Vec<(String, f64)> = g
            .concepts
            .iter()
            .cloned()
            .zip(class.mean_contributions.iter().cloned())
            .collect();
        let title = format!("mean contributions, {} ({} slides)", class.class, class.slides);
        bar_chart(&mut s, 10 + k * 620, 10, &title, &bars);
    }
    let y = chart_h + 50;
    scatter(&mut s, 10, y, size, "patch level", &g.patch_points);
    scatter(&mut s, 30 + size, y, size, "slide level", &g.wsi_points);
    s.push_str("</svg>\n");
    s
}

/// 2-D projection by PCA or exact t-SNE.
pub fn project_2d(points: &Tensor, method: ProjectionMethod, tsne_cfg: &TsneConfig) -> Result<Tensor> {
    match method {
        ProjectionMethod::Pca => pca_2d(points),
        ProjectionMethod::Tsne => Ok(tsne(points, tsne_cfg)?.embedding),
    }
}

fn check_points(points: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = points.require_matrix("projection input")?;
    if n < 3 {
        return Err(Error::InvalidArgument(format!("projection needs at least 3 points, got {n}")));
    }
    points.check_finite("projection input")?;
    let first = points.row(0);
    if (1..n).all(|i| points.row(i) == first) {
        return Err(Error::Degenerate("all points are identical".into()));
    }
    Ok((n, d))
}

/// Top-2 principal components; each axis is signed so its largest-magnitude
/// loading is positive.
pub fn pca_2d(points: &Tensor) -> Result<Tensor> {
    let (n, d) = check_points(points)?;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(points.row(i)) {
            *m += x / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| points.at(i, j) - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; n * 2];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i * 2 + axis] = sign * (0..d).map(|j| centred[(i, j)] * v[j]).sum::<f64>();
        }
    }
    Tensor::matrix(n, 2, out)
}

fn squared_distances(points: &Tensor) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.log2()).sum::<f64>()
}

/// Row-conditional Gaussian affinities `p_{j|i}` whose entropy matches
/// `log2(perplexity)`, found by bisection on the precision.
pub fn conditional_probabilities(dist2: &[Vec<f64>], perplexity: f64) -> Result<Vec<Vec<f64>>> {
    let n = dist2.len();
    if !(perplexity > 0.0) {
        return Err(Error::InvalidArgument("perplexity must be positive".into()));
    }
    let target = perplexity.log2();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let dmin = (0..n).filter(|&j| j != i).map(|j| dist2[i][j]).fold(f64::INFINITY, f64::min);
        let row = |beta: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n)
                .map(|j| if j == i { 0.0 } else { (-(dist2[i][j] - dmin) * beta).exp() })
                .collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            p
        };
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut beta = 1.0;
        let mut p = row(beta);
        for _ in 0..200 {
            let h = entropy_bits(&p);
            if (h - target).abs() < 1e-10 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            p = row(beta);
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub embedding: Tensor,
    /// KL(P‖Q) before each update, against unexaggerated `P`.
    pub kl_trace: Vec<f64>,
    pub perplexity: f64,
}

pub fn default_perplexity(n: usize) -> f64 {
    (((n - 1) / 3) as f64).min(30.0)
}

/// KL(P‖Q) and its gradient in `y`, with `P` scaled by `exag` in the
/// gradient only.
fn kl_gradient(p: &[Vec<f64>], y: &[[f64; 2]], exag: f64) -> (f64, Vec<[f64; 2]>) {
    let n = y.len();
    let mut num = vec![vec![0.0; n]; n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let q = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i][j] = q;
            num[j][i] = q;
            z += 2.0 * q;
        }
    }
    let mut kl = 0.0;
    let mut grad = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let q = (num[i][j] / z).max(1e-12);
            kl += p[i][j] * (p[i][j] / q).ln();
            let m = 4.0 * (exag * p[i][j] - q) * num[i][j];
            grad[i][0] += m * (y[i][0] - y[j][0]);
            grad[i][1] += m * (y[i][1] - y[j][1]);
        }
    }
    (kl, grad)
}

/// Exact symmetric t-SNE.
pub fn tsne(points: &Tensor, cfg: &TsneConfig) -> Result<TsneResult> {
    let (n, _) = check_points(points)?;
    let perplexity = cfg.perplexity.unwrap_or_else(|| default_perplexity(n));
    if !(perplexity >= 1.0 && perplexity <= (n - 1) as f64 / 3.0) {
        return Err(Error::InvalidArgument(format!(
            "perplexity {perplexity} outside [1, (n-1)/3] for {n} points"
        )));
    }
    let cond = conditional_probabilities(&squared_distances(points), perplexity)?;
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    let mut rng = stream_rng(cfg.seed, stream_id(&[20]));
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch { cfg.momentum_initial } else { cfg.momentum_final };
        let (kl, grad) = kl_gradient(&p, &y, exag);
        kl_trace.push(kl);
        for (i, g) in grad.iter().enumerate() {
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let cx = y.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|v| v[1]).sum::<f64>() / n as f64;
        for v in &mut y {
            v[0] -= cx;
            v[1] -= cy;
        }
    }
    let data = y.iter().flat_map(|v| v.iter().cloned()).collect();
    Ok(TsneResult {
        embedding: Tensor::matrix(n, 2, data)?,
        kl_trace,
        perplexity,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchHit {
    pub slide_id: String,
    pub patch: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptAudit {
    pub concept: String,
    pub patches: Vec<PatchHit>,
}

/// For each concept, the `m` patches with the highest activation. Ties go to
/// the smaller `(slide_id, patch)`.
pub fn top_patches_per_concept(
    slides: &[(String, Tensor)],
    concepts: &[String],
    m: usize,
) -> Result<Vec<ConceptAudit>> {
    for (id, acts) in slides {
        let (_, c) = acts.require_matrix("activations")?;
        if c != concepts.len() {
            return Err(Error::Shape(format!(
                "slide {id} has {c} concept columns, expected {}",
                concepts.len()
            )));
        }
    }
    Ok(concepts
        .iter()
        .enumerate()
        .map(|(ci, name)| {
            let mut hits: Vec<PatchHit> = slides
                .iter()
                .flat_map(|(id, acts)| {
                    (0..acts.rows()).map(move |p| PatchHit {
                        slide_id: id.clone(),
                        patch: p,
                        score: acts.at(p, ci),
                    })
                })
                .collect();
            hits.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.slide_id.cmp(&b.slide_id))
                    .then(a.patch.cmp(&b.patch))
            });
            hits.truncate(m);
            ConceptAudit {
                concept: name.clone(),
                patches: hits,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::silhouette;
    use crate::model::ModelConfig;
    use crate::synth::{gen_bag, gen_concepts, SynthConfig};

    fn model_and_bags() -> (ConceptMil, Vec<Bag>) {
        let cfg = SynthConfig {
            n_range: [12, 20],
            dim: 8,
            num_concepts: 5,
            tumor_concept_count: 2,
            ..SynthConfig::default()
        };
        let concepts = gen_concepts(&cfg).unwrap();
        let bags = (0..6)
            .map(|i| {
                gen_bag(&cfg, &concepts, &mut stream_rng(3, i), format!("s{i}"), Some((i % 2) as u8)).unwrap()
            })
            .collect();
        let mc = ModelConfig {
            hidden_dim: 6,
            attention_dim: 4,
            concept_attention_dim: 3,
            ..ModelConfig::default()
        };
        (ConceptMil::init(mc, concepts, 4, &mut stream_rng(2, 0)).unwrap(), bags)
    }

    #[test]
    fn local_report_is_consistent() {
        let (model, bags) = model_and_bags();
        for bag in &bags {
            let pred = model.predict(bag).unwrap();
            let e = explain_prediction(bag, &model, &pred).unwrap();
            assert_eq!(e.topk.len(), 4);
            let back: LocalExplanation = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
            assert!((crate::autodiff::sigmoid(back.logit()) - back.prediction).abs() < 1e-12);
            for (p, a) in bag.patches.iter().zip(&pred.alpha) {
                assert_eq!(e.attention_grid.cells[p.row as usize][p.col as usize], Some(*a));
            }
            let svg = render_local_svg(&e);
            assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
            assert_eq!(svg.matches("stroke=\"#ff2d55\"").count(), 4);
        }
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), VIRIDIS[0]);
        assert_eq!(ramp(1.0), VIRIDIS[7]);
        assert_eq!(ramp(f64::NAN), VIRIDIS[0]);
    }

    fn summary(label: u8, kappa: Vec<f64>) -> SlideSummary {
        SlideSummary {
            slide_id: "s".into(),
            label,
            predicted: label,
            wsi_values: kappa.clone(),
            kappa,
            patch_vectors: Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.1]]).unwrap(),
        }
    }

    #[test]
    fn global_needs_two_slides_per_class() {
        let names = vec!["a".to_string(), "b".to_string()];
        let slides = vec![summary(0, vec![0.1, 0.2]), summary(0, vec![0.3, 0.1]), summary(1, vec![1.0, 0.0])];
        let opts = GlobalOptions {
            projection: ProjectionMethod::Pca,
            ..GlobalOptions::default()
        };
        let err = global_from_summaries(&slides, &names, &opts).unwrap_err().to_string();
        assert!(err.contains("tumor"), "{err}");
    }

    #[test]
    fn identical_slides_have_identical_kappa() {
        let (model, bags) = model_and_bags();
        let a = SlideSummary::new(&model.predict(&bags[1]).unwrap(), 1);
        let b = SlideSummary::new(&model.predict(&bags[1]).unwrap(), 1);
        assert_eq!(a.kappa, b.kappa);
    }

    #[test]
    fn global_report_shapes() {
        let names = vec!["a".to_string(), "b".to_string()];
        let slides = vec![
            summary(0, vec![0.1, 0.2]),
            summary(0, vec![0.3, 0.1]),
            summary(1, vec![1.0, 0.0]),
            summary(1, vec![0.8, 0.4]),
        ];
        let opts = GlobalOptions {
            projection: ProjectionMethod::Pca,
            ..GlobalOptions::default()
        };
        let g = global_from_summaries(&slides, &names, &opts).unwrap();
        assert_eq!(g.classes[1].mean_contributions, vec![0.9, 0.2]);
        assert_eq!(g.classes[0].slides + g.classes[1].slides, 4);
        assert_eq!(g.patch_points.points.len(), 8);
        assert_eq!(g.distributions[0].tumor, vec![1.0, 0.8]);
        assert!(render_global_svg(&g).contains("slide level"));
    }

    #[test]
    fn pca_on_planar_points_preserves_distances() {
        let pts = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 2.0],
            vec![3.0, -1.0],
            vec![-2.0, 0.5],
            vec![0.7, 0.7],
        ])
        .unwrap();
        let y = pca_2d(&pts).unwrap();
        let d0 = squared_distances(&pts);
        let d1 = squared_distances(&y);
        for i in 0..5 {
            for j in 0..5 {
                assert!((d0[i][j].sqrt() - d1[i][j].sqrt()).abs() < 1e-9);
            }
        }
        assert_eq!(pca_2d(&pts).unwrap(), y);
        let same = Tensor::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert!(matches!(pca_2d(&same), Err(Error::Degenerate(_))));
        assert!(pca_2d(&Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn equidistant_points_give_uniform_rows() {
        // regular simplex: the standard basis of R^5
        let d = squared_distances(&Tensor::identity(5));
        let p = conditional_probabilities(&d, 2.0).unwrap();
        for (i, row) in p.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let expected = if i == j { 0.0 } else { 0.25 };
                assert!((x - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn calibrated_entropy_matches_perplexity() {
        let mut rng = stream_rng(7, 7);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let d = squared_distances(&Tensor::from_rows(&rows).unwrap());
        for row in conditional_probabilities(&d, 5.0).unwrap() {
            assert!((entropy_bits(&row) - 5f64.log2()).abs() < 1e-5);
        }
    }

    fn two_clusters(seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = stream_rng(seed, 8);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let c = if i < 15 { 0.0 } else { 1.5 };
            rows.push((0..5).map(|_| c + rng.random_range(-1.0..1.0)).collect());
            labels.push(usize::from(i >= 15));
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn tsne_settles_and_separates() {
        for seed in 0..5 {
            let (pts, labels) = two_clusters(seed);
            let r = tsne(&pts, &TsneConfig::default()).unwrap();
            let tail = &r.kl_trace[r.kl_trace.len() - 100..];
            for w in tail.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {} -> {}", w[0], w[1]);
            }
            let before = silhouette(&pts, &labels).unwrap();
            let after = silhouette(&r.embedding, &labels).unwrap();
            assert!(after > before, "seed {seed}: {before} -> {after}");
            assert_eq!(r.perplexity, 9.0);
            assert_eq!(tsne(&pts, &TsneConfig::default()).unwrap(), r);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let (pts, _) = two_clusters(0);
        let n = pts.rows();
        let cond = conditional_probabilities(&squared_distances(&pts), 5.0).unwrap();
        let p: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { (cond[i][j] + cond[j][i]) / (2.0 * n as f64) }).collect())
            .collect();
        let mut rng = stream_rng(9, 9);
        let y: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let (_, g) = kl_gradient(&p, &y, 1.0);
        for i in [0, 7, 29] {
            for k in 0..2 {
                let mut a = y.clone();
                let mut b = y.clone();
                a[i][k] += 1e-6;
                b[i][k] -= 1e-6;
                let fd = (kl_gradient(&p, &a, 1.0).0 - kl_gradient(&p, &b, 1.0).0) / 2e-6;
                assert!((fd - g[i][k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i][k]);
            }
        }
    }

    #[test]
    fn tsne_rejects_large_perplexity() {
        let (pts, _) = two_clusters(0);
        let cfg = TsneConfig {
            perplexity: Some(10.0),
            ..TsneConfig::default()
        };
        assert!(matches!(tsne(&pts, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn audit_ordering() {
        let a = Tensor::from_rows(&[vec![0.5, 0.1], vec![0.9, 0.2]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.9, 0.3]]).unwrap();
        let slides = vec![("b".to_string(), b), ("a".to_string(), a)];
        let names = vec!["x".to_string(), "y".to_string()];
        let r = top_patches_per_concept(&slides, &names, 10).unwrap();
        let order: Vec<(&str, usize)> = r[0].patches.iter().map(|h| (h.slide_id.as_str(), h.patch)).collect();
        assert_eq!(order, vec![("a", 1), ("b", 0), ("a", 0)]);
        assert_eq!(r[1].patches.len(), 3);
        assert_eq!(top_patches_per_concept(&slides, &names, 1).unwrap()[1].patches[0].score, 0.3);
    }
}
