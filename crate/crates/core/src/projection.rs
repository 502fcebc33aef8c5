//! Cosine-similarity projection of patch embeddings onto a concept set.

use crate::bagio::ConceptSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MIN_NORM: f64 = 1e-12;

/// `N×C` cosine similarities between patches and concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptActivationMatrix {
    pub values: Tensor,
    pub names: Vec<String>,
}

pub fn l2_normalize_rows(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.require_matrix("l2_normalize_rows")?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = m.row(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= MIN_NORM {
            return Err(Error::Degenerate(format!("row {i} has zero norm")));
        }
        out.extend(row.iter().map(|x| x / norm));
    }
    Tensor::matrix(r, c, out)
}

/// Activations `⟨î_n, t̂_c⟩`, passed through without clipping.
pub fn project(embeddings: &Tensor, concepts: &ConceptSet) -> Result<ConceptActivationMatrix> {
    let (_, d) = embeddings.require_matrix("patch embeddings")?;
    if d != concepts.dim() {
        return Err(Error::Shape(format!(
            "patch dimension {d} does not match concept dimension {}",
            concepts.dim()
        )));
    }
    let patches = l2_normalize_rows(embeddings)?;
    let texts = l2_normalize_rows(&concepts.embeddings)?;
    let values = patches.matmul(&texts.transpose()?)?;
    // clamp rounding excursions just beyond ±1
    let values = values.map(|x| x.clamp(-1.0, 1.0));
    Ok(ConceptActivationMatrix {
        values,
        names: concepts.names.clone(),
    })
}
