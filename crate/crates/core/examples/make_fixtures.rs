//! Regenerates the shipped concept-set fixtures. The embeddings are
//! orthonormal placeholders; real ones come from a pathology text encoder.
//!
//! cargo run --example make_fixtures -- crates/core/fixtures

use std::path::PathBuf;

use concept_mil::bagio::{write_concepts, ConceptSet, DEFAULT_EMBED_DIM};
use concept_mil::synth::{gen_concepts, SynthConfig};

const CAMELYON16: [&str; 13] = [
    "dense nuclei",
    "hyperchromatic nuclei",
    "disorganized cells",
    "tumor cells",
    "nuclear pleomorphism",
    "pale cytoplasm",
    "enlarged nuclei",
    "loose chromatin",
    "large nuclei",
    "necrotic areas",
    "apoptotic bodies",
    "cells in mitosis",
    "high nuclear-to-cytoplasmic ratio",
];

const PANDA: [&str; 14] = [
    "apoptotic cells",
    "cribriform pattern",
    "disruption of basal cell layer",
    "glandular growth pattern",
    "glands infiltrate stroma",
    "glomeruloid pattern",
    "neoplastic cells",
    "necrotic areas",
    "nuclear pleomorphism",
    "solid growth pattern",
    "very round glands",
    "disruption of glandular architecture",
    "prostate glands with poorly defined borders",
    "prostate glands are variable in size and shape",
];

fn main() -> concept_mil::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&dir).map_err(|e| concept_mil::Error::io(&dir, e))?;
    for (file, names, seed) in [("camelyon16.ccpt", &CAMELYON16[..], 16), ("panda.ccpt", &PANDA[..], 17)] {
        let base = gen_concepts(&SynthConfig {
            seed,
            dim: DEFAULT_EMBED_DIM,
            num_concepts: names.len(),
            tumor_concept_count: 1,
            ..SynthConfig::default()
        })?;
        let set = ConceptSet::new(
            names.iter().map(|s| s.to_string()).collect(),
            base.embeddings,
            base.prompt_template,
        )?;
        write_concepts(&set, &dir.join(file))?;
        println!("{} concepts -> {}", set.len(), dir.join(file).display());
    }
    Ok(())
}
