//! Bags, concept sets, dataset splits and their on-disk formats.
//!
//! A bag is stored as a binary embedding blob plus a JSON sidecar with the
//! same basename:
//!
//! ```text
//! offset  size   field
//! 0       4      magic ("CMIL" for bags, "CCPT" for concept sets, "CACT" for activations)
//! 4       4      version, u32 LE (= 1)
//! 8       8      rows, u64 LE
//! 16      8      cols, u64 LE
//! 24      4·r·c  f32 LE values, row-major
//! ```
//!
//! Embeddings are promoted to `f64` in memory. The file length must match
//! the header exactly, and the header is checked against the file size
//! before anything is allocated.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BAG_MAGIC: [u8; 4] = *b"CMIL";
pub const CONCEPT_MAGIC: [u8; 4] = *b"CCPT";
pub const ACTIVATION_MAGIC: [u8; 4] = *b"CACT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const DEFAULT_EMBED_DIM: usize = 512;
pub const DEFAULT_PROMPT_TEMPLATE: &str = "an H&E image of {concept}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub row: u32,
    pub col: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_tumor: Option<bool>,
}

/// One slide: `N` patch embeddings with per-patch metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub label: u8,
    pub embeddings: Tensor,
    pub patches: Vec<PatchRecord>,
}

impl Bag {
    pub fn new(
        slide_id: String,
        label: u8,
        embeddings: Tensor,
        patches: Vec<PatchRecord>,
    ) -> Result<Self> {
        let bag = Self {
            slide_id,
            label,
            embeddings,
            patches,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// True when every patch carries a ground-truth flag.
    pub fn has_tumor_flags(&self) -> bool {
        self.patches.iter().all(|p| p.in_tumor.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _) = self.embeddings.require_matrix("bag embeddings")?;
        if n == 0 {
            return Err(Error::Dataset(format!("bag {} has no patches", self.slide_id)));
        }
        if n != self.patches.len() {
            return Err(Error::Shape(format!(
                "bag {}: {n} embedding rows but {} patch records",
                self.slide_id,
                self.patches.len()
            )));
        }
        if self.label > 1 {
            return Err(Error::Dataset(format!(
                "bag {}: label {} is not 0 or 1",
                self.slide_id, self.label
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for p in &self.patches {
            if !seen.insert((p.row, p.col)) {
                return Err(Error::Dataset(format!(
                    "bag {}: duplicate patch coordinate ({}, {})",
                    self.slide_id, p.row, p.col
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    pub names: Vec<String>,
    pub embeddings: Tensor,
    pub prompt_template: String,
}

impl ConceptSet {
    pub fn new(names: Vec<String>, embeddings: Tensor, prompt_template: String) -> Result<Self> {
        let set = Self {
            names,
            embeddings,
            prompt_template,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// The text prompt used to embed concept `i`.
    pub fn prompt(&self, i: usize) -> String {
        self.prompt_template.replace("{concept}", &self.names[i])
    }

    pub fn validate(&self) -> Result<()> {
        let (c, _) = self.embeddings.require_matrix("concept embeddings")?;
        if self.names.len() < 2 {
            return Err(Error::Dataset(format!(
                "concept set needs at least 2 concepts, got {}",
                self.names.len()
            )));
        }
        if c != self.names.len() {
            return Err(Error::Shape(format!(
                "{} concept names but {c} embedding rows",
                self.names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.names {
            if name.trim().is_empty() {
                return Err(Error::Dataset("empty concept name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Dataset(format!("duplicate concept name {name:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagManifest {
    slide_id: String,
    label: u8,
    patches: Vec<PatchRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptManifest {
    names: Vec<String>,
    #[serde(default = "default_template")]
    prompt_template: String,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

/// Path of the JSON sidecar belonging to a blob.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn encode_matrix(magic: [u8; 4], m: &Tensor) -> Result<Vec<u8>> {
    let (r, c) = m.require_matrix("encoded matrix")?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * r * c);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(r as u64).to_le_bytes());
    out.extend_from_slice(&(c as u64).to_le_bytes());
    for &x in m.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Reads a matrix blob, validating magic, version, size and finiteness.
pub fn read_matrix(path: &Path, magic: [u8; 4]) -> Result<Tensor> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut header = [0u8; HEADER_LEN];
    if file_len < HEADER_LEN as u64 {
        return Err(Error::format(
            path,
            format!("truncated header: {file_len} bytes"),
        ));
    }
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let (rows, cols) = parse_header(path, &header, magic)?;
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, format!("dimensions {rows}x{cols} overflow")))?;
    let expected = payload
        .checked_add(HEADER_LEN as u64)
        .ok_or_else(|| Error::format(path, "payload size overflows"))?;
    if file_len < expected {
        return Err(Error::format(
            path,
            format!("truncated payload: header declares {rows}x{cols} ({expected} bytes), file has {file_len}"),
        ));
    }
    if file_len > expected {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", file_len - expected),
        ));
    }
    let mut buf = vec![0u8; payload as usize];
    file.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::with_capacity((rows * cols) as usize);
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(Error::format(path, format!("non-finite value at element {i}")));
        }
        data.push(v as f64);
    }
    Tensor::matrix(rows as usize, cols as usize, data)
}

fn parse_header(path: &Path, header: &[u8; HEADER_LEN], magic: [u8; 4]) -> Result<(u64, u64)> {
    if header[0..4] != magic {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&header[0..4]),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("u32"));
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().expect("u64"));
    let cols = u64::from_le_bytes(header[16..24].try_into().expect("u64"));
    Ok((rows, cols))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, format!("invalid JSON: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Numeric(format!("cannot serialize {}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn write_bag(bag: &Bag, path: &Path) -> Result<()> {
    bag.validate()?;
    write_file(path, &encode_matrix(BAG_MAGIC, &bag.embeddings)?)?;
    write_json(
        &sidecar_path(path),
        &BagManifest {
            slide_id: bag.slide_id.clone(),
            label: bag.label,
            patches: bag.patches.clone(),
        },
    )
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    let manifest_path = sidecar_path(path);
    let manifest: BagManifest = read_json(&manifest_path)?;
    let embeddings = read_matrix(path, BAG_MAGIC)?;
    if embeddings.rows() != manifest.patches.len() {
        return Err(Error::Shape(format!(
            "{}: blob has {} rows but manifest lists {} patches",
            path.display(),
            embeddings.rows(),
            manifest.patches.len()
        )));
    }
    Bag::new(manifest.slide_id, manifest.label, embeddings, manifest.patches).map_err(|e| match e {
        Error::Dataset(reason) => Error::format(&manifest_path, reason),
        other => other,
    })
}

pub fn write_concepts(set: &ConceptSet, path: &Path) -> Result<()> {
    set.validate()?;
    write_file(path, &encode_matrix(CONCEPT_MAGIC, &set.embeddings)?)?;
    write_json(
        &sidecar_path(path),
        &ConceptManifest {
            names: set.names.clone(),
            prompt_template: set.prompt_template.clone(),
        },
    )
}

/// Reads a concept set; `expected_dim` checks the embedding width.
pub fn read_concepts(path: &Path, expected_dim: Option<usize>) -> Result<ConceptSet> {
    let manifest_path = sidecar_path(path);
    let manifest: ConceptManifest = read_json(&manifest_path)?;
    let embeddings = read_matrix(path, CONCEPT_MAGIC)?;
    if let Some(d) = expected_dim {
        if embeddings.cols() != d {
            return Err(Error::Shape(format!(
                "{}: concept dimension {} does not match configured {d}",
                path.display(),
                embeddings.cols()
            )));
        }
    }
    ConceptSet::new(manifest.names, embeddings, manifest.prompt_template).map_err(|e| match e {
        Error::Dataset(reason) => Error::format(&manifest_path, reason),
        other => other,
    })
}

pub fn write_activations(acts: &Tensor, path: &Path) -> Result<()> {
    write_file(path, &encode_matrix(ACTIVATION_MAGIC, acts)?)
}

pub fn read_activations(path: &Path) -> Result<Tensor> {
    read_matrix(path, ACTIVATION_MAGIC)
}

/// Bag file lists, relative to the split file's directory unless absolute.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetSplit {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn part(&self, which: SplitPart) -> Vec<PathBuf> {
        let list = match which {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        };
        list.iter().map(|p| self.resolve(p)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Val, SplitPart::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }
}

pub fn write_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    write_json(path, split)
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let mut split: DatasetSplit = read_json(path)?;
    split.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(split)
}

pub fn read_bags(paths: &[PathBuf]) -> Result<Vec<Bag>> {
    use rayon::prelude::*;
    paths.par_iter().map(|p| read_bag(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSummary {
    pub bags: usize,
    pub positives: usize,
    pub negatives: usize,
    pub patches: usize,
    pub with_tumor_flags: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dim: usize,
    pub train: PartSummary,
    pub val: PartSummary,
    pub test: PartSummary,
}

/// Loads every bag of a split and checks label, dimension and id consistency.
pub fn validate_dataset(split: &DatasetSplit) -> Result<DatasetReport> {
    let mut owner: HashMap<String, &'static str> = HashMap::new();
    let mut dim: Option<usize> = None;
    let mut summaries = Vec::new();
    for part in SplitPart::ALL {
        let bags = read_bags(&split.part(part))?;
        let mut s = PartSummary {
            bags: bags.len(),
            positives: 0,
            negatives: 0,
            patches: 0,
            with_tumor_flags: 0,
        };
        for bag in &bags {
            match dim {
                None => dim = Some(bag.dim()),
                Some(d) if d != bag.dim() => {
                    return Err(Error::Shape(format!(
                        "bag {} has dimension {}, dataset uses {d}",
                        bag.slide_id,
                        bag.dim()
                    )))
                }
                _ => {}
            }
            if let Some(prev) = owner.insert(bag.slide_id.clone(), part.name()) {
                return Err(Error::Dataset(format!(
                    "slide {} appears in both {prev} and {}",
                    bag.slide_id,
                    part.name()
                )));
            }
            if bag.label == 1 {
                s.positives += 1;
            } else {
                s.negatives += 1;
            }
            s.patches += bag.num_patches();
            if bag.has_tumor_flags() {
                s.with_tumor_flags += 1;
            }
        }
        summaries.push(s);
    }
    let test = summaries.pop().expect("three parts");
    let val = summaries.pop().expect("three parts");
    let train = summaries.pop().expect("three parts");
    Ok(DatasetReport {
        dim: dim.unwrap_or(0),
        train,
        val,
        test,
    })
}
