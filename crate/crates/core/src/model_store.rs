//! Weight blocks and the model container.
//!
//! A model on disk is a pair of files: `<name>.manifest`, a TOML document
//! listing the blocks, and `<name>.blob`, the concatenated little-endian
//! `f32` payloads at the offsets the manifest records.
//!
//! ```toml
//! format_version = 1
//! endianness = "little"
//!
//! [[blocks]]
//! id = "fc1.weight"
//! shape = [16, 8]
//! kind = "dense-matrix"
//! offset = 0
//! length = 512
//! group_size = 64
//! ```
//!
//! Toy networks add `[[layers]]` entries naming their weight and bias blocks.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_GROUP_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// `rows × cols` matrix stored row-major; rows are output channels.
    DenseMatrix { rows: usize, cols: usize },
    /// Convolution filter; the first shape axis is the output channel.
    ConvFilter,
    GenericVector,
}

impl BlockKind {
    pub fn tag(&self) -> &'static str {
        match self {
            BlockKind::DenseMatrix { .. } => "dense-matrix",
            BlockKind::ConvFilter => "conv-filter",
            BlockKind::GenericVector => "generic-vector",
        }
    }

    pub fn from_tag(tag: &str, shape: &[usize]) -> std::result::Result<Self, String> {
        match tag {
            "dense-matrix" => match shape {
                [rows, cols] => Ok(BlockKind::DenseMatrix {
                    rows: *rows,
                    cols: *cols,
                }),
                _ => Err(format!("dense-matrix needs a rank-2 shape, got {shape:?}")),
            },
            "conv-filter" if shape.len() >= 2 => Ok(BlockKind::ConvFilter),
            "conv-filter" => Err(format!("conv-filter needs rank >= 2, got {shape:?}")),
            "generic-vector" => Ok(BlockKind::GenericVector),
            other => Err(format!("unknown block kind {other:?}")),
        }
    }
}

/// A named, contiguous slice of model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub id: String,
    pub values: Vec<f32>,
    pub shape: Vec<usize>,
    pub kind: BlockKind,
    /// Scale-group granularity used at export.
    pub group_size: usize,
}

impl WeightBlock {
    pub fn new(id: impl Into<String>, values: Vec<f32>, shape: Vec<usize>, kind: BlockKind) -> Result<Self> {
        let b = WeightBlock {
            id: id.into(),
            values,
            shape,
            kind,
            group_size: DEFAULT_GROUP_SIZE,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn dense(id: impl Into<String>, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(id, values, vec![rows, cols], BlockKind::DenseMatrix { rows, cols })
    }

    pub fn vector(id: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        let n = values.len();
        Self::new(id, values, vec![n], BlockKind::GenericVector)
    }

    pub fn with_group_size(mut self, group_size: usize) -> Result<Self> {
        self.group_size = group_size;
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Error::InvalidBlock {
            id: self.id.clone(),
            msg,
        };
        if self.values.is_empty() {
            return Err(invalid("block has no weights".into()));
        }
        if self.shape.is_empty() || self.shape.iter().any(|&s| s == 0) {
            return Err(invalid(format!("shape {:?} must be non-empty and positive", self.shape)));
        }
        let prod: usize = self.shape.iter().product();
        if prod != self.values.len() {
            return Err(invalid(format!(
                "shape {:?} has {prod} elements but block holds {}",
                self.shape,
                self.values.len()
            )));
        }
        if let BlockKind::DenseMatrix { rows, cols } = self.kind {
            if self.shape != [rows, cols] {
                return Err(invalid(format!("dense-matrix({rows},{cols}) disagrees with shape {:?}", self.shape)));
            }
        }
        if self.kind == BlockKind::ConvFilter && self.shape.len() < 2 {
            return Err(invalid("conv-filter needs rank >= 2".into()));
        }
        if self.group_size == 0 {
            return Err(invalid("group_size must be >= 1".into()));
        }
        if let Some(index) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                id: self.id.clone(),
                index,
            });
        }
        Ok(())
    }

    /// Number of channels under the first-axis convention, if the kind has one.
    pub fn channels(&self) -> Option<usize> {
        match self.kind {
            BlockKind::DenseMatrix { rows, .. } => Some(rows),
            BlockKind::ConvFilter => Some(self.shape[0]),
            BlockKind::GenericVector => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionPolicy {
    PerTensor,
    PerChannel,
    FixedSize(usize),
}

/// Splits a block into sub-blocks that cover it exactly once, in order.
///
/// Sub-block ids are `<parent>/<index>`. Fixed-size partitions keep a ragged
/// final sub-block; per-channel splits along the first shape axis.
pub fn partition(block: &WeightBlock, policy: PartitionPolicy) -> Result<Vec<WeightBlock>> {
    let child = |i: usize, values: &[f32], shape: Vec<usize>, kind: BlockKind| WeightBlock {
        id: format!("{}/{i}", block.id),
        values: values.to_vec(),
        shape,
        kind,
        group_size: block.group_size,
    };
    match policy {
        PartitionPolicy::PerTensor => Ok(vec![block.clone()]),
        PartitionPolicy::FixedSize(0) => Err(Error::invalid("fixed-size partition needs n >= 1")),
        PartitionPolicy::FixedSize(n) => Ok(block
            .values
            .chunks(n)
            .enumerate()
            .map(|(i, c)| child(i, c, vec![c.len()], BlockKind::GenericVector))
            .collect()),
        PartitionPolicy::PerChannel => {
            let channels = block.channels().ok_or_else(|| Error::InvalidBlock {
                id: block.id.clone(),
                msg: "per-channel partition needs a channel axis (generic-vector has none)".into(),
            })?;
            let per = block.values.len() / channels;
            let rest: Vec<usize> = block.shape[1..].to_vec();
            Ok(block
                .values
                .chunks(per)
                .enumerate()
                .map(|(i, c)| match block.kind {
                    BlockKind::DenseMatrix { cols, .. } => {
                        child(i, c, vec![1, cols], BlockKind::DenseMatrix { rows: 1, cols })
                    }
                    BlockKind::ConvFilter if rest.len() >= 2 => child(i, c, rest.clone(), BlockKind::ConvFilter),
                    _ => child(i, c, vec![c.len()], BlockKind::GenericVector),
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDescriptor {
    pub id: String,
    pub shape: Vec<usize>,
    pub kind: String,
    pub offset: u64,
    pub length: u64,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
}

fn default_group_size() -> usize {
    DEFAULT_GROUP_SIZE
}

/// Topology entry for toy networks stored in the container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub weight: String,
    pub bias: String,
    pub activation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub endianness: String,
    #[serde(default)]
    pub blocks: Vec<BlockDescriptor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSpec>,
}

impl ModelManifest {
    /// Lays blocks out back to back in the order given.
    pub fn from_blocks(blocks: &[WeightBlock]) -> Self {
        let mut offset = 0u64;
        let blocks = blocks
            .iter()
            .map(|b| {
                let length = 4 * b.values.len() as u64;
                let d = BlockDescriptor {
                    id: b.id.clone(),
                    shape: b.shape.clone(),
                    kind: b.kind.tag().to_string(),
                    offset,
                    length,
                    group_size: b.group_size,
                };
                offset += length;
                d
            })
            .collect();
        ModelManifest {
            format_version: FORMAT_VERSION,
            endianness: "little".into(),
            blocks,
            layers: Vec::new(),
        }
    }
}

// Raw form used for parsing so ids keep their byte spans for error reports.
#[derive(Deserialize)]
struct RawManifest {
    format_version: u32,
    endianness: String,
    #[serde(default)]
    blocks: Vec<RawDescriptor>,
    #[serde(default)]
    layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
struct RawDescriptor {
    id: toml::Spanned<String>,
    shape: Vec<usize>,
    kind: String,
    offset: u64,
    length: u64,
    #[serde(default = "default_group_size")]
    group_size: usize,
}

/// `(manifest path, blob path)` for a model name or either file of the pair.
pub fn model_paths(path: &Path) -> (PathBuf, PathBuf) {
    match path.extension().and_then(|e| e.to_str()) {
        Some("manifest") | Some("blob") => (path.with_extension("manifest"), path.with_extension("blob")),
        _ => {
            let s = path.as_os_str().to_owned();
            let mut m = s.clone();
            m.push(".manifest");
            let mut b = s;
            b.push(".blob");
            (PathBuf::from(m), PathBuf::from(b))
        }
    }
}

pub fn load_model(path: &Path) -> Result<(ModelManifest, Vec<WeightBlock>)> {
    let (mpath, bpath) = model_paths(path);
    let text = fs::read_to_string(&mpath)?;
    let manifest_err = |msg: String, position: usize| Error::Manifest {
        path: mpath.clone(),
        msg,
        position,
    };
    let raw: RawManifest = toml::from_str(&text).map_err(|e| {
        let pos = e.span().map(|s| s.start).unwrap_or(0);
        manifest_err(e.message().to_string(), pos)
    })?;
    if raw.format_version != FORMAT_VERSION {
        return Err(manifest_err(format!("unsupported format_version {}", raw.format_version), 0));
    }
    if raw.endianness != "little" {
        return Err(manifest_err(format!("unsupported endianness {:?}", raw.endianness), 0));
    }
    let blob = fs::read(&bpath)?;
    let mut seen = HashSet::new();
    let mut descriptors = Vec::with_capacity(raw.blocks.len());
    let mut blocks = Vec::with_capacity(raw.blocks.len());
    let mut extents: Vec<(u64, u64, String)> = Vec::new();
    for (index, rd) in raw.blocks.into_iter().enumerate() {
        let position = rd.id.span().start;
        let id = rd.id.into_inner();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { id, index, position });
        }
        let kind = BlockKind::from_tag(&rd.kind, &rd.shape)
            .map_err(|m| manifest_err(format!("block {id}: {m}"), position))?;
        let d: usize = rd.shape.iter().product();
        if rd.length != 4 * d as u64 {
            return Err(manifest_err(
                format!("block {id}: length {} != 4 * {d} weights", rd.length),
                position,
            ));
        }
        let end = rd.offset + rd.length;
        if end > blob.len() as u64 {
            return Err(Error::TruncatedBlob {
                id,
                offset: rd.offset,
                end,
                available: blob.len() as u64,
            });
        }
        if let Some((_, _, other)) = extents.iter().find(|(s, e, _)| rd.offset < *e && *s < end) {
            return Err(manifest_err(format!("block {id} overlaps block {other}"), position));
        }
        extents.push((rd.offset, end, id.clone()));
        let values = blob[rd.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let block = WeightBlock {
            id: id.clone(),
            values,
            shape: rd.shape.clone(),
            kind,
            group_size: rd.group_size,
        };
        block.validate()?;
        descriptors.push(BlockDescriptor {
            id,
            shape: rd.shape,
            kind: rd.kind,
            offset: rd.offset,
            length: rd.length,
            group_size: rd.group_size,
        });
        blocks.push(block);
    }
    let manifest = ModelManifest {
        format_version: raw.format_version,
        endianness: raw.endianness,
        blocks: descriptors,
        layers: raw.layers,
    };
    Ok((manifest, blocks))
}

pub fn save_model(manifest: &ModelManifest, blocks: &[WeightBlock], path: &Path) -> Result<()> {
    if manifest.blocks.len() != blocks.len() {
        return Err(Error::invalid(format!(
            "manifest lists {} blocks but {} were given",
            manifest.blocks.len(),
            blocks.len()
        )));
    }
    let mut blob_len = 0u64;
    for (d, b) in manifest.blocks.iter().zip(blocks) {
        b.validate()?;
        if d.id != b.id || d.shape != b.shape || d.kind != b.kind.tag() || d.length != 4 * b.values.len() as u64 {
            return Err(Error::InvalidBlock {
                id: b.id.clone(),
                msg: "manifest descriptor does not match block".into(),
            });
        }
        blob_len = blob_len.max(d.offset + d.length);
    }
    let mut blob = vec![0u8; blob_len as usize];
    for (d, b) in manifest.blocks.iter().zip(blocks) {
        let dst = &mut blob[d.offset as usize..(d.offset + d.length) as usize];
        for (chunk, v) in dst.chunks_exact_mut(4).zip(&b.values) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
    }
    let text = toml::to_string(manifest).map_err(|e| Error::invalid(e.to_string()))?;
    let (mpath, bpath) = model_paths(path);
    fs::write(&bpath, blob)?;
    fs::write(&mpath, text)?;
    Ok(())
}
