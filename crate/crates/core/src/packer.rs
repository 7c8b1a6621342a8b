//! Storage accounting and the packed export format.
//!
//! Every cost is an exact integer bit count. A packed model is a pair of
//! files: `<name>.qmanifest` (TOML; floats as shortest round-trip decimal
//! strings) and `<name>.qblob` (packed index streams followed by raw
//! little-endian f32 passthrough tensors).
//!
//! Index streams are written LSB-first: index `i` occupies bits
//! `[i·w, (i+1)·w)` of the stream, where bit `k` is bit `k % 8` of byte
//! `k / 8`. The last byte is zero-padded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::{compile_to_affine, quantize_block, Codebook, CompiledAffine, LloydExport};
use crate::error::{Error, Result};
use crate::losstable::Designer;
use crate::model_store::{BlockKind, WeightBlock};
use crate::posterior::Whitener;

pub const PACKED_FORMAT_VERSION: u32 = 1;
/// Widest index a stream may hold.
pub const MAX_INDEX_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub b_scale: u32,
    pub b_zp: u32,
    pub b_code: u32,
    /// Fixed per-block descriptor (id hash, bit-width, designer, offsets).
    pub header_bits: u64,
    /// Index streams are padded to a multiple of this many bits.
    pub lane_bits: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            b_scale: 16,
            b_zp: 16,
            b_code: 16,
            header_bits: 64,
            lane_bits: 8,
        }
    }
}

impl CostModel {
    /// Only index bits are counted.
    pub fn payload_only() -> Self {
        CostModel {
            b_scale: 0,
            b_zp: 0,
            b_code: 0,
            header_bits: 0,
            lane_bits: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lane_bits == 0 {
            return Err(Error::invalid("lane width must be >= 1 bit"));
        }
        Ok(())
    }
}

/// Itemized bit cost of one block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    /// Scalar index bits, `N·m`.
    pub payload: u64,
    /// Vector-quantizer index bits.
    pub indices: u64,
    pub scales: u64,
    pub codebook: u64,
    pub headers: u64,
    pub padding: u64,
}

impl CostLedger {
    pub fn total(&self) -> u64 {
        self.payload + self.indices + self.scales + self.codebook + self.headers + self.padding
    }

    /// Bits of the packed index stream (payload or VQ indices, plus padding).
    pub fn stream_bits(&self) -> u64 {
        self.payload + self.indices + self.padding
    }
}

/// Bits per stored index for a block quantized at `m` bits per weight.
pub fn index_bits(m: u32, designer: Designer) -> u32 {
    match designer {
        Designer::LloydVector { dim } => m * dim as u32,
        _ => m,
    }
}

/// Exact storage cost `C_b(m)` of an `n`-weight block.
///
/// Scalar: `N·m` payload, `⌈N/g⌉(b_scale + b_zp)` scales, `K·b_code` for a
/// Lloyd LUT. Vector (tuples of `dim`): `⌈N/dim⌉·m·dim` index bits and a
/// `K·dim·b_code` codebook with `K = 2^{m·dim}`. Headers are fixed; padding
/// to the lane width comes last.
pub fn block_cost(n: usize, group_size: usize, m: u32, designer: Designer, cm: &CostModel) -> Result<CostLedger> {
    cm.validate()?;
    if m == 0 || group_size == 0 {
        return Err(Error::invalid("bit-width and group size must be >= 1"));
    }
    let n64 = n as u64;
    let groups = n.div_ceil(group_size) as u64;
    let mut ledger = CostLedger {
        scales: groups * (cm.b_scale as u64 + cm.b_zp as u64),
        headers: cm.header_bits,
        ..CostLedger::default()
    };
    match designer {
        Designer::Uniform => ledger.payload = n64 * m as u64,
        Designer::LloydScalar => {
            ledger.payload = n64 * m as u64;
            ledger.codebook = (1u64 << m) * cm.b_code as u64;
        }
        Designer::LloydVector { dim } => {
            let w = index_bits(m, designer);
            if w > MAX_INDEX_BITS || w >= 63 {
                return Err(Error::invalid(format!("vector index of {w} bits is too wide")));
            }
            ledger.indices = n.div_ceil(dim) as u64 * w as u64;
            ledger.codebook = (1u64 << w) * dim as u64 * cm.b_code as u64;
        }
    }
    let lane = cm.lane_bits as u64;
    let stream = ledger.payload + ledger.indices;
    ledger.padding = (lane - stream % lane) % lane;
    Ok(ledger)
}

/// `m̄ = C_tot / N_total`.
pub fn average_bits(ledgers: &[CostLedger], n_total: u64) -> Result<f64> {
    if n_total == 0 {
        return Err(Error::invalid("average bits need a positive weight count"));
    }
    Ok(ledgers.iter().map(CostLedger::total).sum::<u64>() as f64 / n_total as f64)
}

/// Packs `indices` at `width` bits each, LSB-first.
pub fn pack_indices(indices: &[u32], width: u32) -> Result<Vec<u8>> {
    if width == 0 || width > MAX_INDEX_BITS {
        return Err(Error::invalid(format!("index width must be in 1..={MAX_INDEX_BITS}, got {width}")));
    }
    let limit = 1u64 << width;
    let total_bits = indices.len() as u64 * width as u64;
    let mut out = Vec::with_capacity(total_bits.div_ceil(8) as usize);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for (i, &q) in indices.iter().enumerate() {
        if q as u64 >= limit {
            return Err(Error::invalid(format!("index {q} at position {i} does not fit in {width} bits")));
        }
        acc |= (q as u64) << filled;
        filled += width;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], width: u32, count: usize) -> Result<Vec<u32>> {
    if width == 0 || width > MAX_INDEX_BITS {
        return Err(Error::invalid(format!("index width must be in 1..={MAX_INDEX_BITS}, got {width}")));
    }
    let needed = (count as u64 * width as u64).div_ceil(8);
    if (bytes.len() as u64) < needed {
        return Err(Error::invalid(format!("stream of {} bytes is shorter than {needed}", bytes.len())));
    }
    let mask = (1u64 << width) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut pos = 0usize;
    for _ in 0..count {
        while filled < width {
            acc |= (bytes[pos] as u64) << filled;
            pos += 1;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= width;
        filled -= width;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBlock {
    pub id: String,
    pub shape: Vec<usize>,
    pub kind: String,
    pub bits: u32,
    pub designer: Designer,
    pub n_weights: usize,
    pub group_size: usize,
    /// Tuple length (1 for scalar codebooks).
    pub dim: usize,
    pub affines: Vec<CompiledAffine>,
    pub ledger: CostLedger,
    pub payload: Vec<u8>,
}

impl PackedBlock {
    pub fn index_bits(&self) -> u32 {
        index_bits(self.bits, self.designer)
    }

    pub fn index_count(&self) -> usize {
        self.n_weights.div_ceil(self.dim)
    }

    pub fn indices(&self) -> Result<Vec<u32>> {
        unpack_indices(&self.payload, self.index_bits(), self.index_count())
    }

    pub fn dequantize(&self) -> Result<Vec<f64>> {
        let q = self.indices()?;
        Ok(crate::codebook::dequantize(&q, &self.affines, self.n_weights, self.dim, self.group_size))
    }

    pub fn crc32(&self) -> u32 {
        crc32fast::hash(&self.payload)
    }
}

/// Quantizes a block with the per-group deploy whitener and packs it.
pub fn pack_block(
    block: &WeightBlock,
    bits: u32,
    designer: Designer,
    codebook: &Codebook,
    cm: &CostModel,
    export: LloydExport,
) -> Result<PackedBlock> {
    let values = block.values_f64();
    let whitener = Whitener::per_group(&values, block.group_size)?;
    let q = quantize_block(&values, &whitener, codebook)?;
    let affines = compile_to_affine(codebook, &values, &q.indices, &whitener, block.group_size, export)?;
    let width = index_bits(bits, designer);
    let payload = pack_indices(&q.indices, width)?;
    let ledger = block_cost(block.len(), block.group_size, bits, designer, cm)?;
    Ok(PackedBlock {
        id: block.id.clone(),
        shape: block.shape.clone(),
        kind: block.kind.tag().to_string(),
        bits,
        designer,
        n_weights: block.len(),
        group_size: block.group_size,
        dim: codebook.dim(),
        affines,
        ledger,
        payload,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub blocks: Vec<PackedBlock>,
    /// Tensors kept at full precision (biases); not part of the budget.
    pub passthrough: Vec<WeightBlock>,
    pub cost_model: CostModel,
}

impl PackedModel {
    pub fn n_weights(&self) -> u64 {
        self.blocks.iter().map(|b| b.n_weights as u64).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.blocks.iter().map(|b| b.ledger.total()).sum()
    }

    /// `m̄` over quantized blocks; 0 for an empty model.
    pub fn average_bits(&self) -> f64 {
        let n = self.n_weights();
        if n == 0 {
            0.0
        } else {
            self.total_bits() as f64 / n as f64
        }
    }

    pub fn block(&self, id: &str) -> Option<&PackedBlock> {
        self.blocks.iter().find(|b| b.id == id)
    }

    /// Dequantized blocks in order, with passthrough tensors restored, as
    /// f32 weight blocks.
    pub fn to_weight_blocks(&self) -> Result<Vec<WeightBlock>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let values: Vec<f32> = b.dequantize()?.iter().map(|&x| x as f32).collect();
            let kind = BlockKind::from_tag(&b.kind, &b.shape).map_err(|msg| Error::InvalidBlock { id: b.id.clone(), msg })?;
            out.push(WeightBlock::new(b.id.clone(), values, b.shape.clone(), kind)?.with_group_size(b.group_size)?);
        }
        out.extend(self.passthrough.iter().cloned());
        Ok(out)
    }
}

pub fn packed_paths(path: &Path) -> (PathBuf, PathBuf) {
    match path.extension().and_then(|e| e.to_str()) {
        Some("qmanifest") | Some("qblob") => (path.with_extension("qmanifest"), path.with_extension("qblob")),
        _ => {
            let mut m = path.as_os_str().to_owned();
            m.push(".qmanifest");
            let mut b = path.as_os_str().to_owned();
            b.push(".qblob");
            (PathBuf::from(m), PathBuf::from(b))
        }
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|e| Error::parse(path, format!("bad decimal {s:?}: {e}")))
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    n_weights: u64,
    total_bits: u64,
    average_bits: String,
    cost_model: CostModel,
    #[serde(default)]
    blocks: Vec<BlockEntry>,
    #[serde(default)]
    passthrough: Vec<PassthroughEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    id: String,
    shape: Vec<usize>,
    kind: String,
    bits: u32,
    designer: String,
    n_weights: usize,
    group_size: usize,
    dim: usize,
    offset: u64,
    length: u64,
    crc32: u32,
    qmin: i64,
    qmax: i64,
    scales: Vec<String>,
    zero_points: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lut: Option<Vec<String>>,
    /// Groups (by index) that dequantize through the LUT.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    lut_groups: Vec<usize>,
    ledger: CostLedger,
}

#[derive(Serialize, Deserialize)]
struct PassthroughEntry {
    id: String,
    shape: Vec<usize>,
    kind: String,
    offset: u64,
    length: u64,
}

/// Writes `<name>.qmanifest` and `<name>.qblob`. Output bytes depend only on
/// the model.
pub fn export_packed(model: &PackedModel, path: &Path) -> Result<()> {
    let (mpath, bpath) = packed_paths(path);
    let mut blob = Vec::new();
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let recomputed = block_cost(b.n_weights, b.group_size, b.bits, b.designer, &model.cost_model)?;
        if recomputed != b.ledger {
            return Err(Error::LedgerMismatch { id: b.id.clone(), stored: b.ledger.total(), recomputed: recomputed.total() });
        }
        let lut = b.affines.iter().find_map(|a| a.lut.clone());
        let lut_groups = b.affines.iter().enumerate().filter(|(_, a)| a.lut.is_some()).map(|(i, _)| i).collect();
        let (qmin, qmax) = b.affines.first().map_or((0, 0), |a| (a.qmin, a.qmax));
        blocks.push(BlockEntry {
            id: b.id.clone(),
            shape: b.shape.clone(),
            kind: b.kind.clone(),
            bits: b.bits,
            designer: b.designer.to_string(),
            n_weights: b.n_weights,
            group_size: b.group_size,
            dim: b.dim,
            offset: blob.len() as u64,
            length: b.payload.len() as u64,
            crc32: b.crc32(),
            qmin,
            qmax,
            scales: b.affines.iter().map(|a| fmt_f64(a.scale)).collect(),
            zero_points: b.affines.iter().map(|a| fmt_f64(a.zero_point)).collect(),
            lut: lut.map(|l| l.iter().map(|&x| fmt_f64(x)).collect()),
            lut_groups,
            ledger: b.ledger,
        });
        blob.extend_from_slice(&b.payload);
    }
    let mut passthrough = Vec::with_capacity(model.passthrough.len());
    for p in &model.passthrough {
        p.validate()?;
        let offset = blob.len() as u64;
        for v in &p.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        passthrough.push(PassthroughEntry {
            id: p.id.clone(),
            shape: p.shape.clone(),
            kind: p.kind.tag().to_string(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = ManifestFile {
        format_version: PACKED_FORMAT_VERSION,
        n_weights: model.n_weights(),
        total_bits: model.total_bits(),
        average_bits: fmt_f64(model.average_bits()),
        cost_model: model.cost_model,
        blocks,
        passthrough,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::parse(&mpath, e))?;
    if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bpath, &blob)?;
    fs::write(&mpath, text)?;
    Ok(())
}

/// Reads a packed model, verifying checksums, stream lengths and ledgers.
pub fn import_packed(path: &Path) -> Result<PackedModel> {
    let (mpath, bpath) = packed_paths(path);
    let text = fs::read_to_string(&mpath)?;
    let manifest: ManifestFile = toml::from_str(&text).map_err(|e| Error::parse(&mpath, e))?;
    if manifest.format_version != PACKED_FORMAT_VERSION {
        return Err(Error::parse(&mpath, format!("unsupported packed format version {}", manifest.format_version)));
    }
    let blob = fs::read(&bpath)?;
    let slice = |id: &str, offset: u64, length: u64| -> Result<&[u8]> {
        let end = offset.checked_add(length).filter(|&e| e <= blob.len() as u64).ok_or_else(|| Error::TruncatedBlob {
            id: id.to_string(),
            offset,
            end: offset.saturating_add(length),
            available: blob.len() as u64,
        })?;
        Ok(&blob[offset as usize..end as usize])
    };
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for e in &manifest.blocks {
        let designer: Designer = e.designer.parse()?;
        let payload = slice(&e.id, e.offset, e.length)?.to_vec();
        let computed = crc32fast::hash(&payload);
        if computed != e.crc32 {
            return Err(Error::ChecksumMismatch { id: e.id.clone(), stored: e.crc32, computed });
        }
        let recomputed = block_cost(e.n_weights, e.group_size, e.bits, designer, &manifest.cost_model)?;
        let stream_bytes = (e.n_weights.div_ceil(e.dim.max(1)) as u64 * index_bits(e.bits, designer) as u64).div_ceil(8);
        if recomputed != e.ledger || stream_bytes != e.length {
            return Err(Error::LedgerMismatch { id: e.id.clone(), stored: e.ledger.total(), recomputed: recomputed.total() });
        }
        let groups = e.n_weights.div_ceil(e.group_size);
        if e.scales.len() != groups || e.zero_points.len() != groups {
            return Err(Error::parse(&mpath, format!("block {}: expected {groups} scale groups", e.id)));
        }
        let lut = match &e.lut {
            Some(l) => Some(l.iter().map(|s| parse_f64(&mpath, s)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let mut affines = Vec::with_capacity(groups);
        for g in 0..groups {
            affines.push(CompiledAffine {
                scale: parse_f64(&mpath, &e.scales[g])?,
                zero_point: parse_f64(&mpath, &e.zero_points[g])?,
                qmin: e.qmin,
                qmax: e.qmax,
                lut: if e.lut_groups.contains(&g) { lut.clone() } else { None },
            });
        }
        blocks.push(PackedBlock {
            id: e.id.clone(),
            shape: e.shape.clone(),
            kind: e.kind.clone(),
            bits: e.bits,
            designer,
            n_weights: e.n_weights,
            group_size: e.group_size,
            dim: e.dim,
            affines,
            ledger: e.ledger,
            payload,
        });
    }
    let mut passthrough = Vec::with_capacity(manifest.passthrough.len());
    for p in &manifest.passthrough {
        let bytes = slice(&p.id, p.offset, p.length)?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let kind = BlockKind::from_tag(&p.kind, &p.shape).map_err(|msg| Error::parse(&mpath, msg))?;
        passthrough.push(WeightBlock::new(p.id.clone(), values, p.shape.clone(), kind)?);
    }
    let model = PackedModel { blocks, passthrough, cost_model: manifest.cost_model };
    if model.total_bits() != manifest.total_bits || model.n_weights() != manifest.n_weights {
        return Err(Error::LedgerMismatch { id: "<model>".into(), stored: manifest.total_bits, recomputed: model.total_bits() });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{lloyd_scalar, LloydInit, UniformCodebook};
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn payload_of_25m_weights_at_3_bits() {
        let n = 25_600_000;
        let l = block_cost(n, 64, 3, Designer::Uniform, &CostModel::default()).unwrap();
        assert_eq!(l.payload, 76_800_000);
        assert_eq!(l.payload as f64 / 8.0 / 1e6, 9.6);
        assert_eq!(l.scales, 400_000 * 32);
    }

    #[test]
    fn zero_overhead_average_is_bit_width() {
        let l = block_cost(1000, 64, 3, Designer::Uniform, &CostModel::payload_only()).unwrap();
        assert_eq!(average_bits(&[l], 1000).unwrap(), 3.0);
        let header_only = CostModel { header_bits: 64, ..CostModel::payload_only() };
        let l = block_cost(1000, 64, 4, Designer::Uniform, &header_only).unwrap();
        assert_eq!(average_bits(&[l], 1000).unwrap(), 4.064);
        assert!(average_bits(&[l], 0).is_err());
    }

    #[test]
    fn vector_costs() {
        // g = 4, K = 16 means one bit per weight.
        let l = block_cost(1024, 64, 1, Designer::LloydVector { dim: 4 }, &CostModel::default()).unwrap();
        assert_eq!(l.indices, 1024);
        assert_eq!(l.codebook, 16 * 4 * 16);
    }

    #[test]
    fn ledgers_sum_and_pad() {
        for designer in [Designer::Uniform, Designer::LloydScalar, Designer::LloydVector { dim: 2 }] {
            for m in 1..=4 {
                let l = block_cost(101, 32, m, designer, &CostModel { lane_bits: 32, ..CostModel::default() }).unwrap();
                assert_eq!(l.stream_bits() % 32, 0);
                assert_eq!(l.total(), l.payload + l.indices + l.scales + l.codebook + l.headers + l.padding);
            }
        }
    }

    #[test]
    fn hand_packed_layout() {
        assert_eq!(pack_indices(&[5, 2], 3).unwrap(), vec![0x15]);
        assert_eq!(pack_indices(&[7, 200, 0, 255], 8).unwrap(), vec![7, 200, 0, 255]);
        assert!(pack_indices(&[8], 3).is_err());
        assert_eq!(unpack_indices(&[0x15], 3, 2).unwrap(), vec![5, 2]);
    }

    #[test]
    fn random_roundtrip() {
        let mut rng = seeded(0);
        for width in [1, 2, 3, 4, 5, 8, 12, 16, 32] {
            for _ in 0..50 {
                let n = rng.random_range(0..200);
                let max = if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
                let v: Vec<u32> = (0..n).map(|_| rng.random_range(0..=max)).collect();
                let p = pack_indices(&v, width).unwrap();
                assert_eq!(p.len(), (n * width as usize).div_ceil(8));
                assert_eq!(unpack_indices(&p, width, n).unwrap(), v);
            }
        }
    }

    fn sample_model() -> PackedModel {
        let mut rng = seeded(3);
        let vals: Vec<f32> = (0..96).map(|_| rng.random::<f32>() - 0.5).collect();
        let a = WeightBlock::dense("a", 8, 12, vals.clone()).unwrap().with_group_size(32).unwrap();
        let b = WeightBlock::vector("b", vals[..40].to_vec()).unwrap().with_group_size(16).unwrap();
        let cm = CostModel::default();
        let ua = Codebook::Uniform(UniformCodebook::new(3, 2.5).unwrap());
        let lb = Codebook::Lloyd(lloyd_scalar(4, LloydInit::Uniform, 1e-6, 50).unwrap());
        PackedModel {
            blocks: vec![
                pack_block(&a, 3, Designer::Uniform, &ua, &cm, LloydExport::Lut).unwrap(),
                pack_block(&b, 2, Designer::LloydScalar, &lb, &cm, LloydExport::Lut).unwrap(),
            ],
            passthrough: vec![WeightBlock::vector("bias", vec![0.25, -1.5]).unwrap()],
            cost_model: cm,
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let model = sample_model();
        export_packed(&model, &path).unwrap();
        let back = import_packed(&path).unwrap();
        assert_eq!(back, model);
        for (x, y) in model.blocks.iter().zip(&back.blocks) {
            assert_eq!(x.dequantize().unwrap(), y.dequantize().unwrap());
        }
        let first = fs::read(path.with_extension("qmanifest")).unwrap_or_default();
        export_packed(&back, &path).unwrap();
        assert_eq!(fs::read(path.with_extension("qmanifest")).unwrap_or_default(), first);
    }

    #[test]
    fn tampered_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        export_packed(&sample_model(), &path).unwrap();
        let (_, bpath) = packed_paths(&path);
        let mut blob = fs::read(&bpath).unwrap();
        blob[0] ^= 0x01;
        fs::write(&bpath, blob).unwrap();
        assert!(matches!(import_packed(&path), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn tampered_ledger_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        export_packed(&sample_model(), &path).unwrap();
        let (mpath, _) = packed_paths(&path);
        let text = fs::read_to_string(&mpath).unwrap().replacen("headers = 64", "headers = 65", 1);
        fs::write(&mpath, text).unwrap();
        assert!(matches!(import_packed(&path), Err(Error::LedgerMismatch { .. })));
    }

    #[test]
    fn empty_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        let m = PackedModel { blocks: vec![], passthrough: vec![], cost_model: CostModel::default() };
        export_packed(&m, &path).unwrap();
        let back = import_packed(&path).unwrap();
        assert!(back.blocks.is_empty());
        assert_eq!(back.average_bits(), 0.0);
    }
}
