//! Per-block, per-bit expected-loss tables and marginal gains.
//!
//! Scalar codebooks under the weight-MSE proxy use the trace form
//! `L = ε(m) · tr(Σ)`, where `ε` is the per-coordinate distortion of the
//! codebook on `N(0, 1)`. Everything else is estimated by Monte Carlo over
//! posterior samples with common random numbers across bit-widths.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    expected_mse, lloyd_scalar, lloyd_vector, Codebook, LloydInit, RangeObjective, UniformCodebook, LLOYD_MAX_ITER,
    LLOYD_TOL,
};
use crate::error::{Error, Result};
use crate::model_store::WeightBlock;
use crate::posterior::{build_whitener, BlockPosterior, Whitener};
use crate::proxy_distill::{kl_divergence, softmax, teacher, ToyNet};
use crate::rng::{derived, normal_pool, seeded};
use crate::tsv;

pub const DEFAULT_MC_SAMPLES: usize = 16;
/// Widest vector-quantizer index (`m · dim`) a designer will build.
pub const MAX_VQ_INDEX_BITS: u32 = 8;
/// Training tuples per codepoint for vector Lloyd.
const VQ_SAMPLES_PER_LEVEL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Designer {
    Uniform,
    LloydScalar,
    LloydVector { dim: usize },
}

impl fmt::Display for Designer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Designer::Uniform => write!(f, "uniform"),
            Designer::LloydScalar => write!(f, "lloyd-scalar"),
            Designer::LloydVector { dim } => write!(f, "lloyd-vector-{dim}"),
        }
    }
}

impl FromStr for Designer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Designer::Uniform),
            "lloyd-scalar" | "lloyd" => Ok(Designer::LloydScalar),
            _ => {
                let dim = s
                    .strip_prefix("lloyd-vector-")
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&d| d >= 1)
                    .ok_or_else(|| Error::invalid(format!("unknown designer {s:?}")))?;
                Ok(Designer::LloydVector { dim })
            }
        }
    }
}

impl From<Designer> for String {
    fn from(d: Designer) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for Designer {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl Designer {
    pub fn dim(&self) -> usize {
        match self {
            Designer::LloydVector { dim } => *dim,
            _ => 1,
        }
    }

    /// Whether a codebook at `m` bits per weight can be built.
    pub fn supports(&self, m: u32) -> bool {
        match self {
            Designer::LloydVector { dim } => m >= 1 && m as usize * dim <= MAX_VQ_INDEX_BITS as usize,
            _ => (1..=crate::codebook::MAX_BITS).contains(&m),
        }
    }

    /// Designs the codebook for `m` bits per weight in whitened coordinates.
    pub fn design(&self, m: u32, objective: RangeObjective, seed: u64) -> Result<Codebook> {
        if !self.supports(m) {
            return Err(Error::invalid(format!("designer {self} does not support {m} bits")));
        }
        Ok(match self {
            Designer::Uniform => Codebook::Uniform(UniformCodebook::optimized(m, objective)?),
            Designer::LloydScalar => {
                Codebook::Lloyd(lloyd_scalar(1 << m, LloydInit::Uniform, LLOYD_TOL, LLOYD_MAX_ITER)?)
            }
            Designer::LloydVector { dim } => {
                let levels = 1usize << (m as usize * dim);
                let n = (levels * VQ_SAMPLES_PER_LEVEL).max(2048);
                let samples = DMatrix::from_row_slice(n, *dim, &normal_pool(seed, n, *dim));
                Codebook::Lloyd(lloyd_vector(*dim, levels, &samples, seed, LLOYD_TOL, LLOYD_MAX_ITER)?)
            }
        })
    }
}

/// Per-coordinate distortion `ε` of a scalar codebook on `N(0, 1)`.
pub fn scalar_distortion(cb: &Codebook, objective: RangeObjective) -> Result<f64> {
    match cb {
        Codebook::Uniform(u) => expected_mse(objective, u.bits, u.alpha),
        Codebook::Lloyd(l) if l.dim == 1 => Ok(l.objective()),
        Codebook::Lloyd(_) => Err(Error::invalid("closed-form loss needs a scalar codebook; use mc_proxy")),
    }
}

/// `ε · tr(Σ)` with the saturating quantizer model.
pub fn closed_form_mse(post: &BlockPosterior, cb: &Codebook) -> Result<f64> {
    closed_form_mse_with(post, cb, RangeObjective::Saturating)
}

pub fn closed_form_mse_with(post: &BlockPosterior, cb: &Codebook, objective: RangeObjective) -> Result<f64> {
    Ok(scalar_distortion(cb, objective)? * post.trace())
}

/// High-resolution form with per-dimension whitened steps:
/// `Σ_i Δ_i² Σ_ii / 12`.
pub fn closed_form_mse_per_dim(steps: &[f64], cov_diag: &[f64]) -> Result<f64> {
    if steps.len() != cov_diag.len() {
        return Err(Error::DimensionMismatch { expected: cov_diag.len(), got: steps.len() });
    }
    Ok(steps.iter().zip(cov_diag).map(|(d, s)| d * d * s / 12.0).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlForm {
    /// Teacher is the posterior predictive, student the quantized mean.
    #[default]
    PosteriorPredictive,
    /// Teacher is the mean-weight model.
    MeanWeight,
}

/// Quantizer applied in whitened coordinates.
#[derive(Debug, Clone, Copy)]
pub enum Quantizer<'a> {
    Codebook(&'a Codebook),
    /// Reconstructs every value exactly.
    Identity,
}

impl Quantizer<'_> {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Quantizer::Codebook(cb) => cb.quantize_whitened(z).1,
            Quantizer::Identity => z.to_vec(),
        }
    }

    fn roundtrip(&self, whitener: &Whitener, w: &[f64]) -> Result<Vec<f64>> {
        whitener.inverse(&self.apply(&whitener.forward(w)?))
    }
}

/// Loss measured for one block.
#[derive(Debug, Clone, Copy)]
pub enum Proxy<'a> {
    /// `‖w − Q(w)‖²`.
    WeightMse,
    /// `(1/N) Σ_n ‖(W − Q(W)) x_n‖²` for a `rows × cols` block with cached
    /// layer inputs (one per row of `activations`).
    LayerOutput { activations: &'a DMatrix<f64>, rows: usize, cols: usize },
    /// Mean over inputs of `KL(teacher ‖ softmax(f(x; Q(μ))/τ))`.
    LogitKl { net: &'a ToyNet, layer: usize, inputs: &'a [Vec<f64>], tau: f64, form: KlForm },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub loss: f64,
    pub se: f64,
    pub samples: usize,
}

fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in values {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    let se = if n > 1 { (m2 / (n - 1) as f64 / n as f64).sqrt() } else { 0.0 };
    (mean, se, n)
}

/// Monte Carlo estimate of a proxy loss. The same `seed` reproduces the same
/// posterior draws, so candidate codebooks for one block share them.
pub fn mc_proxy(
    post: &BlockPosterior,
    whitener: &Whitener,
    quantizer: Quantizer<'_>,
    proxy: Proxy<'_>,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::invalid(format!("Monte Carlo needs M >= 2 samples, got {samples}")));
    }
    if whitener.dim() != post.dim() {
        return Err(Error::DimensionMismatch { expected: post.dim(), got: whitener.dim() });
    }
    let mut rng = seeded(seed);
    match proxy {
        Proxy::WeightMse => {
            let mut losses = Vec::with_capacity(samples);
            for _ in 0..samples {
                let w = post.sample(&mut rng)?;
                let wq = quantizer.roundtrip(whitener, &w)?;
                losses.push(w.iter().zip(&wq).map(|(a, b)| (a - b) * (a - b)).sum());
            }
            let (loss, se, _) = mean_se(losses.into_iter());
            Ok(McEstimate { loss, se, samples })
        }
        Proxy::LayerOutput { activations, rows, cols } => {
            if rows * cols != post.dim() {
                return Err(Error::DimensionMismatch { expected: post.dim(), got: rows * cols });
            }
            if activations.ncols() != cols || activations.nrows() == 0 {
                return Err(Error::invalid(format!(
                    "layer-output proxy needs cached activations with {cols} columns"
                )));
            }
            let mut losses = Vec::with_capacity(samples);
            for _ in 0..samples {
                let w = post.sample(&mut rng)?;
                let wq = quantizer.roundtrip(whitener, &w)?;
                let diff = DMatrix::from_row_slice(rows, cols, &w) - DMatrix::from_row_slice(rows, cols, &wq);
                let out = activations * diff.transpose();
                losses.push(out.norm_squared() / activations.nrows() as f64);
            }
            let (loss, se, _) = mean_se(losses.into_iter());
            Ok(McEstimate { loss, se, samples })
        }
        Proxy::LogitKl { net, layer, inputs, tau, form } => {
            if inputs.len() < 2 {
                return Err(Error::invalid("logit-KL proxy needs at least two cached inputs"));
            }
            let student_net = net.with_weight(layer, &quantizer.roundtrip(whitener, &post.mu)?)?;
            let teacher_probs = match form {
                KlForm::PosteriorPredictive => teacher(net, &[(layer, post)], inputs, samples, tau, seed)?.probs,
                KlForm::MeanWeight => {
                    let mean_net = net.with_weight(layer, &post.mu)?;
                    inputs.iter().map(|x| Ok(softmax(&mean_net.forward(x)?, tau))).collect::<Result<_>>()?
                }
            };
            let mut kls = Vec::with_capacity(inputs.len());
            for (x, p) in inputs.iter().zip(&teacher_probs) {
                kls.push(kl_divergence(p, &softmax(&student_net.forward(x)?, tau)));
            }
            let (loss, se, _) = mean_se(kls.into_iter());
            Ok(McEstimate { loss, se, samples })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub block: String,
    pub bits: u32,
    pub loss: f64,
    /// Zero for closed-form rows.
    pub se: f64,
    pub designer: Designer,
}

/// `L_b(m)` for every block and supported bit-width, in block order then
/// ascending `m`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTable {
    pub bits: Vec<u32>,
    pub rows: Vec<LossRow>,
}

impl LossTable {
    /// Builds a table from rows; `bits` is sorted and deduplicated.
    pub fn from_rows(mut bits: Vec<u32>, mut rows: Vec<LossRow>) -> Result<Self> {
        bits.sort_unstable();
        bits.dedup();
        let mut order: HashMap<String, usize> = HashMap::new();
        for r in &rows {
            if !(r.loss >= 0.0) || !r.loss.is_finite() || !(r.se >= 0.0) {
                return Err(Error::invalid(format!("block {} m={}: invalid loss {} (se {})", r.block, r.bits, r.loss, r.se)));
            }
            if !bits.contains(&r.bits) {
                return Err(Error::invalid(format!("block {}: bit-width {} is not in the bit set", r.block, r.bits)));
            }
            let next = order.len();
            order.entry(r.block.clone()).or_insert(next);
        }
        rows.sort_by_key(|r| (order[&r.block], r.bits));
        if rows.windows(2).any(|w| w[0].block == w[1].block && w[0].bits == w[1].bits) {
            return Err(Error::invalid("duplicate (block, m) row"));
        }
        Ok(LossTable { bits, rows })
    }

    pub fn blocks(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.block.as_str()) {
                out.push(&r.block);
            }
        }
        out
    }

    pub fn block_rows<'a, 'b>(&'a self, id: &'b str) -> impl Iterator<Item = &'a LossRow> + use<'a, 'b> {
        self.rows.iter().filter(move |r| r.block == id)
    }

    pub fn get(&self, id: &str, m: u32) -> Option<&LossRow> {
        self.block_rows(id).find(|r| r.bits == m)
    }

    /// `(m, L_b(m))` pairs in ascending `m`.
    pub fn losses(&self, id: &str) -> Vec<(u32, f64)> {
        self.block_rows(id).map(|r| (r.bits, r.loss)).collect()
    }

    /// Enforces nonincreasing loss in `m` per block with a running minimum.
    /// Returns the number of clamped rows.
    pub fn isotonic_clamp(&mut self) -> usize {
        let mut clamped = 0;
        let mut i = 0;
        while i < self.rows.len() {
            let mut best = self.rows[i].loss;
            let mut j = i + 1;
            while j < self.rows.len() && self.rows[j].block == self.rows[i].block {
                if self.rows[j].loss > best {
                    warn!(
                        "block {}: loss at m={} ({}) exceeds loss at fewer bits ({}); clamped",
                        self.rows[j].block, self.rows[j].bits, self.rows[j].loss, best
                    );
                    self.rows[j].loss = best;
                    clamped += 1;
                } else {
                    best = self.rows[j].loss;
                }
                j += 1;
            }
            i = j;
        }
        clamped
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.block.clone(), r.bits.to_string(), format!("{:?}", r.loss), format!("{:?}", r.se), r.designer.to_string()])
            .collect();
        tsv::write(path, &["block", "m", "loss", "se", "designer"], &rows)
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let (header, raw) = tsv::read(path)?;
        let cols: Vec<usize> = ["block", "m", "loss", "se", "designer"]
            .iter()
            .map(|c| tsv::column(path, &header, c))
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(raw.len());
        for (line, r) in raw.iter().enumerate() {
            let line = line + 2;
            rows.push(LossRow {
                block: tsv::field(path, r, cols[0], line)?,
                bits: tsv::field(path, r, cols[1], line)?,
                loss: tsv::field(path, r, cols[2], line)?,
                se: tsv::field(path, r, cols[3], line)?,
                designer: tsv::field::<String>(path, r, cols[4], line)?
                    .parse()
                    .map_err(|e: Error| Error::parse(path, format!("row {line}: {e}")))?,
            });
        }
        let bits = rows.iter().map(|r| r.bits).collect();
        LossTable::from_rows(bits, rows).map_err(|e| Error::parse(path, e))
    }
}

/// Proxy resources shared by every block of a table.
#[derive(Debug, Clone, Copy, Default)]
pub enum ProxyConfig<'a> {
    #[default]
    WeightMse,
    /// Cached layer inputs keyed by block id.
    LayerOutput { activations: &'a HashMap<String, DMatrix<f64>> },
    /// Blocks are located in `net` by layer index.
    LogitKl { net: &'a ToyNet, layers: &'a HashMap<String, usize>, inputs: &'a [Vec<f64>], tau: f64, form: KlForm },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableConfig {
    pub bits: Vec<u32>,
    pub designer: Designer,
    pub objective: RangeObjective,
    /// Posterior samples per Monte Carlo estimate.
    pub samples: usize,
    pub seed: u64,
    /// Use Monte Carlo even where the trace form applies.
    pub force_mc: bool,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            bits: vec![2, 3, 4, 8],
            designer: Designer::Uniform,
            objective: RangeObjective::Saturating,
            samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            force_mc: false,
        }
    }
}

/// Codebooks for every bit-width of `cfg.bits` the designer supports.
pub fn design_codebooks(cfg: &TableConfig) -> Result<Vec<(u32, Codebook)>> {
    let mut codebooks = Vec::new();
    for &m in &cfg.bits {
        if cfg.designer.supports(m) {
            codebooks.push((m, cfg.designer.design(m, cfg.objective, derived(cfg.seed, m as u64).next_u64_seed())?));
        }
    }
    if codebooks.is_empty() {
        return Err(Error::invalid(format!("designer {} supports none of the bit-widths {:?}", cfg.designer, cfg.bits)));
    }
    Ok(codebooks)
}

/// Designs codebooks per bit-width once (whitened coordinates are shared by
/// every block) and evaluates each block. Unsupported bit-widths are skipped.
pub fn build_table(
    blocks: &[WeightBlock],
    posteriors: &[BlockPosterior],
    cfg: &TableConfig,
    proxy: ProxyConfig<'_>,
) -> Result<LossTable> {
    check_bits(&cfg.bits)?;
    let codebooks = design_codebooks(cfg)?;
    build_table_with(blocks, posteriors, cfg, proxy, &codebooks)
}

fn check_bits(bits: &[u32]) -> Result<()> {
    if bits.is_empty() {
        return Err(Error::invalid("bit set must be nonempty"));
    }
    if bits.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bit set must be sorted and strictly increasing"));
    }
    Ok(())
}

/// [`build_table`] with precomputed `(m, codebook)` pairs.
pub fn build_table_with(
    blocks: &[WeightBlock],
    posteriors: &[BlockPosterior],
    cfg: &TableConfig,
    proxy: ProxyConfig<'_>,
    codebooks: &[(u32, Codebook)],
) -> Result<LossTable> {
    if blocks.len() != posteriors.len() {
        return Err(Error::DimensionMismatch { expected: blocks.len(), got: posteriors.len() });
    }
    check_bits(&cfg.bits)?;
    // One draw stream for all blocks: identical blocks get identical rows.
    let block_seed = derived(cfg.seed, 1000).next_u64_seed();
    let mut rows = Vec::with_capacity(blocks.len() * codebooks.len());
    for (block, post) in blocks.iter().zip(posteriors) {
        let block_rows = table_rows(block, post, cfg, proxy, codebooks, block_seed)
            .map_err(|e| e.in_stage("build-table", Some(&block.id)))?;
        rows.extend(block_rows);
    }
    let mut table = LossTable::from_rows(cfg.bits.clone(), rows)?;
    table.isotonic_clamp();
    Ok(table)
}

/// Rows of one block against precomputed codebooks, with MC draws seeded by
/// `seed`.
pub fn table_rows(
    block: &WeightBlock,
    post: &BlockPosterior,
    cfg: &TableConfig,
    proxy: ProxyConfig<'_>,
    codebooks: &[(u32, Codebook)],
    seed: u64,
) -> Result<Vec<LossRow>> {
    if block.len() != post.dim() {
        return Err(Error::DimensionMismatch { expected: block.len(), got: post.dim() });
    }
    let whitener = build_whitener(post, None)?;
    let block_proxy = match proxy {
        ProxyConfig::WeightMse => Proxy::WeightMse,
        ProxyConfig::LayerOutput { activations } => {
            let acts = activations
                .get(&block.id)
                .ok_or_else(|| Error::invalid(format!("no cached activations for block {}", block.id)))?;
            let cols = acts.ncols();
            if cols == 0 || block.len() % cols != 0 {
                return Err(Error::DimensionMismatch { expected: block.len(), got: cols });
            }
            Proxy::LayerOutput { activations: acts, rows: block.len() / cols, cols }
        }
        ProxyConfig::LogitKl { net, layers, inputs, tau, form } => {
            let layer = *layers
                .get(&block.id)
                .ok_or_else(|| Error::invalid(format!("block {} is not a layer of the proxy network", block.id)))?;
            Proxy::LogitKl { net, layer, inputs, tau, form }
        }
    };
    let mut rows = Vec::with_capacity(codebooks.len());
    for (m, cb) in codebooks {
        let closed = matches!(block_proxy, Proxy::WeightMse) && cb.dim() == 1 && !cfg.force_mc;
        let (loss, se) = if closed {
            (closed_form_mse_with(post, cb, cfg.objective)?, 0.0)
        } else {
            let est = mc_proxy(post, &whitener, Quantizer::Codebook(cb), block_proxy, cfg.samples, seed)?;
            (est.loss, est.se)
        };
        rows.push(LossRow { block: block.id.clone(), bits: *m, loss, se, designer: cfg.designer });
    }
    Ok(rows)
}

trait NextSeed {
    fn next_u64_seed(self) -> u64;
}

impl NextSeed for crate::rng::SeededRng {
    fn next_u64_seed(mut self) -> u64 {
        rand::RngCore::next_u64(&mut self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub block: String,
    pub from: u32,
    pub to: u32,
    /// `Δ_b(m) = L_b(m) − L_b(m⁺)`.
    pub delta: f64,
    pub cost_from: u64,
    pub cost_to: u64,
    /// `γ_b(m) = Δ_b(m) / (C_b(m⁺) − C_b(m))`.
    pub gamma: f64,
    /// The gain is within one combined standard error of zero.
    pub se_overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarginalGains {
    pub rows: Vec<GainRow>,
}

impl MarginalGains {
    pub fn get(&self, id: &str, from: u32) -> Option<&GainRow> {
        self.rows.iter().find(|r| r.block == id && r.from == from)
    }
}

/// Gains between consecutive supported bit-widths of each block, with
/// `cost(block, m)` supplying `C_b(m)` in bits.
pub fn marginal_gains(table: &LossTable, mut cost: impl FnMut(&str, u32) -> Result<u64>) -> Result<MarginalGains> {
    let mut rows = Vec::new();
    for id in table.blocks() {
        let block_rows: Vec<&LossRow> = table.block_rows(id).collect();
        for w in block_rows.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let (c0, c1) = (cost(id, lo.bits)?, cost(id, hi.bits)?);
            if c1 <= c0 {
                return Err(Error::invalid(format!(
                    "block {id}: cost must increase with bits (C({})={c0}, C({})={c1})",
                    lo.bits, hi.bits
                )));
            }
            let delta = lo.loss - hi.loss;
            let combined_se = (lo.se * lo.se + hi.se * hi.se).sqrt();
            rows.push(GainRow {
                block: id.to_string(),
                from: lo.bits,
                to: hi.bits,
                delta,
                cost_from: c0,
                cost_to: c1,
                gamma: delta / (c1 - c0) as f64,
                se_overlap: combined_se > 0.0 && delta <= combined_se,
            });
        }
    }
    Ok(MarginalGains { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::expected_mse_uniform;
    use crate::proxy_distill::random_inputs;
    use crate::rng::standard_normal;
    use rand::Rng;

    fn uniform(m: u32, alpha: f64) -> Codebook {
        Codebook::Uniform(UniformCodebook::new(m, alpha).unwrap())
    }

    #[test]
    fn trace_examples() {
        let post = BlockPosterior::diagonal(vec![0.0], vec![1.0]).unwrap();
        let l = closed_form_mse_with(&post, &uniform(3, 2.5), RangeObjective::ClippedTail).unwrap();
        assert_eq!(l, expected_mse_uniform(3, 2.5).unwrap());

        let post = BlockPosterior::diagonal(vec![0.3, -1.0], vec![1.0, 4.0]).unwrap();
        let eps = expected_mse(RangeObjective::Saturating, 8, 4.0).unwrap();
        assert!((closed_form_mse(&post, &uniform(8, 4.0)).unwrap() - 5.0 * eps).abs() < 1e-15);
    }

    #[test]
    fn vector_codebooks_need_monte_carlo() {
        let post = BlockPosterior::diagonal(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let cb = Designer::LloydVector { dim: 2 }.design(2, RangeObjective::Saturating, 0).unwrap();
        assert!(closed_form_mse(&post, &cb).is_err());
    }

    #[test]
    fn per_dim_form_matches_isotropic() {
        let var = [0.5, 2.0, 1.25];
        let d = 0.3;
        let iso = d * d / 12.0 * var.iter().sum::<f64>();
        assert!((closed_form_mse_per_dim(&[d; 3], &var).unwrap() - iso).abs() < 1e-15);
        assert!(closed_form_mse_per_dim(&[d; 2], &var).is_err());
    }

    #[test]
    fn closed_form_agrees_with_monte_carlo() {
        let mut rng = seeded(5);
        let var: Vec<f64> = (0..8).map(|_| 0.1 + rng.random::<f64>()).collect();
        let mu: Vec<f64> = (0..8).map(|_| standard_normal(&mut rng)).collect();
        let post = BlockPosterior::diagonal(mu, var).unwrap();
        let w = build_whitener(&post, None).unwrap();
        let cb = Codebook::Uniform(UniformCodebook::optimized(3, RangeObjective::Saturating).unwrap());
        let closed = closed_form_mse(&post, &cb).unwrap();
        let mc = mc_proxy(&post, &w, Quantizer::Codebook(&cb), Proxy::WeightMse, 200_000, 1).unwrap();
        assert!((closed - mc.loss).abs() <= 3.0 * mc.se, "{closed} vs {} ± {}", mc.loss, mc.se);
    }

    #[test]
    fn identity_quantizer_is_lossless() {
        let post = BlockPosterior::diagonal(vec![0.5; 6], vec![0.3; 6]).unwrap();
        let w = build_whitener(&post, None).unwrap();
        let est = mc_proxy(&post, &w, Quantizer::Identity, Proxy::WeightMse, 8, 0).unwrap();
        assert!(est.loss < 1e-24);
        assert!(mc_proxy(&post, &w, Quantizer::Identity, Proxy::WeightMse, 1, 0).is_err());
    }

    #[test]
    fn kl_of_unquantized_net_is_zero() {
        let net = ToyNet::random(&[4, 6, 3], 2).unwrap();
        let mu = net.weight_row_major(1);
        let post = BlockPosterior::diagonal(mu.clone(), vec![0.01; mu.len()]).unwrap();
        let w = build_whitener(&post, None).unwrap();
        let inputs = random_inputs(16, 4, 3);
        let proxy = Proxy::LogitKl { net: &net, layer: 1, inputs: &inputs, tau: 2.0, form: KlForm::MeanWeight };
        let est = mc_proxy(&post, &w, Quantizer::Identity, proxy, 4, 0).unwrap();
        assert!(est.loss.abs() < 1e-12 && est.se < 1e-12);

        let cb = uniform(2, 2.0);
        let pp = Proxy::LogitKl { net: &net, layer: 1, inputs: &inputs, tau: 2.0, form: KlForm::PosteriorPredictive };
        let est = mc_proxy(&post, &w, Quantizer::Codebook(&cb), pp, 4, 0).unwrap();
        assert!(est.loss > 0.0);
    }

    #[test]
    fn layer_output_proxy() {
        let post = BlockPosterior::diagonal(vec![0.0; 6], vec![1.0; 6]).unwrap();
        let w = build_whitener(&post, None).unwrap();
        let acts = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let proxy = Proxy::LayerOutput { activations: &acts, rows: 2, cols: 3 };
        assert!(mc_proxy(&post, &w, Quantizer::Identity, proxy, 4, 0).unwrap().loss < 1e-24);
        let cb = uniform(2, 2.0);
        assert!(mc_proxy(&post, &w, Quantizer::Codebook(&cb), proxy, 4, 0).unwrap().loss > 0.0);
        let bad = Proxy::LayerOutput { activations: &acts, rows: 3, cols: 3 };
        assert!(mc_proxy(&post, &w, Quantizer::Identity, bad, 4, 0).is_err());
    }

    #[test]
    fn se_shrinks_with_samples() {
        let post = BlockPosterior::diagonal(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let w = build_whitener(&post, None).unwrap();
        let cb = uniform(2, 1.5);
        let mut ratios = Vec::new();
        for rep in 0..10 {
            let a = mc_proxy(&post, &w, Quantizer::Codebook(&cb), Proxy::WeightMse, 2000, rep).unwrap();
            let b = mc_proxy(&post, &w, Quantizer::Codebook(&cb), Proxy::WeightMse, 4000, 100 + rep).unwrap();
            ratios.push(b.se / a.se);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.2 * std::f64::consts::FRAC_1_SQRT_2);
    }

    fn synthetic(n: usize, seed: u64) -> (Vec<WeightBlock>, Vec<BlockPosterior>) {
        let mut rng = seeded(seed);
        let mut blocks = Vec::new();
        let mut posts = Vec::new();
        for b in 0..n {
            let d = 16 + 8 * b;
            let vals: Vec<f32> = (0..d).map(|_| standard_normal(&mut rng) as f32).collect();
            let var: Vec<f64> = (0..d).map(|_| 0.01 + rng.random::<f64>()).collect();
            posts.push(BlockPosterior::diagonal(vals.iter().map(|&v| v as f64).collect(), var).unwrap());
            blocks.push(WeightBlock::vector(format!("b{b}"), vals).unwrap());
        }
        (blocks, posts)
    }

    #[test]
    fn table_shape_and_determinism() {
        let (blocks, posts) = synthetic(1, 0);
        let cfg = TableConfig { bits: vec![2, 3, 4], ..TableConfig::default() };
        let t = build_table(&blocks, &posts, &cfg, ProxyConfig::WeightMse).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows.windows(2).all(|w| w[1].loss <= w[0].loss));

        let twin = vec![blocks[0].clone(), WeightBlock { id: "twin".into(), ..blocks[0].clone() }];
        let cfg = TableConfig { force_mc: true, ..cfg };
        let t = build_table(&twin, &[posts[0].clone(), posts[0].clone()], &cfg, ProxyConfig::WeightMse).unwrap();
        for m in [2, 3, 4] {
            let (a, b) = (t.get("b0", m).unwrap(), t.get("twin", m).unwrap());
            assert_eq!((a.loss, a.se), (b.loss, b.se));
        }
        let again = build_table(&twin, &[posts[0].clone(), posts[0].clone()], &cfg, ProxyConfig::WeightMse).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn diminishing_returns_on_synthetic_suite() {
        let (blocks, posts) = synthetic(8, 11);
        let t = build_table(&blocks, &posts, &TableConfig::default(), ProxyConfig::WeightMse).unwrap();
        let concave = t
            .blocks()
            .iter()
            .filter(|id| {
                let l: HashMap<u32, f64> = t.losses(id).into_iter().collect();
                l[&2] - l[&3] >= l[&3] - l[&4]
            })
            .count();
        assert!(concave >= 7);
        let gains = marginal_gains(&t, |_, m| Ok(1000 * m as u64)).unwrap();
        assert!(gains.rows.iter().all(|g| g.gamma >= 0.0));
    }

    #[test]
    fn vector_and_lloyd_tables() {
        let (blocks, posts) = synthetic(2, 4);
        for designer in [Designer::LloydScalar, Designer::LloydVector { dim: 2 }] {
            let cfg = TableConfig { bits: vec![1, 2, 3, 4], designer, samples: 8, ..TableConfig::default() };
            let t = build_table(&blocks, &posts, &cfg, ProxyConfig::WeightMse).unwrap();
            assert_eq!(t.rows.len(), 8);
            assert!(t.rows.iter().all(|r| r.designer == designer));
        }
        let cfg = TableConfig { bits: vec![5, 6], designer: Designer::LloydVector { dim: 2 }, ..TableConfig::default() };
        assert!(build_table(&blocks, &posts, &cfg, ProxyConfig::WeightMse).is_err());
    }

    #[test]
    fn isotonic_clamp_logs_and_fixes() {
        let row = |m, loss| LossRow { block: "a".into(), bits: m, loss, se: 0.1, designer: Designer::Uniform };
        let mut t = LossTable::from_rows(vec![2, 3, 4], vec![row(2, 1.0), row(3, 1.2), row(4, 0.5)]).unwrap();
        assert_eq!(t.isotonic_clamp(), 1);
        assert_eq!(t.losses("a"), vec![(2, 1.0), (3, 1.0), (4, 0.5)]);
        let g = marginal_gains(&t, |_, m| Ok(100 * m as u64)).unwrap();
        assert_eq!(g.get("a", 2).unwrap().gamma, 0.0);
        assert!(g.get("a", 2).unwrap().se_overlap);
    }

    #[test]
    fn gain_arithmetic_and_cost_check() {
        let row = |m, loss| LossRow { block: "a".into(), bits: m, loss, se: 0.0, designer: Designer::Uniform };
        let t = LossTable::from_rows(vec![3, 4], vec![row(3, 1.0), row(4, 0.4)]).unwrap();
        let g = marginal_gains(&t, |_, m| Ok(if m == 3 { 3000 } else { 4000 })).unwrap();
        let r = g.get("a", 3).unwrap();
        assert!((r.delta - 0.6).abs() < 1e-15 && (r.gamma - 6e-4).abs() < 1e-18);
        assert!(marginal_gains(&t, |_, _| Ok(5)).is_err());
    }

    #[test]
    fn tsv_roundtrip() {
        let (blocks, posts) = synthetic(3, 2);
        let cfg = TableConfig { force_mc: true, samples: 4, ..TableConfig::default() };
        let t = build_table(&blocks, &posts, &cfg, ProxyConfig::WeightMse).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("table.tsv");
        t.write_tsv(&p).unwrap();
        assert_eq!(LossTable::read_tsv(&p).unwrap(), t);
        assert!("lloyd-vector-0".parse::<Designer>().is_err());
        assert_eq!("lloyd-vector-4".parse::<Designer>().unwrap(), Designer::LloydVector { dim: 4 });
    }
}
