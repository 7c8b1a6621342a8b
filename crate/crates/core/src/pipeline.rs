//! Staged end-to-end pipeline driven by one TOML config.
//!
//! Every stage reads its inputs from and writes its outputs to the output
//! directory, so stages can run one at a time or back to back through
//! [`run_pipeline`] with identical results.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::allocator::{
    budget_from_target, greedy_allocate, greedy_allocate_with_rescore, random_allocation, uniform_fill_allocation,
    AllocBlock, Allocation, AllocationProblem, PackingModel, Rescore,
};
use crate::codebook::{Codebook, LloydExport, RangeObjective};
use crate::error::{Error, Result};
use crate::losstable::{
    design_codebooks, table_rows, Designer, KlForm, LossRow, LossTable, ProxyConfig, TableConfig,
    DEFAULT_MC_SAMPLES,
};
use crate::metrics::{
    codebook_stats, ece_mce, snr_psnr, top1_accuracy, worst_k_and_cvar, BinningConfig, PredictionSet,
};
use crate::model_store::{load_model, partition, save_model, BlockKind, ModelManifest, PartitionPolicy, WeightBlock};
use crate::packer::{export_packed, import_packed, pack_block, CostModel, PackedModel};
use crate::posterior::{
    fit_diag_laplace, fit_kfac, fit_lowrank_diag, hutchinson_diag, median_damping, posterior_from_curvature,
    BlockPosterior, CurvatureOracle, DiagonalOracle, FitMeta,
};
use crate::proxy_distill::{
    distill_scales, ggn_oracle, kfac_batches, random_inputs, softmax, teacher, ScaledLayer, ToyNet,
    DEFAULT_DISTILL_STEPS, DEFAULT_TEACHER_SAMPLES, DEFAULT_TEMPERATURE,
};
use crate::rng::derived;
use crate::tsv;

pub const BLOCKS_FILE: &str = "blocks.tsv";
pub const POSTERIORS_FILE: &str = "posteriors.json";
pub const CODEBOOKS_FILE: &str = "codebooks.json";
pub const TABLE_FILE: &str = "loss_table.tsv";
pub const ALLOCATION_FILE: &str = "allocation.tsv";
pub const ALLOCATION_JSON: &str = "allocation.json";
pub const TRACE_FILE: &str = "trace.tsv";
pub const PACKED_FILE: &str = "model.qmanifest";
pub const DISTILL_TRACE_FILE: &str = "distill_trace.tsv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const BLOCK_METRICS_FILE: &str = "block_metrics.tsv";
pub const FRONTIER_FILE: &str = "frontier.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.tsv";

const STREAM_POSTERIOR: u64 = 0x100;
const STREAM_TABLE: u64 = 0x200;
const STREAM_CALIB: u64 = 0x300;
const STREAM_RESCORE: u64 = 0x400;
const STREAM_TEACHER: u64 = 0x500;
const STREAM_EVAL: u64 = 0x600;
const STREAM_RANDOM: u64 = 0x700;

fn stream_seed(seed: u64, stream: u64) -> u64 {
    derived(seed, stream).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Model container (`.manifest`, with a `.blob` beside it).
    pub model: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { model: PathBuf::from("model.manifest"), out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// TSV with columns `x0..x{d-1}`; seeded standard-normal inputs when absent.
    pub path: Option<PathBuf>,
    pub samples: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { path: None, samples: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorKind {
    #[default]
    Diag,
    Kfac,
    Lowrank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorSection {
    pub kind: PosteriorKind,
    pub probes: usize,
    pub damping: f64,
    pub ema_decay: f64,
    pub rank: usize,
    pub batch_size: usize,
    pub small_calib: bool,
    pub median_damping: bool,
}

impl Default for PosteriorSection {
    fn default() -> Self {
        PosteriorSection {
            kind: PosteriorKind::Diag,
            probes: 16,
            damping: 1e-3,
            ema_decay: 0.05,
            rank: 32,
            batch_size: 32,
            small_calib: false,
            median_damping: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// `per-tensor`, `per-channel` or `fixed:<n>`.
    pub policy: String,
    /// Overrides the group size stored in the model.
    pub group_size: Option<usize>,
    /// Quantize generic vectors (biases) too instead of passing them through.
    pub quantize_vectors: bool,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { policy: "per-tensor".into(), group_size: None, quantize_vectors: false }
    }
}

impl PartitionConfig {
    pub fn policy(&self) -> Result<PartitionPolicy> {
        match self.policy.as_str() {
            "per-tensor" => Ok(PartitionPolicy::PerTensor),
            "per-channel" => Ok(PartitionPolicy::PerChannel),
            p => p
                .strip_prefix("fixed:")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .map(PartitionPolicy::FixedSize)
                .ok_or_else(|| Error::Config(format!("unknown partition policy {p:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyKind {
    #[default]
    WeightMse,
    LayerOutput,
    LogitKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSection {
    pub bits: Vec<u32>,
    pub designer: Designer,
    /// Designer overrides keyed by block kind (`dense-matrix`, ...).
    pub designers: BTreeMap<String, Designer>,
    pub objective: RangeObjective,
    pub proxy: ProxyKind,
    pub samples: usize,
    pub tau: f64,
    pub kl_form: KlForm,
    pub force_mc: bool,
    pub lloyd_export: LloydExport,
}

impl Default for TableSection {
    fn default() -> Self {
        TableSection {
            bits: vec![2, 3, 4, 8],
            designer: Designer::Uniform,
            designers: BTreeMap::new(),
            objective: RangeObjective::Saturating,
            proxy: ProxyKind::WeightMse,
            samples: DEFAULT_MC_SAMPLES,
            tau: 1.0,
            kl_form: KlForm::PosteriorPredictive,
            force_mc: false,
            lloyd_export: LloydExport::Lut,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Average bits per weight, converted to `⌊m̄ · N⌋` total bits.
    pub target_bits: Option<f64>,
    pub total_bits: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    pub eta: f64,
    pub lane_bits: u32,
    pub preferred_bits: Vec<u32>,
    pub lambda_reg: f64,
    /// Minimum bits keyed by block id or parent tensor id.
    pub bit_floors: BTreeMap<String, u32>,
    /// Re-score every `S` upgrades (0 disables).
    pub rescore_every: usize,
    pub rescore_top_k: usize,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        let packing = PackingModel::default();
        AllocatorConfig {
            eta: 0.0,
            lane_bits: packing.lane_bits,
            preferred_bits: packing.preferred_bits,
            lambda_reg: 0.0,
            bit_floors: BTreeMap::new(),
            rescore_every: 0,
            rescore_top_k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub enabled: bool,
    pub steps: usize,
    pub lr: f64,
    pub samples: usize,
    pub tau: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            enabled: false,
            steps: DEFAULT_DISTILL_STEPS,
            lr: 0.05,
            samples: DEFAULT_TEACHER_SAMPLES,
            tau: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub enabled: bool,
    /// Evaluation inputs (same format as calibration); seeded draws when absent.
    pub inputs: Option<PathBuf>,
    /// Score an existing predictions table instead of evaluating the model.
    pub predictions: Option<PathBuf>,
    pub samples: usize,
    pub bins: usize,
    pub boundary_seeds: usize,
    pub worst_k_percent: f64,
    pub cvar_alpha: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            enabled: true,
            inputs: None,
            predictions: None,
            samples: 512,
            bins: 15,
            boundary_seeds: 3,
            worst_k_percent: 10.0,
            cvar_alpha: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierConfig {
    pub targets: Vec<f64>,
    /// Seeds to sweep; the global seed when empty.
    pub seeds: Vec<u64>,
}

impl Default for FrontierConfig {
    fn default() -> Self {
        FrontierConfig { targets: vec![3.0, 3.5, 4.0], seeds: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub calibration: CalibrationConfig,
    pub posterior: PosteriorSection,
    pub partition: PartitionConfig,
    pub table: TableSection,
    pub budget: BudgetConfig,
    pub allocator: AllocatorConfig,
    pub cost: CostModel,
    pub distill: DistillConfig,
    pub metrics: MetricsConfig,
    pub frontier: FrontierConfig,
}

impl PipelineConfig {
    /// Parses a config; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.model);
        resolve(&mut cfg.paths.out);
        if let Some(p) = cfg.calibration.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.metrics.inputs.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.metrics.predictions.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (self.budget.target_bits, self.budget.total_bits) {
            (Some(_), Some(_)) | (None, None) => return bad("set exactly one of budget.target_bits and budget.total_bits".into()),
            (Some(t), None) if !(t > 0.0) || !t.is_finite() => return bad(format!("budget.target_bits must be > 0, got {t}")),
            _ => {}
        }
        self.partition.policy()?;
        if self.partition.group_size == Some(0) {
            return bad("partition.group_size must be >= 1".into());
        }
        let t = &self.table;
        if t.bits.is_empty() || t.bits.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("table.bits must be nonempty and strictly increasing, got {:?}", t.bits));
        }
        if t.bits.iter().any(|&m| m == 0 || m > crate::codebook::MAX_BITS) {
            return bad(format!("table.bits out of range: {:?}", t.bits));
        }
        for tag in t.designers.keys() {
            if !["dense-matrix", "conv-filter", "generic-vector"].contains(&tag.as_str()) {
                return bad(format!("table.designers: unknown block kind {tag:?}"));
            }
        }
        if t.samples < 2 {
            return bad("table.samples must be >= 2".into());
        }
        if !(t.tau > 0.0) {
            return bad("table.tau must be > 0".into());
        }
        let p = &self.posterior;
        if p.probes == 0 || !(p.damping > 0.0) || p.batch_size == 0 || !(p.ema_decay > 0.0 && p.ema_decay <= 1.0) {
            return bad("posterior: probes, damping and batch_size must be positive, ema_decay in (0, 1]".into());
        }
        if !(self.allocator.eta >= 0.0) || !(self.allocator.lambda_reg >= 0.0) {
            return bad("allocator.eta and allocator.lambda_reg must be >= 0".into());
        }
        self.cost.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.distill.enabled && (self.distill.samples == 0 || !(self.distill.tau >= 1.0) || !(self.distill.lr > 0.0)) {
            return bad("distill: samples >= 1, tau >= 1 and lr > 0 required".into());
        }
        if self.calibration.path.is_none() && self.calibration.samples == 0 {
            return bad("calibration.samples must be >= 1".into());
        }
        if self.frontier.targets.iter().any(|t| !(*t > 0.0)) {
            return bad("frontier.targets must be positive".into());
        }
        Ok(())
    }

    /// Fails when a referenced input file is missing.
    pub fn check_paths(&self) -> Result<()> {
        let (manifest, blob) = crate::model_store::model_paths(&self.paths.model);
        let mut want = vec![manifest, blob];
        want.extend(self.calibration.path.clone());
        want.extend(self.metrics.inputs.clone());
        want.extend(self.metrics.predictions.clone());
        for p in want {
            if !p.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.paths.out.join(file)
    }

    pub fn designer_for(&self, kind: BlockKind) -> Designer {
        self.table.designers.get(kind.tag()).copied().unwrap_or(self.table.designer)
    }

    fn table_config(&self, designer: Designer) -> TableConfig {
        TableConfig {
            bits: self.table.bits.clone(),
            designer,
            objective: self.table.objective,
            samples: self.table.samples,
            seed: stream_seed(self.seed, STREAM_TABLE),
            force_mc: self.table.force_mc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    FitPosterior,
    DesignCodebooks,
    BuildTable,
    Allocate,
    Export,
    Distill,
    Metrics,
    Frontier,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::FitPosterior => "fit-posterior",
            Stage::DesignCodebooks => "design-codebooks",
            Stage::BuildTable => "build-table",
            Stage::Allocate => "allocate",
            Stage::Export => "export",
            Stage::Distill => "distill",
            Stage::Metrics => "metrics",
            Stage::Frontier => "frontier",
        }
    }
}

/// Model, optional network view and calibration inputs.
pub struct Inputs {
    pub manifest: ModelManifest,
    pub tensors: Vec<WeightBlock>,
    pub net: Option<ToyNet>,
    pub calib: Vec<Vec<f64>>,
}

impl Inputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        cfg.check_paths()?;
        let (manifest, mut tensors) = load_model(&cfg.paths.model)?;
        if let Some(g) = cfg.partition.group_size {
            tensors = tensors.into_iter().map(|t| t.with_group_size(g)).collect::<Result<_>>()?;
        }
        let net = if manifest.layers.is_empty() { None } else { Some(ToyNet::from_model(&manifest, &tensors)?) };
        let dim = net.as_ref().map(ToyNet::input_dim);
        let calib = match (&cfg.calibration.path, dim) {
            (Some(p), _) => read_inputs(p, dim)?,
            (None, Some(d)) => random_inputs(cfg.calibration.samples, d, stream_seed(cfg.seed, STREAM_CALIB)),
            (None, None) => Vec::new(),
        };
        Ok(Inputs { manifest, tensors, net, calib })
    }

    fn quantized(&self, cfg: &PipelineConfig) -> impl Iterator<Item = &WeightBlock> {
        let vectors = cfg.partition.quantize_vectors;
        self.tensors.iter().filter(move |t| vectors || t.kind != BlockKind::GenericVector)
    }

    fn layer_of(&self, id: &str) -> Option<usize> {
        self.net.as_ref().and_then(|_| ToyNet::layer_of(&self.manifest, id))
    }

    /// Quantized sub-blocks with their parent tensor ids, in model order.
    pub fn sub_blocks(&self, cfg: &PipelineConfig) -> Result<Vec<(String, WeightBlock)>> {
        let policy = cfg.partition.policy()?;
        let mut out = Vec::new();
        for t in self.quantized(cfg) {
            for b in partition(t, policy)? {
                out.push((t.id.clone(), b));
            }
        }
        Ok(out)
    }
}

/// Reads inputs from a TSV whose `x<i>` columns hold the features.
pub fn read_inputs(path: &Path, dim: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let (header, rows) = tsv::read(path)?;
    let cols: Vec<usize> = (0..)
        .map_while(|i| header.iter().position(|h| *h == format!("x{i}")))
        .collect();
    if cols.is_empty() {
        return Err(Error::parse(path, "no x0.. columns"));
    }
    if let Some(d) = dim {
        if cols.len() != d {
            return Err(Error::parse(path, format!("expected {d} feature columns, found {}", cols.len())));
        }
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| cols.iter().map(|&c| tsv::field(path, r, c, i + 2)).collect())
        .collect()
}

pub fn write_inputs(path: &Path, inputs: &[Vec<f64>]) -> Result<()> {
    let d = inputs.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = inputs.iter().map(|x| x.iter().map(|v| v.to_string()).collect()).collect();
    tsv::write(path, &header, &rows)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(require(path.to_path_buf())?)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Maps `f` over `items` on scoped worker threads; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("worker finished")).collect()
}

// ---------------------------------------------------------------- posterior

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEntry {
    pub id: String,
    pub parent: String,
    pub posterior: BlockPosterior,
}

/// Per-block facts the allocator needs without the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub id: String,
    pub parent: String,
    pub kind: String,
    pub n_weights: usize,
    pub group_size: usize,
    pub saliency: f64,
}

fn fit_tensor(cfg: &PipelineConfig, inputs: &Inputs, idx: usize, t: &WeightBlock) -> Result<BlockPosterior> {
    let pc = &cfg.posterior;
    let seed = stream_seed(cfg.seed, STREAM_POSTERIOR + idx as u64);
    let layer = inputs.layer_of(&t.id);
    let calib_n = layer.map(|_| inputs.calib.len());
    let small = pc.small_calib || calib_n.is_some_and(|n| n < 50);
    let scale = if small { 5.0 } else { 1.0 };
    let oracle: Box<dyn CurvatureOracle> = match layer {
        Some(l) => Box::new(ggn_oracle(inputs.net.as_ref().unwrap(), l, &inputs.calib)?),
        None => {
            warn!("{}: no curvature source, using unit curvature", t.id);
            Box::new(DiagonalOracle(vec![1.0; t.len()]))
        }
    };
    let damping = if pc.median_damping {
        median_damping(&hutchinson_diag(oracle.as_ref(), t.len(), pc.probes, seed)?) * scale
    } else {
        pc.damping * scale
    };
    match (pc.kind, layer) {
        (PosteriorKind::Diag, _) => {
            if pc.median_damping {
                let h = hutchinson_diag(oracle.as_ref(), t.len(), pc.probes, seed)?;
                posterior_from_curvature(t.values_f64(), &h, damping, FitMeta { probes: pc.probes, seed })
            } else {
                fit_diag_laplace(t, oracle.as_ref(), pc.probes, damping, seed)
            }
        }
        (PosteriorKind::Lowrank, _) => fit_lowrank_diag(t, oracle.as_ref(), pc.rank, pc.probes, damping, seed),
        (PosteriorKind::Kfac, Some(l)) => {
            let batches = kfac_batches(inputs.net.as_ref().unwrap(), l, &inputs.calib, pc.batch_size, seed)?;
            fit_kfac(t, &batches, pc.ema_decay, damping)
        }
        (PosteriorKind::Kfac, None) => {
            warn!("{}: K-FAC needs a network layer, fitting a diagonal posterior", t.id);
            fit_diag_laplace(t, oracle.as_ref(), pc.probes, damping, seed)
        }
    }
}

/// Fits one posterior per quantized tensor and splits it over sub-blocks.
pub fn compute_posteriors(cfg: &PipelineConfig, inputs: &Inputs) -> Result<(Vec<BlockInfo>, Vec<PosteriorEntry>)> {
    let tensors: Vec<&WeightBlock> = inputs.quantized(cfg).collect();
    let posts = par_map(&tensors, |i, t| fit_tensor(cfg, inputs, i, t).map_err(|e| e.in_stage("fit-posterior", Some(&t.id))))?;
    let policy = cfg.partition.policy()?;
    let mut infos = Vec::new();
    let mut entries = Vec::new();
    for (t, post) in tensors.iter().zip(posts) {
        let subs = partition(t, policy)?;
        let mut start = 0;
        for b in subs {
            let p = if policy == PartitionPolicy::PerTensor {
                post.clone()
            } else {
                post.slice_diagonal(start, b.len()).map_err(|_| {
                    Error::Config(format!(
                        "{:?} posteriors cannot be split by partition policy {}; use per-tensor",
                        cfg.posterior.kind, cfg.partition.policy
                    ))
                })?
            };
            start += b.len();
            infos.push(BlockInfo {
                id: b.id.clone(),
                parent: t.id.clone(),
                kind: b.kind.tag().to_string(),
                n_weights: b.len(),
                group_size: b.group_size,
                saliency: p.saliency().map_err(|e| e.in_stage("fit-posterior", Some(&b.id)))?,
            });
            entries.push(PosteriorEntry { id: b.id.clone(), parent: t.id.clone(), posterior: p });
        }
    }
    Ok((infos, entries))
}

pub fn write_block_infos(path: &Path, infos: &[BlockInfo]) -> Result<()> {
    let rows: Vec<Vec<String>> = infos
        .iter()
        .map(|b| {
            vec![
                b.id.clone(),
                b.parent.clone(),
                b.kind.clone(),
                b.n_weights.to_string(),
                b.group_size.to_string(),
                b.saliency.to_string(),
            ]
        })
        .collect();
    tsv::write(path, &["block", "parent", "kind", "n_weights", "group_size", "saliency"], &rows)
}

pub fn read_block_infos(path: &Path) -> Result<Vec<BlockInfo>> {
    let (header, rows) = tsv::read(&require(path.to_path_buf())?)?;
    let c = |n| tsv::column(path, &header, n);
    let (ci, cp, ck, cn, cg, cs) = (c("block")?, c("parent")?, c("kind")?, c("n_weights")?, c("group_size")?, c("saliency")?);
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 2;
            Ok(BlockInfo {
                id: tsv::field(path, r, ci, line)?,
                parent: tsv::field(path, r, cp, line)?,
                kind: tsv::field(path, r, ck, line)?,
                n_weights: tsv::field(path, r, cn, line)?,
                group_size: tsv::field(path, r, cg, line)?,
                saliency: tsv::field(path, r, cs, line)?,
            })
        })
        .collect()
}

pub fn fit_posterior_stage(cfg: &PipelineConfig) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let (infos, entries) = compute_posteriors(cfg, &inputs)?;
    fs::create_dir_all(cfg.out_dir())?;
    write_block_infos(&cfg.out(BLOCKS_FILE), &infos)?;
    write_json(&cfg.out(POSTERIORS_FILE), &entries)?;
    info!("fit-posterior: {} blocks", entries.len());
    Ok(())
}

// ---------------------------------------------------------------- codebooks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookSet {
    pub designer: Designer,
    pub codebooks: Vec<(u32, Codebook)>,
}

fn designers_in_use(cfg: &PipelineConfig, kinds: impl Iterator<Item = String>) -> Vec<Designer> {
    let mut out = Vec::new();
    for tag in kinds {
        let d = cfg.table.designers.get(&tag).copied().unwrap_or(cfg.table.designer);
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

pub fn compute_codebooks(cfg: &PipelineConfig, designers: &[Designer]) -> Result<Vec<CodebookSet>> {
    designers
        .iter()
        .map(|&d| Ok(CodebookSet { designer: d, codebooks: design_codebooks(&cfg.table_config(d))? }))
        .collect()
}

pub fn design_codebooks_stage(cfg: &PipelineConfig) -> Result<()> {
    let infos = read_block_infos(&cfg.out(BLOCKS_FILE))?;
    let sets = compute_codebooks(cfg, &designers_in_use(cfg, infos.iter().map(|b| b.kind.clone())))?;
    write_json(&cfg.out(CODEBOOKS_FILE), &sets)?;
    info!("design-codebooks: {} designer(s)", sets.len());
    Ok(())
}

fn codebooks_for(sets: &[CodebookSet], d: Designer) -> Result<&[(u32, Codebook)]> {
    sets.iter()
        .find(|s| s.designer == d)
        .map(|s| s.codebooks.as_slice())
        .ok_or_else(|| Error::invalid(format!("no codebooks designed for {d}")))
}

// ---------------------------------------------------------------- loss table

/// Proxy resources owned for the duration of a stage.
struct ProxyData {
    activations: HashMap<String, DMatrix<f64>>,
    layers: HashMap<String, usize>,
}

impl ProxyData {
    fn new(cfg: &PipelineConfig, inputs: &Inputs, entries: &[PosteriorEntry]) -> Result<Self> {
        let mut d = ProxyData { activations: HashMap::new(), layers: HashMap::new() };
        if cfg.table.proxy == ProxyKind::WeightMse {
            return Ok(d);
        }
        let net = inputs
            .net
            .as_ref()
            .ok_or_else(|| Error::Config(format!("proxy {:?} needs a model with layer topology", cfg.table.proxy)))?;
        let mut cache: HashMap<usize, DMatrix<f64>> = HashMap::new();
        for e in entries {
            let layer = inputs
                .layer_of(&e.parent)
                .ok_or_else(|| Error::Config(format!("block {} is not a layer weight; use the weight-mse proxy", e.id)))?;
            match cfg.table.proxy {
                ProxyKind::LayerOutput => {
                    if !cache.contains_key(&layer) {
                        cache.insert(layer, net.layer_inputs(layer, &inputs.calib)?);
                    }
                    d.activations.insert(e.id.clone(), cache[&layer].clone());
                }
                ProxyKind::LogitKl => {
                    if e.id != e.parent {
                        return Err(Error::Config("the logit-kl proxy needs the per-tensor partition".into()));
                    }
                    d.layers.insert(e.id.clone(), layer);
                }
                ProxyKind::WeightMse => unreachable!(),
            }
        }
        Ok(d)
    }

    fn proxy<'a>(&'a self, cfg: &PipelineConfig, inputs: &'a Inputs) -> ProxyConfig<'a> {
        match cfg.table.proxy {
            ProxyKind::WeightMse => ProxyConfig::WeightMse,
            ProxyKind::LayerOutput => ProxyConfig::LayerOutput { activations: &self.activations },
            ProxyKind::LogitKl => ProxyConfig::LogitKl {
                net: inputs.net.as_ref().unwrap(),
                layers: &self.layers,
                inputs: &inputs.calib,
                tau: cfg.table.tau,
                form: cfg.table.kl_form,
            },
        }
    }
}

fn find_sub_block<'a>(subs: &'a [(String, WeightBlock)], id: &str) -> Result<&'a WeightBlock> {
    subs.iter().map(|(_, b)| b).find(|b| b.id == id).ok_or_else(|| Error::MissingBlock(id.to_string()))
}

/// Loss table over every sub-block, each evaluated with its kind's designer.
pub fn compute_table(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    entries: &[PosteriorEntry],
    sets: &[CodebookSet],
) -> Result<LossTable> {
    let subs = inputs.sub_blocks(cfg)?;
    let data = ProxyData::new(cfg, inputs, entries)?;
    let proxy = data.proxy(cfg, inputs);
    let seed = derived(cfg.table_config(cfg.table.designer).seed, 1000).next_u64();
    let per_block = par_map(entries, |_, e| {
        let block = find_sub_block(&subs, &e.id)?;
        let designer = cfg.designer_for(block.kind);
        let tc = cfg.table_config(designer);
        table_rows(block, &e.posterior, &tc, proxy, codebooks_for(sets, designer)?, seed)
            .map_err(|err| err.in_stage("build-table", Some(&e.id)))
    })?;
    let mut table = LossTable::from_rows(cfg.table.bits.clone(), per_block.into_iter().flatten().collect())?;
    table.isotonic_clamp();
    Ok(table)
}

pub fn build_table_stage(cfg: &PipelineConfig) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let entries: Vec<PosteriorEntry> = read_json(&cfg.out(POSTERIORS_FILE))?;
    let sets: Vec<CodebookSet> = read_json(&cfg.out(CODEBOOKS_FILE))?;
    let table = compute_table(cfg, &inputs, &entries, &sets)?;
    table.write_tsv(&cfg.out(TABLE_FILE))?;
    info!("build-table: {} rows", table.rows.len());
    Ok(())
}

// ---------------------------------------------------------------- allocation

/// Allocation problem over `table` with costs from the configured cost model.
pub fn allocation_problem(cfg: &PipelineConfig, table: &LossTable, infos: &[BlockInfo], budget: Option<u64>) -> Result<AllocationProblem> {
    let mut blocks = Vec::with_capacity(infos.len());
    for b in infos {
        blocks.push(AllocBlock::from_table(table, &b.id, b.n_weights, b.group_size, &cfg.cost, b.saliency)?);
    }
    let n: u64 = infos.iter().map(|b| b.n_weights as u64).sum();
    let budget = match (budget, cfg.budget.total_bits, cfg.budget.target_bits) {
        (Some(b), _, _) => b,
        (None, Some(b), _) => b,
        (None, None, Some(t)) => budget_from_target(t, n)?,
        (None, None, None) => return Err(Error::Config("no budget configured".into())),
    };
    let a = &cfg.allocator;
    let mut p = AllocationProblem {
        blocks,
        budget,
        eta: a.eta,
        packing: PackingModel { lane_bits: a.lane_bits, preferred_bits: a.preferred_bits.clone() },
        lambda_reg: a.lambda_reg,
        use_latency: false,
    };
    let parents: HashMap<&str, &str> = infos.iter().map(|b| (b.id.as_str(), b.parent.as_str())).collect();
    p.apply_bit_floors(|id| a.bit_floors.get(id).or_else(|| parents.get(id).and_then(|par| a.bit_floors.get(*par))).copied());
    p.normalize()?;
    Ok(p)
}

/// Greedy allocation, with re-score sweeps when configured.
pub fn compute_allocation(
    cfg: &PipelineConfig,
    p: &AllocationProblem,
    rescore: Option<(&Inputs, &[PosteriorEntry], &[CodebookSet])>,
    target: Option<f64>,
) -> Result<Allocation> {
    let a = &cfg.allocator;
    let mut alloc = match rescore.filter(|_| a.rescore_every > 0 && a.rescore_top_k > 0) {
        None => greedy_allocate(p)?,
        Some((inputs, entries, sets)) => {
            let subs = inputs.sub_blocks(cfg)?;
            let data = ProxyData::new(cfg, inputs, entries)?;
            let proxy = data.proxy(cfg, inputs);
            let base = stream_seed(cfg.seed, STREAM_RESCORE);
            let mut calls = 0u64;
            let mut rescorer = |_: usize, blk: &AllocBlock| -> Result<Vec<f64>> {
                calls += 1;
                let e = entries.iter().find(|e| e.id == blk.id).ok_or_else(|| Error::MissingBlock(blk.id.clone()))?;
                let block = find_sub_block(&subs, &blk.id)?;
                let designer = cfg.designer_for(block.kind);
                let tc = cfg.table_config(designer);
                let rows = table_rows(block, &e.posterior, &tc, proxy, codebooks_for(sets, designer)?, derived(base, calls).next_u64())?;
                blk.options
                    .iter()
                    .map(|o| {
                        rows.iter()
                            .find(|r| r.bits == o.bits)
                            .map(|r| r.loss)
                            .ok_or_else(|| Error::MissingBlock(format!("{} at {} bits", blk.id, o.bits)))
                    })
                    .collect()
            };
            greedy_allocate_with_rescore(p, Rescore { every: a.rescore_every, top_k: a.rescore_top_k, rescorer: &mut rescorer })?
        }
    };
    if let Some(t) = target {
        alloc.check_target(t);
    }
    Ok(alloc)
}

fn write_allocation(cfg: &PipelineConfig, p: &AllocationProblem, alloc: &Allocation, table: &LossTable) -> Result<()> {
    let rows = p
        .blocks
        .iter()
        .zip(&alloc.bits)
        .map(|(b, &m)| {
            let o = b.options.iter().find(|o| o.bits == m).unwrap();
            let designer = table.get(&b.id, m).map(|r| r.designer).unwrap_or(cfg.table.designer);
            vec![b.id.clone(), m.to_string(), designer.to_string(), o.loss.to_string(), o.cost.to_string()]
        })
        .collect::<Vec<_>>();
    tsv::write(&cfg.out(ALLOCATION_FILE), &["block", "bits", "designer", "loss", "cost"], &rows)?;
    let trace = alloc
        .trace
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                s.id.clone(),
                s.from.to_string(),
                s.to.to_string(),
                s.gamma.to_string(),
                s.delta.to_string(),
                s.cost_after.to_string(),
                s.loss_after.to_string(),
            ]
        })
        .collect::<Vec<_>>();
    tsv::write(&cfg.out(TRACE_FILE), &["step", "block", "from", "to", "gamma", "delta", "cost_after", "loss_after"], &trace)?;
    write_json(&cfg.out(ALLOCATION_JSON), alloc)
}

/// `(block, bits, designer)` rows of an allocation file.
pub fn read_allocation(path: &Path) -> Result<Vec<(String, u32, Designer)>> {
    let (header, rows) = tsv::read(&require(path.to_path_buf())?)?;
    let (cb, cm, cd) = (tsv::column(path, &header, "block")?, tsv::column(path, &header, "bits")?, tsv::column(path, &header, "designer")?);
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let designer: String = tsv::field(path, r, cd, i + 2)?;
            Ok((
                tsv::field(path, r, cb, i + 2)?,
                tsv::field(path, r, cm, i + 2)?,
                designer.parse().map_err(|e: Error| Error::parse(path, e))?,
            ))
        })
        .collect()
}

pub fn allocate_stage(cfg: &PipelineConfig) -> Result<Allocation> {
    let table = LossTable::read_tsv(&require(cfg.out(TABLE_FILE))?)?;
    let infos = read_block_infos(&cfg.out(BLOCKS_FILE))?;
    let p = allocation_problem(cfg, &table, &infos, None)?;
    let alloc = if cfg.allocator.rescore_every > 0 && cfg.allocator.rescore_top_k > 0 {
        let inputs = Inputs::load(cfg)?;
        let entries: Vec<PosteriorEntry> = read_json(&cfg.out(POSTERIORS_FILE))?;
        let sets: Vec<CodebookSet> = read_json(&cfg.out(CODEBOOKS_FILE))?;
        compute_allocation(cfg, &p, Some((&inputs, &entries, &sets)), cfg.budget.target_bits)?
    } else {
        compute_allocation(cfg, &p, None, cfg.budget.target_bits)?
    };
    write_allocation(cfg, &p, &alloc, &table)?;
    info!(
        "allocate: {} upgrades, {:.4} bits/weight, loss {:.6e}",
        alloc.trace.len(),
        alloc.average_bits,
        alloc.total_loss
    );
    Ok(alloc)
}

// ---------------------------------------------------------------- export

pub fn compute_packed(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    assignment: &[(String, u32, Designer)],
    sets: &[CodebookSet],
) -> Result<PackedModel> {
    let subs = inputs.sub_blocks(cfg)?;
    if subs.len() != assignment.len() {
        return Err(Error::DimensionMismatch { expected: subs.len(), got: assignment.len() });
    }
    let packed = par_map(&subs, |_, (_, b)| {
        let (_, m, designer) = assignment
            .iter()
            .find(|(id, _, _)| *id == b.id)
            .ok_or_else(|| Error::MissingBlock(b.id.clone()))?;
        let cb = codebooks_for(sets, *designer)?
            .iter()
            .find(|(bits, _)| bits == m)
            .map(|(_, cb)| cb)
            .ok_or_else(|| Error::invalid(format!("no {designer} codebook at {m} bits")))?;
        pack_block(b, *m, *designer, cb, &cfg.cost, cfg.table.lloyd_export).map_err(|e| e.in_stage("export", Some(&b.id)))
    })?;
    let vectors = cfg.partition.quantize_vectors;
    let passthrough = inputs
        .tensors
        .iter()
        .filter(|t| !vectors && t.kind == BlockKind::GenericVector)
        .cloned()
        .collect();
    Ok(PackedModel { blocks: packed, passthrough, cost_model: cfg.cost })
}

/// Re-imports the packed model and compares it with `model` and the
/// allocation's total cost.
pub fn verify_packed(path: &Path, model: &PackedModel, expected_bits: Option<u64>) -> Result<()> {
    let back = import_packed(path).map_err(|e| Error::Verification(e.to_string()))?;
    if back != *model {
        return Err(Error::Verification("re-imported model differs from the exported one".into()));
    }
    if let Some(bits) = expected_bits {
        if back.total_bits() != bits {
            return Err(Error::Verification(format!(
                "packed ledger totals {} bits but the allocation costs {bits}",
                back.total_bits()
            )));
        }
    }
    Ok(())
}

pub fn export_stage(cfg: &PipelineConfig, verify: bool) -> Result<PackedModel> {
    let inputs = Inputs::load(cfg)?;
    let assignment = read_allocation(&cfg.out(ALLOCATION_FILE))?;
    let sets: Vec<CodebookSet> = read_json(&cfg.out(CODEBOOKS_FILE))?;
    let model = compute_packed(cfg, &inputs, &assignment, &sets)?;
    let path = cfg.out(PACKED_FILE);
    export_packed(&model, &path)?;
    if verify {
        let alloc: Option<Allocation> = cfg.out(ALLOCATION_JSON).exists().then(|| read_json(&cfg.out(ALLOCATION_JSON))).transpose()?;
        verify_packed(&path, &model, alloc.map(|a| a.total_cost))?;
        info!("export: verified {}", path.display());
    }
    Ok(model)
}

// ---------------------------------------------------------------- distill

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub kl_trace: Vec<f64>,
    pub halvings: u32,
    /// False when the tuned scales did not lower the KL and were discarded.
    pub applied: bool,
}

/// Tunes the packed model's group scales against the posterior-predictive
/// teacher on the calibration inputs.
pub fn compute_distill(cfg: &PipelineConfig, inputs: &Inputs, entries: &[PosteriorEntry], model: &mut PackedModel) -> Result<DistillSummary> {
    let net = inputs
        .net
        .as_ref()
        .ok_or_else(|| Error::Config("distillation needs a model with layer topology".into()))?;
    if cfg.partition.policy()? != PartitionPolicy::PerTensor {
        return Err(Error::Config("distillation needs the per-tensor partition".into()));
    }
    let mut layers = Vec::new();
    let mut scales = Vec::new();
    let mut owners = Vec::new();
    for (bi, b) in model.blocks.iter().enumerate() {
        let Some(layer) = inputs.layer_of(&b.id) else { continue };
        let q = b.indices()?;
        let offsets = (0..b.n_weights)
            .map(|i| {
                let a = &b.affines[i / b.group_size];
                a.level(q[i / b.dim], i % b.dim, b.dim) - a.zero_point
            })
            .collect();
        layers.push(ScaledLayer { layer, offsets, group_size: b.group_size });
        scales.push(b.affines.iter().map(|a| a.scale).collect::<Vec<_>>());
        owners.push(bi);
    }
    if layers.is_empty() {
        return Err(Error::Config("no packed block is a network layer weight".into()));
    }
    let posts: Vec<(usize, &BlockPosterior)> = layers
        .iter()
        .zip(&owners)
        .map(|(l, &bi)| {
            let id = &model.blocks[bi].id;
            entries
                .iter()
                .find(|e| e.id == *id)
                .map(|e| (l.layer, &e.posterior))
                .ok_or_else(|| Error::MissingBlock(id.clone()))
        })
        .collect::<Result<_>>()?;
    let d = &cfg.distill;
    let t = teacher(net, &posts, &inputs.calib, d.samples, d.tau, stream_seed(cfg.seed, STREAM_TEACHER))?;
    let r = distill_scales(net, &layers, &scales, &t, &inputs.calib, d.steps, d.lr)?;
    let applied = r.kl_trace.last() < r.kl_trace.first();
    if applied {
        for (&bi, s) in owners.iter().zip(&r.scales) {
            for (a, &si) in model.blocks[bi].affines.iter_mut().zip(s) {
                a.scale = si;
            }
        }
    } else {
        warn!("distillation did not lower the KL; keeping the exported scales");
    }
    Ok(DistillSummary { kl_trace: r.kl_trace, halvings: r.halvings, applied })
}

pub fn distill_stage(cfg: &PipelineConfig) -> Result<DistillSummary> {
    let inputs = Inputs::load(cfg)?;
    let entries: Vec<PosteriorEntry> = read_json(&cfg.out(POSTERIORS_FILE))?;
    let path = require(cfg.out(PACKED_FILE))?;
    let mut model = import_packed(&path)?;
    let summary = compute_distill(cfg, &inputs, &entries, &mut model)?;
    export_packed(&model, &path)?;
    let rows: Vec<Vec<String>> = summary.kl_trace.iter().enumerate().map(|(i, k)| vec![i.to_string(), k.to_string()]).collect();
    tsv::write(&cfg.out(DISTILL_TRACE_FILE), &["step", "kl"], &rows)?;
    info!(
        "distill: KL {:.6e} -> {:.6e}",
        summary.kl_trace.first().copied().unwrap_or(0.0),
        summary.kl_trace.last().copied().unwrap_or(0.0)
    );
    Ok(summary)
}

// ---------------------------------------------------------------- metrics

/// Replaces the network's layer weights with the packed model's.
pub fn quantized_net(net: &ToyNet, manifest: &ModelManifest, model: &PackedModel) -> Result<ToyNet> {
    let mut out = net.clone();
    for b in &model.blocks {
        if let Some(layer) = ToyNet::layer_of(manifest, &b.id) {
            out = out.with_weight(layer, &b.dequantize()?)?;
        }
    }
    Ok(out)
}

/// Agreement metrics of the packed model against the full-precision
/// network's own predictions (no labels), plus per-block weight fidelity.
pub fn metrics_stage(cfg: &PipelineConfig) -> Result<BTreeMap<String, f64>> {
    if let Some(path) = &cfg.metrics.predictions {
        let preds = PredictionSet::read_tsv(&require(path.clone())?)?;
        let mut out = BTreeMap::new();
        prediction_metrics(cfg, &preds, &mut out)?;
        write_metrics(cfg, &out)?;
        return Ok(out);
    }
    let inputs = Inputs::load(cfg)?;
    let model = import_packed(&require(cfg.out(PACKED_FILE))?)?;
    let mut out = BTreeMap::new();
    out.insert("average_bits".to_string(), model.average_bits());
    out.insert("total_bits".to_string(), model.total_bits() as f64);

    let mut block_rows = Vec::new();
    let mut err = 0.0;
    let mut sig = 0.0;
    for b in &model.blocks {
        let original = inputs
            .tensors
            .iter()
            .find(|t| t.id == b.id)
            .map(|t| t.values_f64())
            .or_else(|| {
                inputs.sub_blocks(cfg).ok()?.into_iter().find(|(_, s)| s.id == b.id).map(|(_, s)| s.values_f64())
            })
            .ok_or_else(|| Error::MissingBlock(b.id.clone()))?;
        let recon = b.dequantize()?;
        let peak = original.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let snr = snr_psnr(&original, &recon, peak)?;
        err += snr.mse * original.len() as f64;
        sig += original.iter().map(|v| v * v).sum::<f64>();
        let (u, h) = codebook_stats(&b.indices()?, 1usize << b.index_bits())?;
        block_rows.push(vec![
            b.id.clone(),
            b.bits.to_string(),
            b.designer.to_string(),
            snr.mse.to_string(),
            snr.snr_db.to_string(),
            snr.psnr_db.to_string(),
            u.to_string(),
            h.to_string(),
        ]);
    }
    tsv::write(
        &cfg.out(BLOCK_METRICS_FILE),
        &["block", "bits", "designer", "mse", "snr_db", "psnr_db", "utilization", "entropy"],
        &block_rows,
    )?;
    if sig > 0.0 && err > 0.0 {
        out.insert("weight_snr_db".to_string(), 10.0 * (sig / err).log10());
    }

    if let Some(net) = &inputs.net {
        let eval = match &cfg.metrics.inputs {
            Some(p) => read_inputs(p, Some(net.input_dim()))?,
            None => random_inputs(cfg.metrics.samples, net.input_dim(), stream_seed(cfg.seed, STREAM_EVAL)),
        };
        let qnet = quantized_net(net, &inputs.manifest, &model)?;
        let mut labels = Vec::with_capacity(eval.len());
        let mut probs = Vec::with_capacity(eval.len());
        for x in &eval {
            let fp = net.forward(x)?;
            labels.push(argmax(&fp));
            probs.push(softmax(&qnet.forward(x)?, 1.0));
        }
        let preds = PredictionSet::from_probs(probs, &labels)?;
        preds.write_tsv(&cfg.out(PREDICTIONS_FILE))?;
        prediction_metrics(cfg, &preds, &mut out)?;
    }
    write_metrics(cfg, &out)?;
    Ok(out)
}

fn prediction_metrics(cfg: &PipelineConfig, preds: &PredictionSet, out: &mut BTreeMap<String, f64>) -> Result<()> {
    let binning = BinningConfig { bins: cfg.metrics.bins, boundary_seeds: cfg.metrics.boundary_seeds, seed: cfg.seed };
    let (ece, mce) = ece_mce(preds, &binning)?;
    out.insert("top1".to_string(), top1_accuracy(preds)?);
    out.insert("ece".to_string(), ece);
    out.insert("mce".to_string(), mce);
    if let Ok((worst, cvar)) = worst_k_and_cvar(preds, cfg.metrics.worst_k_percent, cfg.metrics.cvar_alpha) {
        out.insert("worst_k".to_string(), worst);
        out.insert("cvar".to_string(), cvar);
    }
    Ok(())
}

fn write_metrics(cfg: &PipelineConfig, out: &BTreeMap<String, f64>) -> Result<()> {
    std::fs::create_dir_all(cfg.out_dir())?;
    let rows: Vec<Vec<String>> = out.iter().map(|(k, v)| vec![k.clone(), v.to_string()]).collect();
    tsv::write(&cfg.out(METRICS_FILE), &["metric", "value"], &rows)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
}

// ---------------------------------------------------------------- frontier

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub seed: u64,
    pub target: f64,
    pub budget: u64,
    pub loss: f64,
    pub average_bits: f64,
    pub off_target: bool,
    pub uniform_loss: f64,
    pub uniform_bits: f64,
    pub random_loss: f64,
    pub random_bits: f64,
}

/// Loss-vs-bits sweep: per seed, one table and one allocation per target,
/// alongside uniform-fill and random baselines at the same budget.
pub fn compute_frontier(cfg: &PipelineConfig, inputs: &Inputs) -> Result<Vec<FrontierRow>> {
    let seeds = if cfg.frontier.seeds.is_empty() { vec![cfg.seed] } else { cfg.frontier.seeds.clone() };
    let mut rows = Vec::new();
    for seed in seeds {
        let run = PipelineConfig { seed, ..cfg.clone() };
        let (infos, entries) = compute_posteriors(&run, inputs)?;
        let sets = compute_codebooks(&run, &designers_in_use(&run, infos.iter().map(|b| b.kind.clone())))?;
        let table = compute_table(&run, inputs, &entries, &sets)?;
        let n: u64 = infos.iter().map(|b| b.n_weights as u64).sum();
        for &target in &cfg.frontier.targets {
            let budget = budget_from_target(target, n)?;
            let p = allocation_problem(&run, &table, &infos, Some(budget))?;
            let a = compute_allocation(&run, &p, Some((inputs, &entries, &sets)), Some(target))?;
            let u = uniform_fill_allocation(&p)?;
            let r = random_allocation(&p, stream_seed(seed, STREAM_RANDOM))?;
            rows.push(FrontierRow {
                seed,
                target,
                budget,
                loss: a.total_loss,
                average_bits: a.average_bits,
                off_target: a.off_target,
                uniform_loss: u.total_loss,
                uniform_bits: u.average_bits,
                random_loss: r.total_loss,
                random_bits: r.average_bits,
            });
        }
    }
    Ok(rows)
}

pub fn frontier_stage(cfg: &PipelineConfig) -> Result<Vec<FrontierRow>> {
    let inputs = Inputs::load(cfg)?;
    let rows = compute_frontier(cfg, &inputs)?;
    fs::create_dir_all(cfg.out_dir())?;
    let text: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.target.to_string(),
                r.budget.to_string(),
                r.loss.to_string(),
                r.average_bits.to_string(),
                r.off_target.to_string(),
                r.uniform_loss.to_string(),
                r.uniform_bits.to_string(),
                r.random_loss.to_string(),
                r.random_bits.to_string(),
            ]
        })
        .collect();
    tsv::write(
        &cfg.out(FRONTIER_FILE),
        &[
            "seed",
            "target",
            "budget",
            "loss",
            "average_bits",
            "off_target",
            "uniform_loss",
            "uniform_bits",
            "random_loss",
            "random_bits",
        ],
        &text,
    )?;
    Ok(rows)
}

// ---------------------------------------------------------------- driver

/// Runs one stage, tagging its errors with the stage name.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, verify: bool) -> Result<()> {
    let r = match stage {
        Stage::FitPosterior => fit_posterior_stage(cfg),
        Stage::DesignCodebooks => design_codebooks_stage(cfg),
        Stage::BuildTable => build_table_stage(cfg),
        Stage::Allocate => allocate_stage(cfg).map(drop),
        Stage::Export => export_stage(cfg, verify).map(drop),
        Stage::Distill => distill_stage(cfg).map(drop),
        Stage::Metrics => metrics_stage(cfg).map(drop),
        Stage::Frontier => frontier_stage(cfg).map(drop),
    };
    r.map_err(|e| match e {
        e @ (Error::Config(_) | Error::Verification(_)) => e,
        e => e.in_stage(stage.name(), None),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub id: String,
    pub bits: u32,
    pub designer: Designer,
    pub loss: f64,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub stages: Vec<String>,
    pub n_weights: u64,
    pub budget: u64,
    pub target_bits: Option<f64>,
    pub average_bits: f64,
    pub off_target: bool,
    pub total_loss: f64,
    pub total_cost: u64,
    pub blocks: Vec<BlockReport>,
    pub trace: Vec<crate::allocator::UpgradeStep>,
    pub loss_table: Vec<LossRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_trace: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<BTreeMap<String, f64>>,
    /// Wall times; written to their own file so the report stays reproducible.
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

/// Posterior → codebooks → table → allocation → export (verified) →
/// optional distillation → metrics. Writes `report.json` and `timings.tsv`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(PackedModel, Report)> {
    cfg.validate()?;
    cfg.check_paths()?;
    fs::create_dir_all(cfg.out_dir())?;
    let has_net = !load_model(&cfg.paths.model)?.0.layers.is_empty();
    let mut stages = vec![Stage::FitPosterior, Stage::DesignCodebooks, Stage::BuildTable, Stage::Allocate, Stage::Export];
    if cfg.distill.enabled {
        stages.push(Stage::Distill);
    }
    if cfg.metrics.enabled {
        stages.push(Stage::Metrics);
    }
    let mut timings = Vec::new();
    for &s in &stages {
        let t0 = Instant::now();
        run_stage(cfg, s, true)?;
        timings.push(StageTiming { stage: s.name().to_string(), seconds: t0.elapsed().as_secs_f64() });
    }
    let model = import_packed(&cfg.out(PACKED_FILE))?;
    let alloc: Allocation = read_json(&cfg.out(ALLOCATION_JSON))?;
    let table = LossTable::read_tsv(&cfg.out(TABLE_FILE))?;
    let assignment = read_allocation(&cfg.out(ALLOCATION_FILE))?;
    let (header, cost_rows) = tsv::read(&cfg.out(ALLOCATION_FILE))?;
    let (cl, cc) = (tsv::column(&cfg.out(ALLOCATION_FILE), &header, "loss")?, tsv::column(&cfg.out(ALLOCATION_FILE), &header, "cost")?);
    let blocks = assignment
        .into_iter()
        .zip(&cost_rows)
        .enumerate()
        .map(|(i, ((id, bits, designer), r))| {
            let path = cfg.out(ALLOCATION_FILE);
            Ok(BlockReport { id, bits, designer, loss: tsv::field(&path, r, cl, i + 2)?, cost: tsv::field(&path, r, cc, i + 2)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let kl_trace = if cfg.distill.enabled {
        let (_, rows) = tsv::read(&cfg.out(DISTILL_TRACE_FILE))?;
        Some(rows.iter().enumerate().map(|(i, r)| tsv::field(&cfg.out(DISTILL_TRACE_FILE), r, 1, i + 2)).collect::<Result<Vec<f64>>>()?)
    } else {
        None
    };
    let metrics = if cfg.metrics.enabled {
        let (_, rows) = tsv::read(&cfg.out(METRICS_FILE))?;
        Some(
            rows.iter()
                .enumerate()
                .map(|(i, r)| Ok((r[0].clone(), tsv::field(&cfg.out(METRICS_FILE), r, 1, i + 2)?)))
                .collect::<Result<BTreeMap<_, _>>>()?,
        )
    } else {
        None
    };
    if !has_net && cfg.distill.enabled {
        warn!("distillation requested without network topology");
    }
    let report = Report {
        seed: cfg.seed,
        stages: stages.iter().map(|s| s.name().to_string()).collect(),
        n_weights: model.n_weights(),
        budget: alloc.budget,
        target_bits: cfg.budget.target_bits,
        average_bits: alloc.average_bits,
        off_target: alloc.off_target,
        total_loss: alloc.total_loss,
        total_cost: alloc.total_cost,
        blocks,
        trace: alloc.trace,
        loss_table: table.rows,
        kl_trace,
        metrics,
        timings,
    };
    write_json(&cfg.out(REPORT_FILE), &report)?;
    let rows: Vec<Vec<String>> = report.timings.iter().map(|t| vec![t.stage.clone(), format!("{:.6}", t.seconds)]).collect();
    tsv::write(&cfg.out(TIMINGS_FILE), &["stage", "seconds"], &rows)?;
    Ok((model, report))
}

/// Writes a seeded toy MLP (`dims = [input, hidden.., classes]`), its
/// calibration inputs and a config next to them; returns the config path.
pub fn make_toy(dir: &Path, dims: &[usize], seed: u64, target_bits: f64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let net = ToyNet::random(dims, seed)?;
    let (manifest, blocks) = net.to_model()?;
    save_model(&manifest, &blocks, &dir.join("model.manifest"))?;
    write_inputs(&dir.join("calib.tsv"), &random_inputs(128, dims[0], stream_seed(seed, STREAM_CALIB)))?;
    let cfg = PipelineConfig {
        seed,
        paths: PathsConfig { model: "model.manifest".into(), out: "out".into() },
        calibration: CalibrationConfig { path: Some("calib.tsv".into()), samples: 128 },
        budget: BudgetConfig { target_bits: Some(target_bits), total_bits: None },
        ..Default::default()
    };
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(dir: &Path, target: f64) -> PipelineConfig {
        let path = make_toy(dir, &[16, 64, 64, 8], 7, target).unwrap();
        PipelineConfig::load(&path).unwrap()
    }

    #[test]
    fn config_defaults_and_budget_rule() {
        let cfg = PipelineConfig::from_toml("[budget]\ntarget_bits = 3.0\n", Path::new("/tmp")).unwrap();
        assert_eq!(cfg.posterior.probes, 16);
        assert_eq!(cfg.posterior.damping, 1e-3);
        assert_eq!(cfg.distill.samples, 8);
        assert_eq!(cfg.distill.tau, 2.0);
        assert_eq!(cfg.distill.steps, 500);
        assert_eq!(cfg.paths.model, Path::new("/tmp/model.manifest"));
        for bad in ["", "[budget]\ntarget_bits = 3.0\ntotal_bits = 100\n", "[budget]\ntotal_bits = 1\n[bogus]\n"] {
            assert!(matches!(PipelineConfig::from_toml(bad, Path::new(".")), Err(Error::Config(_))), "{bad:?}");
        }
        let cfg = PipelineConfig::from_toml(
            "[budget]\ntotal_bits = 9\n[table]\ndesigner = \"lloyd-vector-2\"\nobjective = \"clipped-tail\"\n[table.designers]\ngeneric-vector = \"uniform\"\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.table.designer, Designer::LloydVector { dim: 2 });
        assert_eq!(cfg.designer_for(BlockKind::GenericVector), Designer::Uniform);
        assert_eq!(cfg.table.objective, RangeObjective::ClippedTail);
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partition_policies_parse() {
        let p = |s: &str| PartitionConfig { policy: s.into(), ..Default::default() }.policy();
        assert_eq!(p("per-tensor").unwrap(), PartitionPolicy::PerTensor);
        assert_eq!(p("fixed:128").unwrap(), PartitionPolicy::FixedSize(128));
        assert!(p("fixed:0").is_err() && p("rows").is_err());
    }

    #[test]
    fn pipeline_hits_target_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy(dir.path(), 3.0);
        let (model, report) = run_pipeline(&cfg).unwrap();
        assert!(report.kl_trace.is_none());
        assert!((report.average_bits - 3.0).abs() <= 0.02, "{}", report.average_bits);
        assert!(report.total_cost <= report.budget);
        assert_eq!(model.total_bits(), report.total_cost);
        assert_eq!(report.budget, (3.0 * report.n_weights as f64).floor() as u64);
        let files = [PACKED_FILE, "model.qblob", REPORT_FILE, TABLE_FILE, ALLOCATION_FILE, TRACE_FILE, METRICS_FILE];
        let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(cfg.out(f)).unwrap()).collect();
        fs::remove_dir_all(cfg.out_dir()).unwrap();
        run_pipeline(&cfg).unwrap();
        for (f, bytes) in files.iter().zip(&first) {
            assert_eq!(&fs::read(cfg.out(f)).unwrap(), bytes, "{f} differs");
        }
    }

    #[test]
    fn stages_compose_to_the_monolithic_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy(dir.path(), 3.5);
        run_pipeline(&cfg).unwrap();
        let mono: Vec<Vec<u8>> = [PACKED_FILE, "model.qblob", TABLE_FILE, ALLOCATION_FILE]
            .iter()
            .map(|f| fs::read(cfg.out(f)).unwrap())
            .collect();
        let staged = PipelineConfig { paths: PathsConfig { out: dir.path().join("staged"), ..cfg.paths.clone() }, ..cfg };
        for s in [Stage::FitPosterior, Stage::DesignCodebooks, Stage::BuildTable, Stage::Allocate, Stage::Export] {
            run_stage(&staged, s, true).unwrap();
        }
        for (f, bytes) in [PACKED_FILE, "model.qblob", TABLE_FILE, ALLOCATION_FILE].iter().zip(&mono) {
            assert_eq!(&fs::read(staged.out(f)).unwrap(), bytes, "{f} differs");
        }
    }

    #[test]
    fn more_budget_never_costs_loss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy(dir.path(), 3.0);
        let rows = frontier_stage(&cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.windows(2).all(|w| w[1].loss <= w[0].loss));
        for r in &rows {
            assert!(r.loss <= r.uniform_loss && r.loss <= r.random_loss);
        }
    }

    #[test]
    fn missing_inputs_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy(dir.path(), 3.0);
        match run_stage(&cfg, Stage::Allocate, false) {
            Err(Error::Stage { stage, source, .. }) => {
                assert_eq!(stage, "allocate");
                assert!(matches!(*source, Error::MissingInput(_)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distillation_keeps_or_lowers_kl() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy(dir.path(), 3.0);
        cfg.distill.enabled = true;
        cfg.distill.steps = 40;
        let (_, report) = run_pipeline(&cfg).unwrap();
        let kl = report.kl_trace.unwrap();
        assert_eq!(kl.len(), 41);
        assert!(kl.iter().all(|k| *k >= 0.0));
    }

    #[test]
    fn per_channel_needs_diagonal_posteriors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy(dir.path(), 3.0);
        cfg.partition.policy = "per-channel".into();
        cfg.budget.target_bits = Some(6.0);
        run_pipeline(&cfg).unwrap();
        cfg.posterior.kind = PosteriorKind::Kfac;
        assert!(matches!(run_stage(&cfg, Stage::FitPosterior, false), Err(Error::Config(_))));
    }
}
