//! Quantizers in whitened coordinates.
//!
//! Uniform mid-rise codebooks with a golden-section range search, Lloyd-Max
//! codebooks (analytic for scalars, sample-based for small vectors), block
//! quantization through a [`Whitener`], and compilation to per-group affine or
//! LUT dequantization for export.
//!
//! Two uniform loss models exist. [`expected_mse_uniform`] reconstructs the
//! clipped mass at `±α` (the range-design objective). A deployable mid-rise
//! quantizer saturates to its outer codepoints `±(α − Δ/2)` instead;
//! [`expected_mse_uniform_saturating`] is the exact distortion of that
//! quantizer and is what loss tables use.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{cell_second_moment, interval_mass, tail_term_unchecked, truncated_mean, Interval};
use crate::posterior::Whitener;
use crate::rng::{normal_pool, seeded};

/// Golden-section evaluation cap for [`optimize_range`].
pub const RANGE_EVALS: usize = 20;
pub const DEFAULT_RANGE: Interval = Interval { lo: 1.5, hi: 4.5 };
pub const LLOYD_TOL: f64 = 1e-4;
pub const LLOYD_MAX_ITER: usize = 15;
/// Largest supported scalar bit-width.
pub const MAX_BITS: u32 = 16;
/// Kurtosis above which a block is reported as heavy-tailed.
pub const KURTOSIS_OUTLIER: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeObjective {
    /// Interior cells plus `2∫_α^∞ (z − α)² φ`.
    ClippedTail,
    /// Outer cells extend to `±∞` around the outer codepoints.
    Saturating,
}

fn check_bits(m: u32) -> Result<usize> {
    if m == 0 || m > MAX_BITS {
        return Err(Error::invalid(format!("bit-width must be in 1..={MAX_BITS}, got {m}")));
    }
    Ok(1usize << m)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive and finite, got {alpha}")));
    }
    Ok(())
}

/// Posterior-expected squared error per whitened coordinate of the `m`-bit
/// mid-rise quantizer on `[−α, α]`, with the clipping tail measured from `±α`.
pub fn expected_mse_uniform(m: u32, alpha: f64) -> Result<f64> {
    let k = check_bits(m)?;
    check_alpha(alpha)?;
    let delta = 2.0 * alpha / k as f64;
    let mut total = 0.0;
    for i in 0..k {
        let lo = -alpha + i as f64 * delta;
        let hi = if i + 1 == k { alpha } else { -alpha + (i + 1) as f64 * delta };
        total += cell_second_moment(Interval { lo, hi }, lo + 0.5 * delta);
    }
    Ok(total + tail_term_unchecked(alpha))
}

/// Exact expected squared error of the saturating `m`-bit mid-rise quantizer.
pub fn expected_mse_uniform_saturating(m: u32, alpha: f64) -> Result<f64> {
    let k = check_bits(m)?;
    check_alpha(alpha)?;
    let delta = 2.0 * alpha / k as f64;
    let mut total = 0.0;
    for i in 0..k {
        let lo = if i == 0 { f64::NEG_INFINITY } else { -alpha + i as f64 * delta };
        let hi = if i + 1 == k { f64::INFINITY } else { -alpha + (i + 1) as f64 * delta };
        total += cell_second_moment(Interval { lo, hi }, -alpha + (i as f64 + 0.5) * delta);
    }
    Ok(total)
}

pub fn expected_mse(objective: RangeObjective, m: u32, alpha: f64) -> Result<f64> {
    match objective {
        RangeObjective::ClippedTail => expected_mse_uniform(m, alpha),
        RangeObjective::Saturating => expected_mse_uniform_saturating(m, alpha),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSearch {
    pub alpha: f64,
    pub loss: f64,
    pub evaluations: usize,
}

/// Golden-section search for the range minimizing the expected MSE, using at
/// most [`RANGE_EVALS`] loss evaluations. Returns the best evaluated point.
pub fn optimize_range(m: u32, search: Interval, objective: RangeObjective) -> Result<RangeSearch> {
    check_bits(m)?;
    if !(search.lo > 0.0) || !(search.hi > search.lo) || !search.hi.is_finite() {
        return Err(Error::invalid(format!("bad range search interval [{}, {}]", search.lo, search.hi)));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (search.lo, search.hi);
    let mut evals = 0;
    let mut best = (f64::INFINITY, f64::NAN);
    let eval = |x: f64, evals: &mut usize, best: &mut (f64, f64)| -> Result<f64> {
        *evals += 1;
        let f = expected_mse(objective, m, x)?;
        if f < best.0 {
            *best = (f, x);
        }
        Ok(f)
    };
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = eval(x1, &mut evals, &mut best)?;
    let mut f2 = eval(x2, &mut evals, &mut best)?;
    while evals < RANGE_EVALS {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = eval(x1, &mut evals, &mut best)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = eval(x2, &mut evals, &mut best)?;
        }
    }
    Ok(RangeSearch {
        alpha: best.1,
        loss: best.0,
        evaluations: evals,
    })
}

/// Signed mid-rise uniform codebook on `[−α, α]` with `2^bits` levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformCodebook {
    pub bits: u32,
    pub alpha: f64,
    pub delta: f64,
    /// `round(α/Δ − ½)`, the integer zero point of the symmetric layout.
    pub zero_point: i64,
}

impl UniformCodebook {
    pub fn new(bits: u32, alpha: f64) -> Result<Self> {
        let k = check_bits(bits)?;
        check_alpha(alpha)?;
        let delta = 2.0 * alpha / k as f64;
        Ok(UniformCodebook {
            bits,
            alpha,
            delta,
            zero_point: (alpha / delta - 0.5).round() as i64,
        })
    }

    /// Codebook at the optimized range for `bits`.
    pub fn optimized(bits: u32, objective: RangeObjective) -> Result<Self> {
        UniformCodebook::new(bits, optimize_range(bits, DEFAULT_RANGE, objective)?.alpha)
    }

    pub fn levels(&self) -> usize {
        1 << self.bits
    }

    pub fn codepoint(&self, k: usize) -> f64 {
        -self.alpha + (k as f64 + 0.5) * self.delta
    }

    /// Cell index of `z`; values on a cell boundary go to the lower index.
    pub fn assign(&self, z: f64) -> usize {
        let t = ((z + self.alpha) / self.delta).ceil() - 1.0;
        if t.is_nan() {
            return 0;
        }
        t.clamp(0.0, (self.levels() - 1) as f64) as usize
    }
}

/// Lloyd-Max codebook. Codepoints are stored row-major, `levels × dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LloydCodebook {
    pub dim: usize,
    pub codepoints: Vec<f64>,
    /// Scalar case only: the `K − 1` midpoints between adjacent codepoints.
    pub boundaries: Vec<f64>,
    /// Objective after each iteration, starting with the initial codebook.
    pub objective_log: Vec<f64>,
}

impl LloydCodebook {
    pub fn levels(&self) -> usize {
        self.codepoints.len() / self.dim
    }

    pub fn codepoint(&self, k: usize) -> &[f64] {
        &self.codepoints[k * self.dim..(k + 1) * self.dim]
    }

    pub fn objective(&self) -> f64 {
        self.objective_log.last().copied().unwrap_or(f64::NAN)
    }

    /// Nearest codepoint using the first `z.len()` coordinates (a ragged
    /// final tuple matches on the coordinates it has). Ties go to the lower
    /// index.
    pub fn assign(&self, z: &[f64]) -> usize {
        if self.dim == 1 && !self.boundaries.is_empty() {
            return self.boundaries.partition_point(|&b| b < z[0]);
        }
        nearest(&self.codepoints, self.dim, z)
    }
}

fn nearest(codepoints: &[f64], dim: usize, z: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in codepoints.chunks(dim).enumerate() {
        let d: f64 = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Codebook {
    Uniform(UniformCodebook),
    Lloyd(LloydCodebook),
}

impl Codebook {
    pub fn levels(&self) -> usize {
        match self {
            Codebook::Uniform(u) => u.levels(),
            Codebook::Lloyd(l) => l.levels(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Codebook::Uniform(_) => 1,
            Codebook::Lloyd(l) => l.dim,
        }
    }

    /// Whitened value of coordinate `j` of codepoint `k`.
    pub fn level(&self, k: usize, j: usize) -> f64 {
        match self {
            Codebook::Uniform(u) => u.codepoint(k),
            Codebook::Lloyd(l) => l.codepoint(k)[j],
        }
    }

    /// Quantizes whitened coordinates; returns one index per tuple and the
    /// whitened reconstruction.
    pub fn quantize_whitened(&self, z: &[f64]) -> (Vec<u32>, Vec<f64>) {
        let dim = self.dim();
        let mut indices = Vec::with_capacity(z.len().div_ceil(dim));
        let mut zhat = Vec::with_capacity(z.len());
        for tuple in z.chunks(dim) {
            let k = match self {
                Codebook::Uniform(u) => u.assign(tuple[0]),
                Codebook::Lloyd(l) => l.assign(tuple),
            };
            indices.push(k as u32);
            for j in 0..tuple.len() {
                zhat.push(self.level(k, j));
            }
        }
        (indices, zhat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LloydInit {
    /// Mid-rise uniform codepoints on `[−3, 3]`.
    Uniform,
    /// k-means++ seeding on a seeded standard-normal pool.
    KmeansPlusPlus(u64),
}

fn scalar_objective(c: &[f64], bounds: &[f64]) -> f64 {
    let k = c.len();
    (0..k)
        .map(|i| {
            let lo = if i == 0 { f64::NEG_INFINITY } else { bounds[i - 1] };
            let hi = if i + 1 == k { f64::INFINITY } else { bounds[i] };
            cell_second_moment(Interval { lo, hi }, c[i])
        })
        .sum()
}

fn midpoints(c: &[f64]) -> Vec<f64> {
    c.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

fn kmeanspp(pool: &[f64], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = pool.len() / dim;
    let mut rng = seeded(seed);
    let row = |i: usize| &pool[i * dim..(i + 1) * dim];
    let mut centers: Vec<f64> = row(rng.random_range(0..n)).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..dim])).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > u {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            0
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centers.extend(c);
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian-weighted scalar Lloyd-Max with analytic cell integrals.
///
/// Alternates centroid updates (truncated means) and midpoint boundaries
/// until the relative objective decrease falls below `tol` or `max_iter`
/// updates have run.
pub fn lloyd_scalar(levels: usize, init: LloydInit, tol: f64, max_iter: usize) -> Result<LloydCodebook> {
    if levels < 2 {
        return Err(Error::invalid(format!("scalar Lloyd needs K >= 2, got {levels}")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be > 0, got {tol}")));
    }
    let mut c: Vec<f64> = match init {
        LloydInit::Uniform => {
            let delta = 6.0 / levels as f64;
            (0..levels).map(|k| -3.0 + (k as f64 + 0.5) * delta).collect()
        }
        LloydInit::KmeansPlusPlus(seed) => {
            let pool = normal_pool(seed, 4096.max(4 * levels), 1);
            kmeanspp(&pool, 1, levels, seed.wrapping_add(1))
        }
    };
    c.sort_by(|a, b| a.total_cmp(b));
    // Separate coincident seeds so every cell has positive width.
    for i in 1..levels {
        if c[i] <= c[i - 1] {
            c[i] = c[i - 1] + 1e-6;
        }
    }
    let mut bounds = midpoints(&c);
    let mut log = vec![scalar_objective(&c, &bounds)];
    for _ in 0..max_iter {
        for i in 0..levels {
            let lo = if i == 0 { f64::NEG_INFINITY } else { bounds[i - 1] };
            let hi = if i + 1 == levels { f64::INFINITY } else { bounds[i] };
            let iv = Interval { lo, hi };
            if interval_mass(iv) > 0.0 {
                c[i] = truncated_mean(iv)?;
            }
        }
        bounds = midpoints(&c);
        let obj = scalar_objective(&c, &bounds);
        let prev = *log.last().unwrap();
        // Analytic steps cannot increase the objective; this guards rounding.
        log.push(obj.min(prev));
        if prev <= 0.0 || (prev - obj) / prev < tol {
            break;
        }
    }
    Ok(LloydCodebook {
        dim: 1,
        codepoints: c,
        boundaries: bounds,
        objective_log: log,
    })
}

/// Sample-based Lloyd (k-means) for `dim`-tuples. `samples` holds one tuple
/// per row. The objective is the mean squared distance to the assigned
/// codepoint; empty cells keep their codepoint.
pub fn lloyd_vector(
    dim: usize,
    levels: usize,
    samples: &DMatrix<f64>,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<LloydCodebook> {
    if dim == 0 || levels == 0 {
        return Err(Error::invalid("vector Lloyd needs dim >= 1 and K >= 1"));
    }
    if samples.ncols() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: samples.ncols() });
    }
    let n = samples.nrows();
    if levels > n {
        return Err(Error::invalid(format!("K = {levels} exceeds sample count {n}")));
    }
    let mut pool = Vec::with_capacity(n * dim);
    for r in 0..n {
        pool.extend(samples.row(r).iter());
    }
    let mut c = kmeanspp(&pool, dim, levels, seed);
    let mut assign = vec![0usize; n];
    let objective = |c: &[f64], assign: &mut [usize]| {
        let mut total = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let z = &pool[i * dim..(i + 1) * dim];
            *a = nearest(c, dim, z);
            total += sq_dist(z, &c[*a * dim..(*a + 1) * dim]);
        }
        total / n as f64
    };
    let mut log = vec![objective(&c, &mut assign)];
    for _ in 0..max_iter {
        // Running means; empty cells keep their codepoint.
        let mut means = c.clone();
        let mut counts = vec![0usize; levels];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            let n = counts[a] as f64;
            for j in 0..dim {
                let m = &mut means[a * dim + j];
                *m = if counts[a] == 1 { pool[i * dim + j] } else { *m + (pool[i * dim + j] - *m) / n };
            }
        }
        c = means;
        let obj = objective(&c, &mut assign);
        let prev = *log.last().unwrap();
        log.push(obj.min(prev));
        if prev <= 0.0 || (prev - obj) / prev < tol {
            break;
        }
    }
    let boundaries = if dim == 1 {
        let mut sorted = c.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        if sorted == c {
            midpoints(&c)
        } else {
            Vec::new()
        }
    } else {
        Vec::new()
    };
    Ok(LloydCodebook {
        dim,
        codepoints: c,
        boundaries,
        objective_log: log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub indices: Vec<u32>,
    pub reconstruction: Vec<f64>,
    /// Kurtosis `E z⁴ / (E z²)²` of the whitened coordinates.
    pub kurtosis: f64,
}

impl QuantizedBlock {
    pub fn heavy_tailed(&self) -> bool {
        self.kurtosis > KURTOSIS_OUTLIER
    }
}

fn kurtosis(z: &[f64]) -> f64 {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let m2 = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = z.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    if m2 > 0.0 {
        m4 / (m2 * m2)
    } else {
        0.0
    }
}

/// Whitens `values`, quantizes in whitened space and maps codepoints back.
pub fn quantize_block(values: &[f64], whitener: &Whitener, cb: &Codebook) -> Result<QuantizedBlock> {
    let z = whitener.forward(values)?;
    let (indices, zhat) = cb.quantize_whitened(&z);
    Ok(QuantizedBlock {
        indices,
        reconstruction: whitener.inverse(&zhat)?,
        kurtosis: kurtosis(&z),
    })
}

/// Per-group dequantization parameters: `ŵ = scale · (level(q) − zero_point)`
/// where `level(q) = q` without a LUT and `lut[q]` with one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledAffine {
    pub scale: f64,
    pub zero_point: f64,
    pub qmin: i64,
    pub qmax: i64,
    /// Whitened codepoints, `levels × dim` row-major.
    pub lut: Option<Vec<f64>>,
}

impl CompiledAffine {
    pub fn level(&self, q: u32, j: usize, dim: usize) -> f64 {
        match &self.lut {
            Some(l) => l[q as usize * dim + j],
            None => q as f64,
        }
    }

    pub fn dequant(&self, q: u32, j: usize, dim: usize) -> f64 {
        self.scale * (self.level(q, j, dim) - self.zero_point)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LloydExport {
    Lut,
    /// Least-squares affine per group with indices frozen; degenerate groups
    /// fall back to the LUT.
    LeastSquares,
}

/// Compiles a codebook to one [`CompiledAffine`] per scale group.
///
/// `whitener` must be diagonal and constant within each group of
/// `group_size` coordinates (see [`Whitener::per_group`]). Uniform codebooks
/// map to `scale = σ_g Δ`, `zero_point = (K − 1)/2 − μ_g / scale`. Lloyd
/// codebooks emit a LUT of whitened codepoints with `scale = σ_g`,
/// `zero_point = −μ_g / σ_g`, or a least-squares affine fit.
pub fn compile_to_affine(
    cb: &Codebook,
    values: &[f64],
    indices: &[u32],
    whitener: &Whitener,
    group_size: usize,
    mode: LloydExport,
) -> Result<Vec<CompiledAffine>> {
    let params = whitener
        .group_params(group_size)
        .ok_or_else(|| Error::invalid("affine export needs a group-constant diagonal whitener"))?;
    let dim = cb.dim();
    if values.len() != whitener.dim() {
        return Err(Error::DimensionMismatch { expected: whitener.dim(), got: values.len() });
    }
    if indices.len() != values.len().div_ceil(dim) {
        return Err(Error::DimensionMismatch { expected: values.len().div_ceil(dim), got: indices.len() });
    }
    let k = cb.levels();
    let qmax = k as i64 - 1;
    let lut: Vec<f64> = (0..k).flat_map(|q| (0..dim).map(move |j| (q, j))).map(|(q, j)| cb.level(q, j)).collect();
    let mut out = Vec::with_capacity(params.len());
    for (g, &(center, sd)) in params.iter().enumerate() {
        let start = g * group_size;
        let end = (start + group_size).min(values.len());
        let affine = match cb {
            Codebook::Uniform(u) => {
                let scale = sd * u.delta;
                CompiledAffine {
                    scale,
                    zero_point: (k as f64 - 1.0) / 2.0 - center / scale,
                    qmin: 0,
                    qmax,
                    lut: None,
                }
            }
            Codebook::Lloyd(_) => {
                let lut_form = CompiledAffine {
                    scale: sd,
                    zero_point: -center / sd,
                    qmin: 0,
                    qmax,
                    lut: Some(lut.clone()),
                };
                match mode {
                    LloydExport::Lut => lut_form,
                    LloydExport::LeastSquares => {
                        let qs = (start..end).map(|i| indices[i / dim] as f64);
                        match least_squares_affine(qs, &values[start..end]) {
                            Some((scale, zero_point)) => CompiledAffine {
                                scale,
                                zero_point,
                                qmin: 0,
                                qmax,
                                lut: None,
                            },
                            None => lut_form,
                        }
                    }
                }
            }
        };
        out.push(affine);
    }
    Ok(out)
}

/// `argmin_{s,z} Σ (w_i − s(q_i − z))²` via the normal equations of
/// `w ≈ s q + t`, `z = −t/s`. `None` when the indices are all equal or the
/// fitted scale is zero.
pub fn least_squares_affine(q: impl Iterator<Item = f64>, w: &[f64]) -> Option<(f64, f64)> {
    let (mut sq, mut sqq, mut sw, mut sqw, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (qi, &wi) in q.zip(w) {
        sq += qi;
        sqq += qi * qi;
        sw += wi;
        sqw += qi * wi;
        n += 1.0;
    }
    let det = n * sqq - sq * sq;
    if !(det.abs() > 1e-12 * (n * sqq).max(1.0)) {
        return None;
    }
    let s = (n * sqw - sq * sw) / det;
    let t = (sqq * sw - sq * sqw) / det;
    if s == 0.0 || !s.is_finite() {
        return None;
    }
    Some((s, -t / s))
}

/// Dequantizes a block from its indices and per-group affines.
pub fn dequantize(indices: &[u32], affines: &[CompiledAffine], n: usize, dim: usize, group_size: usize) -> Vec<f64> {
    (0..n)
        .map(|i| affines[i / group_size].dequant(indices[i / dim], i % dim, dim))
        .collect()
}
