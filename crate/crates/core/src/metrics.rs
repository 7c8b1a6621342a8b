//! Evaluation metrics over toy predictions.
//!
//! Entropies use the natural log. Confidence is `p̂(x) = max_c p(c|x)`; ties
//! in confidence are broken by example index.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived;
use crate::tsv;

const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub label: usize,
}

impl Prediction {
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub examples: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(examples: Vec<Prediction>) -> Result<Self> {
        let s = PredictionSet { examples };
        s.validate()?;
        Ok(s)
    }

    /// Predictions with `predicted = argmax(probs)` (lowest index on ties).
    pub fn from_probs(probs: Vec<Vec<f64>>, labels: &[usize]) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: probs.len(), got: labels.len() });
        }
        let examples = probs
            .into_iter()
            .zip(labels)
            .map(|(p, &label)| {
                let predicted = p
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                Prediction { probs: p, predicted, label }
            })
            .collect();
        PredictionSet::new(examples)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            let c = e.probs.len();
            if c == 0 || e.predicted >= c || e.label >= c {
                return Err(Error::invalid(format!("example {i}: labels must index the {c} classes")));
            }
            if e.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("example {i}: probabilities must lie in [0, 1]")));
            }
            let s: f64 = e.probs.iter().sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::invalid(format!("example {i}: probabilities sum to {s}")));
            }
        }
        Ok(())
    }

    fn nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("metrics need at least one example"));
        }
        Ok(())
    }

    /// Columns `label`, `predicted`, `p0`, `p1`, ...
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let c = self.examples.first().map_or(0, |e| e.probs.len());
        let names: Vec<String> = ["label".to_string(), "predicted".to_string()]
            .into_iter()
            .chain((0..c).map(|k| format!("p{k}")))
            .collect();
        let header: Vec<&str> = names.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = self
            .examples
            .iter()
            .map(|e| {
                [e.label.to_string(), e.predicted.to_string()]
                    .into_iter()
                    .chain(e.probs.iter().map(|p| format!("{p:?}")))
                    .collect()
            })
            .collect();
        tsv::write(path, &header, &rows)
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let (header, raw) = tsv::read(path)?;
        let li = tsv::column(path, &header, "label")?;
        let pi = tsv::column(path, &header, "predicted")?;
        let pcols: Vec<usize> = (0..)
            .map_while(|k| header.iter().position(|h| *h == format!("p{k}")))
            .collect();
        if pcols.is_empty() {
            return Err(Error::parse(path, "no probability columns p0, p1, ..."));
        }
        let mut examples = Vec::with_capacity(raw.len());
        for (line, r) in raw.iter().enumerate() {
            let line = line + 2;
            examples.push(Prediction {
                label: tsv::field(path, r, li, line)?,
                predicted: tsv::field(path, r, pi, line)?,
                probs: pcols.iter().map(|&c| tsv::field(path, r, c, line)).collect::<Result<_>>()?,
            });
        }
        PredictionSet::new(examples).map_err(|e| Error::parse(path, e))
    }
}

pub fn top1_accuracy(preds: &PredictionSet) -> Result<f64> {
    preds.nonempty()?;
    Ok(preds.examples.iter().filter(|e| e.correct()).count() as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    pub bins: usize,
    /// Number of jittered boundary sets averaged; 0 uses the plain
    /// equal-width edges.
    pub boundary_seeds: usize,
    pub seed: u64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig { bins: 15, boundary_seeds: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Bins `(e_b, e_{b+1}]` over `edges`; a confidence of exactly 0 falls in
/// the first bin. Empty bins are omitted.
pub fn reliability_bins(preds: &PredictionSet, edges: &[f64]) -> Vec<ReliabilityBin> {
    let nb = edges.len() - 1;
    let mut count = vec![0usize; nb];
    let mut correct = vec![0usize; nb];
    let mut conf = vec![0.0; nb];
    for e in &preds.examples {
        let c = e.confidence();
        let b = edges[1..nb].partition_point(|&x| x < c);
        count[b] += 1;
        correct[b] += e.correct() as usize;
        conf[b] += c;
    }
    (0..nb)
        .filter(|&b| count[b] > 0)
        .map(|b| ReliabilityBin {
            lo: edges[b],
            hi: edges[b + 1],
            count: count[b],
            accuracy: correct[b] as f64 / count[b] as f64,
            confidence: conf[b] / count[b] as f64,
        })
        .collect()
}

/// Equal-width edges on `[0, 1]`, with interior edges optionally jittered
/// uniformly within half a bin width.
pub fn bin_edges(bins: usize, jitter_seed: Option<u64>) -> Vec<f64> {
    let h = 1.0 / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| i as f64 * h).collect();
    if let Some(seed) = jitter_seed {
        let mut rng = derived(seed, 0x6269_6e73);
        for e in edges.iter_mut().take(bins).skip(1) {
            *e += (rng.random::<f64>() - 0.5) * h;
        }
        edges.sort_by(f64::total_cmp);
    }
    edges
}

/// `(ECE, MCE)` averaged over the configured boundary sets.
pub fn ece_mce(preds: &PredictionSet, cfg: &BinningConfig) -> Result<(f64, f64)> {
    preds.nonempty()?;
    if cfg.bins == 0 {
        return Err(Error::invalid("binning needs B >= 1"));
    }
    let sets: Vec<Vec<f64>> = if cfg.boundary_seeds == 0 {
        vec![bin_edges(cfg.bins, None)]
    } else {
        (0..cfg.boundary_seeds as u64)
            .map(|s| bin_edges(cfg.bins, Some(cfg.seed.wrapping_add(s))))
            .collect()
    };
    let n = preds.len() as f64;
    let (mut ece, mut mce) = (0.0, 0.0);
    for edges in &sets {
        let mut e = 0.0;
        let mut m: f64 = 0.0;
        for b in reliability_bins(preds, edges) {
            let gap = (b.accuracy - b.confidence).abs();
            e += b.count as f64 / n * gap;
            m = m.max(gap);
        }
        ece += e;
        mce += m;
    }
    Ok((ece / sets.len() as f64, mce / sets.len() as f64))
}

fn tail_count(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Example indices sorted by ascending confidence, ties by index.
fn confidence_order(preds: &PredictionSet) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds.examples[a]
            .confidence()
            .total_cmp(&preds.examples[b].confidence())
            .then(a.cmp(&b))
    });
    idx
}

/// Worst-`k`% accuracy and CVaR at level `alpha` (mean 0-1 loss over the
/// `(1 − α)` lowest-confidence mass).
pub fn worst_k_and_cvar(preds: &PredictionSet, k_percent: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::invalid(format!("k must be in (0, 100], got {k_percent}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let order = confidence_order(preds);
    let nk = tail_count(k_percent / 100.0, preds.len());
    let na = tail_count(1.0 - alpha, preds.len());
    if nk == 0 || na == 0 {
        return Err(Error::invalid("tail holds fewer than one example"));
    }
    let correct = |n: usize| order[..n].iter().filter(|&&i| preds.examples[i].correct()).count() as f64;
    Ok((correct(nk) / nk as f64, 1.0 - correct(na) / na as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub mse: f64,
    /// `+∞` when the reconstruction is exact.
    pub snr_db: f64,
    pub psnr_db: f64,
}

pub fn snr_psnr(original: &[f64], reconstructed: &[f64], peak: f64) -> Result<SnrReport> {
    if original.len() != reconstructed.len() {
        return Err(Error::DimensionMismatch { expected: original.len(), got: reconstructed.len() });
    }
    if original.is_empty() {
        return Err(Error::invalid("SNR needs a nonempty block"));
    }
    let err: f64 = original.iter().zip(reconstructed).map(|(a, b)| (a - b) * (a - b)).sum();
    let signal: f64 = original.iter().map(|a| a * a).sum();
    let mse = err / original.len() as f64;
    let db = |num: f64, den: f64| if den == 0.0 { f64::INFINITY } else { 10.0 * (num / den).log10() };
    Ok(SnrReport { mse, snr_db: db(signal, err), psnr_db: db(peak * peak, mse) })
}

/// Utilization `U` (used codes / K) and usage entropy `H` in nats.
pub fn codebook_stats(indices: &[u32], levels: usize) -> Result<(f64, f64)> {
    if levels == 0 {
        return Err(Error::invalid("codebook needs K >= 1"));
    }
    let mut counts = vec![0usize; levels];
    for &q in indices {
        *counts
            .get_mut(q as usize)
            .ok_or_else(|| Error::invalid(format!("index {q} out of range for K = {levels}")))? += 1;
    }
    let n = indices.len() as f64;
    let used = counts.iter().filter(|&&c| c > 0).count();
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok((used as f64 / levels as f64, h.max(0.0)))
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `(H[ȳ], MI)` for one input from `M` sampled probability vectors, with
/// `MI = H[ȳ] − (1/M) Σ H[p_m]`.
pub fn uncertainty_diagnostics(samples: &[Vec<f64>]) -> Result<(f64, f64)> {
    let first = samples.first().ok_or_else(|| Error::invalid("uncertainty needs M >= 1 samples"))?;
    let c = first.len();
    if samples.iter().any(|s| s.len() != c) {
        return Err(Error::invalid("sampled probability vectors differ in length"));
    }
    if samples.len() == 1 {
        return Ok((entropy(first), 0.0));
    }
    let m = samples.len() as f64;
    let mut mean = vec![0.0; c];
    for s in samples {
        for (a, &p) in mean.iter_mut().zip(s) {
            *a += p / m;
        }
    }
    let h = entropy(&mean);
    let expected = samples.iter().map(|s| entropy(s)).sum::<f64>() / m;
    Ok((h, (h - expected).max(0.0)))
}

/// Two-sided 97.5% Student-t quantiles for 1..=30 degrees of freedom.
const T975: [f64; 30] = [
    12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060, 2.2622, 2.2281, 2.2010, 2.1788, 2.1604,
    2.1448, 2.1314, 2.1199, 2.1098, 2.1009, 2.0930, 2.0860, 2.0796, 2.0739, 2.0687, 2.0639, 2.0595, 2.0555,
    2.0518, 2.0484, 2.0452, 2.0423,
];

/// `t_{0.975, df}`: table up to 30, Cornish-Fisher expansion beyond.
pub fn t_quantile_975(df: usize) -> f64 {
    if (1..=30).contains(&df) {
        return T975[df - 1];
    }
    let z: f64 = 1.959_963_984_540_054;
    let v = df as f64;
    let g1 = (z.powi(3) + z) / 4.0;
    let g2 = (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / 96.0;
    let g3 = (3.0 * z.powi(7) + 19.0 * z.powi(5) + 17.0 * z.powi(3) - 15.0 * z) / 384.0;
    z + g1 / v + g2 / (v * v) + g3 / (v * v * v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedCi {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Mean, sample standard deviation and the 95% t-interval over seeds.
pub fn seed_ci(values: &[f64]) -> Result<SeedCi> {
    let r = values.len();
    if r < 2 {
        return Err(Error::invalid(format!("seed interval needs r >= 2 values, got {r}")));
    }
    let mean = values.iter().sum::<f64>() / r as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64).sqrt();
    let half = t_quantile_975(r - 1) * sd / (r as f64).sqrt();
    Ok(SeedCi { mean, sd, lo: mean - half, hi: mean + half })
}

/// Fraction of whitened coordinates with `|z| > α`, with its binomial SE.
pub fn clipping_rate(z: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if z.is_empty() {
        return Err(Error::invalid("clipping rate needs samples"));
    }
    let n = z.len() as f64;
    let p = z.iter().filter(|v| v.abs() > alpha).count() as f64 / n;
    Ok((p, (p * (1.0 - p) / n).sqrt()))
}

/// Unweighted mean of per-task scores.
pub fn glue_macro(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("no task scores"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Example-weighted mean of per-task scores.
pub fn glue_micro(scores: &[f64], counts: &[usize]) -> Result<f64> {
    if scores.len() != counts.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: counts.len() });
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no examples across tasks"));
    }
    Ok(scores.iter().zip(counts).map(|(s, &c)| s * c as f64).sum::<f64>() / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::std_normal_cdf;
    use crate::rng::{seeded, standard_normal};

    fn pred(conf: f64, correct: bool) -> Prediction {
        let probs = vec![conf, 1.0 - conf];
        Prediction { probs, predicted: 0, label: if correct { 0 } else { 1 } }
    }

    #[test]
    fn accuracy_cases() {
        let set = |c: &[bool]| PredictionSet::new(c.iter().map(|&x| pred(0.7, x)).collect()).unwrap();
        assert_eq!(top1_accuracy(&set(&[true, true])).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&set(&[false, false])).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&set(&[true, true, false, true])).unwrap(), 0.75);
        assert!(top1_accuracy(&PredictionSet::default()).is_err());
    }

    #[test]
    fn validation() {
        assert!(PredictionSet::new(vec![Prediction { probs: vec![0.5, 0.6], predicted: 0, label: 0 }]).is_err());
        assert!(PredictionSet::new(vec![Prediction { probs: vec![0.5, 0.5], predicted: 2, label: 0 }]).is_err());
    }

    #[test]
    fn ece_examples() {
        let perfect = PredictionSet::new(vec![pred(1.0, true); 5]).unwrap();
        assert_eq!(ece_mce(&perfect, &BinningConfig::default()).unwrap(), (0.0, 0.0));

        let two = PredictionSet::new(vec![pred(0.9, true), pred(0.9, false)]).unwrap();
        let (e, m) = ece_mce(&two, &BinningConfig { bins: 1, boundary_seeds: 0, seed: 0 }).unwrap();
        assert!((e - 0.4).abs() < 1e-12 && (m - 0.4).abs() < 1e-12);
    }

    #[test]
    fn mce_dominates_ece() {
        let mut rng = seeded(1);
        let set = PredictionSet::new(
            (0..500)
                .map(|_| {
                    let c = 0.5 + 0.5 * rng.random::<f64>();
                    pred(c, rng.random::<f64>() < c * c)
                })
                .collect(),
        )
        .unwrap();
        let (e, m) = ece_mce(&set, &BinningConfig::default()).unwrap();
        assert!(m >= e && e > 0.0);
    }

    #[test]
    fn worst_k_and_cvar_cases() {
        let flat = PredictionSet::new((0..10).map(|i| pred(0.6, i % 3 != 0)).collect()).unwrap();
        let (w, _) = worst_k_and_cvar(&flat, 100.0, 0.5).unwrap();
        assert_eq!(w, top1_accuracy(&flat).unwrap());

        // Confidences 0.50..0.95; the four lowest have correctness T F F T.
        let correct = [true, false, false, true, true, false, true, true, true, true];
        let set =
            PredictionSet::new((0..10).map(|i| pred(0.5 + 0.05 * i as f64, correct[i])).collect()).unwrap();
        let (w, cvar) = worst_k_and_cvar(&set, 40.0, 0.6).unwrap();
        assert_eq!(w, 0.5);
        assert_eq!(cvar, 0.5);
        let (w, cvar) = worst_k_and_cvar(&set, 30.0, 0.5).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
        assert!((cvar - 0.4).abs() < 1e-15);

        let good = PredictionSet::new(vec![pred(0.8, true); 10]).unwrap();
        assert_eq!(worst_k_and_cvar(&good, 10.0, 0.5).unwrap().1, 0.0);
        assert!(worst_k_and_cvar(&good, 5.0, 0.5).is_err());
        assert!(worst_k_and_cvar(&good, 10.0, 1.0).is_err());
    }

    #[test]
    fn snr_cases() {
        let r = snr_psnr(&[1.0, 2.0], &[1.0, 2.0], 4.0).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.snr_db, f64::INFINITY);
        assert_eq!(snr_psnr(&[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap().snr_db, 0.0);
        assert!(snr_psnr(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn codebook_stat_cases() {
        let (u, h) = codebook_stats(&[0, 1, 2, 3], 4).unwrap();
        assert_eq!(u, 1.0);
        assert!((h - 4f64.ln()).abs() < 1e-15);
        assert_eq!(codebook_stats(&[2, 2, 2], 4).unwrap(), (0.25, 0.0));
        let (u, h) = codebook_stats(&[0, 0, 1], 4).unwrap();
        let want = -(2.0 / 3.0 * (2.0f64 / 3.0).ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln());
        assert_eq!(u, 0.5);
        assert!((h - want).abs() < 1e-15);
        assert!(codebook_stats(&[4], 4).is_err());
    }

    #[test]
    fn uncertainty_cases() {
        let p = vec![0.2, 0.3, 0.5];
        assert_eq!(uncertainty_diagnostics(&[p.clone(), p.clone()]).unwrap().1, 0.0);
        assert_eq!(uncertainty_diagnostics(&[p.clone()]).unwrap(), (entropy(&p), 0.0));
        let (h, mi) = uncertainty_diagnostics(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-15 && (mi - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn seed_ci_cases() {
        let ci = seed_ci(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((ci.sd, ci.lo, ci.hi), (0.0, 2.0, 2.0));
        let ci = seed_ci(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((ci.mean, ci.sd), (2.0, 1.0));
        assert!((ci.hi - (2.0 + 4.3027 / 3f64.sqrt())).abs() < 1e-12);
        assert!(seed_ci(&[1.0]).is_err());
        // Expansion continues the table smoothly and approaches 1.96.
        assert!((t_quantile_975(31) - 2.0395).abs() < 1e-3);
        assert!((t_quantile_975(120) - 1.9799).abs() < 1e-3);
    }

    #[test]
    fn clipping_matches_gaussian_tail() {
        let mut rng = seeded(4);
        let z: Vec<f64> = (0..200_000).map(|_| standard_normal(&mut rng)).collect();
        let (p, se) = clipping_rate(&z, 2.0).unwrap();
        assert!((p - 2.0 * std_normal_cdf(-2.0)).abs() < 3.0 * se);
    }

    #[test]
    fn glue_aggregates() {
        assert_eq!(glue_macro(&[80.0, 90.0]).unwrap(), 85.0);
        assert_eq!(glue_micro(&[80.0, 90.0], &[1, 3]).unwrap(), 87.5);
        assert!(glue_micro(&[80.0], &[0]).is_err());
    }

    #[test]
    fn tsv_roundtrip() {
        let set = PredictionSet::from_probs(vec![vec![0.2, 0.8], vec![0.6, 0.4]], &[1, 1]).unwrap();
        assert_eq!(set.examples[1].predicted, 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("preds.tsv");
        set.write_tsv(&p).unwrap();
        assert_eq!(PredictionSet::read_tsv(&p).unwrap(), set);
    }
}
