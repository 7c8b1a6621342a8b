//! Toy dense networks, Gauss-Newton curvature oracles, the
//! posterior-predictive teacher, and calibration-only scale distillation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_store::{BlockKind, LayerSpec, ModelManifest, WeightBlock};
use crate::posterior::{BlockPosterior, CurvatureOracle, CurvatureSource, KfacBatch};
use crate::rng::{derived, seeded, standard_normal};

pub const DEFAULT_TEACHER_SAMPLES: usize = 8;
pub const DEFAULT_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_DISTILL_STEPS: usize = 500;
/// Consecutive KL increases that trigger a step-size halving.
pub const DIVERGENCE_PATIENCE: usize = 5;
/// Halvings allowed before distillation aborts.
pub const MAX_HALVINGS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(&self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Identity => u,
        }
    }

    fn derivative(&self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Feed-forward stack of dense layers; the last layer emits logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNet {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer values cached by a forward pass.
struct Trace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the logits.
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
}

impl ToyNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::DimensionMismatch { expected: l.weight.nrows(), got: l.bias.len() });
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::DimensionMismatch { expected: layers[i - 1].weight.nrows(), got: l.weight.ncols() });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(ToyNet { layers })
    }

    /// Random MLP with `dims = [input, hidden.., classes]`, ReLU hidden layers
    /// and `N(0, 1/fan_in)` weights.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("network dims need at least input and output sizes, all positive"));
        }
        let mut rng = seeded(seed);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, out) = (dims[i], dims[i + 1]);
                let sd = (1.0 / fan_in as f64).sqrt();
                DenseLayer {
                    weight: DMatrix::from_fn(out, fan_in, |_, _| sd * standard_normal(&mut rng)),
                    bias: DVector::from_fn(out, |_, _| 0.1 * standard_normal(&mut rng)),
                    activation: if i + 1 == n { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        ToyNet::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::invalid(format!("layer {layer} out of range ({} layers)", self.layers.len())));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let mut h = DVector::from_column_slice(x);
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let u = &l.weight * &h + &l.bias;
            inputs.push(h);
            h = u.map(|v| l.activation.apply(v));
            pre.push(u);
        }
        inputs.push(h);
        Ok(Trace { inputs, pre })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.inputs.pop().unwrap().as_slice().to_vec())
    }

    /// Inputs reaching layer `layer`, one row per example.
    pub fn layer_inputs(&self, layer: usize, inputs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.check_layer(layer)?;
        let cols = self.layers[layer].weight.ncols();
        let mut out = DMatrix::zeros(inputs.len(), cols);
        for (r, x) in inputs.iter().enumerate() {
            let t = self.trace(x)?;
            out.row_mut(r).copy_from(&t.inputs[layer].transpose());
        }
        Ok(out)
    }

    /// Copy with layer `layer`'s weight replaced by row-major `w`.
    pub fn with_weight(&self, layer: usize, w: &[f64]) -> Result<ToyNet> {
        self.check_layer(layer)?;
        let (o, i) = self.layers[layer].weight.shape();
        if w.len() != o * i {
            return Err(Error::DimensionMismatch { expected: o * i, got: w.len() });
        }
        let mut net = self.clone();
        net.layers[layer].weight = DMatrix::from_row_slice(o, i, w);
        Ok(net)
    }

    pub fn weight_row_major(&self, layer: usize) -> Vec<f64> {
        let w = &self.layers[layer].weight;
        (0..w.nrows()).flat_map(|r| (0..w.ncols()).map(move |c| w[(r, c)])).collect()
    }

    /// Backpropagates `dL/dlogits` and returns `dL/dW` (row-major) for every
    /// layer in `wanted`.
    fn weight_grads(&self, trace: &Trace, dlogits: &DVector<f64>, wanted: &[usize]) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); wanted.len()];
        let lowest = wanted.iter().copied().min().unwrap_or(0);
        let mut g = dlogits.clone();
        for l in (lowest..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let gu = g.zip_map(&trace.pre[l], |gi, u| gi * layer.activation.derivative(u));
            for (slot, _) in wanted.iter().enumerate().filter(|(_, &w)| w == l) {
                let a = &trace.inputs[l];
                out[slot] = gu.iter().flat_map(|&gr| a.iter().map(move |&aj| gr * aj)).collect();
            }
            g = layer.weight.transpose() * gu;
        }
        out
    }

    /// Layers as `fc{i}.weight` dense blocks and `fc{i}.bias` vectors, with
    /// the topology recorded in the manifest.
    pub fn to_model(&self) -> Result<(ModelManifest, Vec<WeightBlock>)> {
        let mut blocks = Vec::new();
        let mut specs = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let (o, n) = l.weight.shape();
            let w: Vec<f32> = self.weight_row_major(i).iter().map(|&x| x as f32).collect();
            blocks.push(WeightBlock::dense(format!("fc{i}.weight"), o, n, w)?);
            blocks.push(WeightBlock::vector(format!("fc{i}.bias"), l.bias.iter().map(|&x| x as f32).collect())?);
            specs.push(LayerSpec {
                weight: format!("fc{i}.weight"),
                bias: format!("fc{i}.bias"),
                activation: l.activation.tag().to_string(),
            });
        }
        let mut manifest = ModelManifest::from_blocks(&blocks);
        manifest.layers = specs;
        Ok((manifest, blocks))
    }

    pub fn from_model(manifest: &ModelManifest, blocks: &[WeightBlock]) -> Result<Self> {
        if manifest.layers.is_empty() {
            return Err(Error::invalid("model has no layer topology"));
        }
        let find = |id: &str| blocks.iter().find(|b| b.id == id).ok_or_else(|| Error::MissingBlock(id.to_string()));
        let mut layers = Vec::new();
        for layer_spec in &manifest.layers {
            let w = find(&layer_spec.weight)?;
            let b = find(&layer_spec.bias)?;
            let BlockKind::DenseMatrix { rows, cols } = w.kind else {
                return Err(Error::InvalidBlock { id: w.id.clone(), msg: "layer weight must be a dense matrix".into() });
            };
            let activation = Activation::from_tag(&layer_spec.activation)
                .ok_or_else(|| Error::invalid(format!("unknown activation {}", layer_spec.activation)))?;
            layers.push(DenseLayer {
                weight: DMatrix::from_row_slice(rows, cols, &w.values_f64()),
                bias: DVector::from_vec(b.values_f64()),
                activation,
            });
        }
        ToyNet::new(layers)
    }

    /// Index of the layer whose weight block is `id`.
    pub fn layer_of(manifest: &ModelManifest, id: &str) -> Option<usize> {
        manifest.layers.iter().position(|l| l.weight == id)
    }
}

/// `softmax(logits / τ)`.
pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| ((l - max) / tau).exp()).sum::<f64>().ln();
    logits.iter().map(|l| (l - max) / tau - lse).collect()
}

/// `KL(p ‖ q)` in nats; terms with `p_i = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| if *qi > 0.0 { pi * (pi.ln() - qi.ln()) } else { f64::INFINITY })
        .sum::<f64>()
        .max(0.0)
}

fn kl_to_logits(p: &[f64], logits: &[f64], tau: f64) -> f64 {
    let lq = log_softmax(logits, tau);
    p.iter()
        .zip(&lq)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, lqi)| pi * (pi.ln() - lqi))
        .sum::<f64>()
        .max(0.0)
}

/// Generalized Gauss-Newton oracle for one layer's weights (row-major):
/// `v ↦ (1/N) Σ_n J_nᵀ Λ_n J_n v`, `Λ_n = diag(p) − p pᵀ`.
pub struct GgnOracle {
    net: ToyNet,
    layer: usize,
    traces: Vec<Trace>,
    probs: Vec<DVector<f64>>,
}

impl GgnOracle {
    fn jvp(&self, t: &Trace, v: &DMatrix<f64>) -> DVector<f64> {
        let l0 = self.layer;
        let mut du = v * &t.inputs[l0];
        let mut dh = du.zip_map(&t.pre[l0], |d, u| d * self.net.layers[l0].activation.derivative(u));
        for l in l0 + 1..self.net.layers.len() {
            let layer = &self.net.layers[l];
            du = &layer.weight * dh;
            dh = du.zip_map(&t.pre[l], |d, u| d * layer.activation.derivative(u));
        }
        dh
    }
}

impl CurvatureOracle for GgnOracle {
    fn dim(&self) -> usize {
        let w = &self.net.layers[self.layer].weight;
        w.nrows() * w.ncols()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (o, i) = self.net.layers[self.layer].weight.shape();
        let vm = DMatrix::from_row_slice(o, i, v);
        let mut out = vec![0.0; o * i];
        let n = self.traces.len() as f64;
        for (t, p) in self.traces.iter().zip(&self.probs) {
            let jv = self.jvp(t, &vm);
            let pj = p.dot(&jv);
            let lam_jv = p.zip_map(&jv, |pi, ji| pi * ji - pi * pj);
            let g = &self.net.weight_grads(t, &lam_jv, &[self.layer])[0];
            for (acc, gi) in out.iter_mut().zip(g) {
                *acc += gi / n;
            }
        }
        out
    }

    fn source(&self) -> CurvatureSource {
        CurvatureSource::Fisher
    }
}

pub fn ggn_oracle(net: &ToyNet, layer: usize, inputs: &[Vec<f64>]) -> Result<GgnOracle> {
    net.check_layer(layer)?;
    if inputs.is_empty() {
        return Err(Error::invalid("GGN oracle needs calibration inputs"));
    }
    let traces: Vec<Trace> = inputs.iter().map(|x| net.trace(x)).collect::<Result<_>>()?;
    let probs = traces
        .iter()
        .map(|t| DVector::from_vec(softmax(t.inputs.last().unwrap().as_slice(), 1.0)))
        .collect();
    Ok(GgnOracle {
        net: net.clone(),
        layer,
        traces,
        probs,
    })
}

/// K-FAC statistics for `layer`: layer inputs and pre-activation gradients of
/// `−log p(y|x)` with `y` drawn from the model's own predictive (no labels).
pub fn kfac_batches(net: &ToyNet, layer: usize, inputs: &[Vec<f64>], batch_size: usize, seed: u64) -> Result<Vec<KfacBatch>> {
    net.check_layer(layer)?;
    if inputs.is_empty() || batch_size == 0 {
        return Err(Error::invalid("K-FAC batches need inputs and batch size >= 1"));
    }
    let mut rng = derived(seed, 7);
    let (o, i) = net.layers[layer].weight.shape();
    let mut batches = Vec::new();
    for chunk in inputs.chunks(batch_size) {
        let mut a = DMatrix::zeros(chunk.len(), i);
        let mut g = DMatrix::zeros(chunk.len(), o);
        for (r, x) in chunk.iter().enumerate() {
            let t = net.trace(x)?;
            let p = softmax(t.inputs.last().unwrap().as_slice(), 1.0);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = p.len() - 1;
            for (c, pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    y = c;
                    break;
                }
            }
            let mut dl = DVector::from_vec(p);
            dl[y] -= 1.0;
            // Backpropagate to the layer's pre-activation.
            let mut gvec = dl;
            for l in (layer..net.layers.len()).rev() {
                let lay = &net.layers[l];
                let gu = gvec.zip_map(&t.pre[l], |gi, uu| gi * lay.activation.derivative(uu));
                if l == layer {
                    gvec = gu;
                    break;
                }
                gvec = lay.weight.transpose() * gu;
            }
            a.set_row(r, &t.inputs[layer].transpose());
            g.set_row(r, &gvec.transpose());
        }
        batches.push(KfacBatch { inputs: a, grads: g });
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherDistribution {
    pub probs: Vec<Vec<f64>>,
    pub tau: f64,
    pub samples: usize,
}

/// Posterior-predictive teacher `p_T(y|x) = (1/M) Σ_m softmax(f(x; w⁽ᵐ⁾)/τ)`.
/// `posteriors` pairs layer indices with posteriors over their weights; other
/// parameters stay at their current values.
pub fn teacher(
    net: &ToyNet,
    posteriors: &[(usize, &BlockPosterior)],
    inputs: &[Vec<f64>],
    samples: usize,
    tau: f64,
    seed: u64,
) -> Result<TeacherDistribution> {
    if samples == 0 {
        return Err(Error::invalid("teacher needs M >= 1"));
    }
    if !(tau >= 1.0) {
        return Err(Error::invalid(format!("temperature must be >= 1, got {tau}")));
    }
    let mut rng = seeded(seed);
    let mut probs = vec![vec![0.0; net.classes()]; inputs.len()];
    for _ in 0..samples {
        let mut sampled = net.clone();
        for (layer, post) in posteriors {
            let w = post.sample(&mut rng)?;
            sampled = sampled.with_weight(*layer, &w)?;
        }
        for (x, acc) in inputs.iter().zip(probs.iter_mut()) {
            let p = softmax(&sampled.forward(x)?, tau);
            for (a, pi) in acc.iter_mut().zip(p) {
                *a += pi / samples as f64;
            }
        }
    }
    for p in probs.iter_mut() {
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
    }
    Ok(TeacherDistribution { probs, tau, samples })
}

/// A layer whose weights are `ŵ_i = s_{g(i)} · offset_i` with frozen
/// `offset_i = level(q_i) − z_{g(i)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledLayer {
    pub layer: usize,
    pub offsets: Vec<f64>,
    pub group_size: usize,
}

impl ScaledLayer {
    pub fn groups(&self) -> usize {
        self.offsets.len().div_ceil(self.group_size)
    }

    pub fn weights(&self, scales: &[f64]) -> Vec<f64> {
        self.offsets
            .iter()
            .enumerate()
            .map(|(i, o)| scales[i / self.group_size] * o)
            .collect()
    }
}

fn apply_scales(net: &ToyNet, layers: &[ScaledLayer], scales: &[Vec<f64>]) -> Result<ToyNet> {
    if scales.len() != layers.len() {
        return Err(Error::DimensionMismatch { expected: layers.len(), got: scales.len() });
    }
    let mut out = net.clone();
    for (l, s) in layers.iter().zip(scales) {
        if s.len() != l.groups() {
            return Err(Error::DimensionMismatch { expected: l.groups(), got: s.len() });
        }
        out = out.with_weight(l.layer, &l.weights(s))?;
    }
    Ok(out)
}

/// Mean `KL(p_T ‖ softmax(f/τ))` over inputs and its gradient w.r.t. every
/// group scale.
pub fn kl_and_scale_grad(
    net: &ToyNet,
    layers: &[ScaledLayer],
    scales: &[Vec<f64>],
    teacher: &TeacherDistribution,
    inputs: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if teacher.probs.len() != inputs.len() || inputs.is_empty() {
        return Err(Error::DimensionMismatch { expected: inputs.len(), got: teacher.probs.len() });
    }
    let student = apply_scales(net, layers, scales)?;
    let wanted: Vec<usize> = layers.iter().map(|l| l.layer).collect();
    let n = inputs.len() as f64;
    let tau = teacher.tau;
    let mut kl = 0.0;
    let mut grads: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.groups()]).collect();
    for (x, pt) in inputs.iter().zip(&teacher.probs) {
        let t = student.trace(x)?;
        let logits = t.inputs.last().unwrap().as_slice();
        kl += kl_to_logits(pt, logits, tau) / n;
        let pq = softmax(logits, tau);
        let dlogits = DVector::from_iterator(pq.len(), pq.iter().zip(pt).map(|(q, p)| (q - p) / tau / n));
        let wg = student.weight_grads(&t, &dlogits, &wanted);
        for ((l, g), out) in layers.iter().zip(&wg).zip(grads.iter_mut()) {
            for (i, (gi, oi)) in g.iter().zip(&l.offsets).enumerate() {
                out[i / l.group_size] += gi * oi;
            }
        }
    }
    Ok((kl, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillResult {
    pub scales: Vec<Vec<f64>>,
    /// KL before each step, then the final value.
    pub kl_trace: Vec<f64>,
    pub halvings: u32,
    pub final_lr: f64,
}

/// Gradient descent on the mean teacher-student KL over group scales only.
///
/// After [`DIVERGENCE_PATIENCE`] consecutive KL increases the step size is
/// halved; needing more than [`MAX_HALVINGS`] halvings is a divergence error.
pub fn distill_scales(
    net: &ToyNet,
    layers: &[ScaledLayer],
    init_scales: &[Vec<f64>],
    teacher: &TeacherDistribution,
    inputs: &[Vec<f64>],
    steps: usize,
    lr: f64,
) -> Result<DistillResult> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
    }
    let mut scales = init_scales.to_vec();
    let mut lr = lr;
    let mut trace = Vec::with_capacity(steps + 1);
    let mut increases = 0;
    let mut halvings = 0;
    for _ in 0..steps {
        let (kl, grads) = kl_and_scale_grad(net, layers, &scales, teacher, inputs)?;
        if let Some(&prev) = trace.last() {
            if kl > prev {
                increases += 1;
            } else {
                increases = 0;
            }
        }
        trace.push(kl);
        if increases >= DIVERGENCE_PATIENCE {
            if halvings == MAX_HALVINGS {
                return Err(Error::Divergence { halvings });
            }
            halvings += 1;
            lr /= 2.0;
            increases = 0;
        }
        for (s, g) in scales.iter_mut().zip(&grads) {
            for (si, gi) in s.iter_mut().zip(g) {
                *si -= lr * gi;
            }
        }
    }
    let (kl, _) = kl_and_scale_grad(net, layers, &scales, teacher, inputs)?;
    trace.push(kl);
    Ok(DistillResult {
        scales,
        kl_trace: trace,
        halvings,
        final_lr: lr,
    })
}

/// Seeded standard-normal calibration inputs.
pub fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n).map(|_| (0..dim).map(|_| standard_normal(&mut rng)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: DMatrix<f64>) -> ToyNet {
        let o = w.nrows();
        ToyNet::new(vec![DenseLayer { weight: w, bias: DVector::zeros(o), activation: Activation::Identity }]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = linear(DMatrix::identity(3, 3));
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let net = linear(DMatrix::zeros(4, 2));
        let logits = net.forward(&[3.0, 1.0]).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert!(softmax(&logits, 1.0).iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_layer_hand_computation() {
        let net = ToyNet::new(vec![
            DenseLayer {
                weight: DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 2.0, 0.5]),
                bias: DVector::from_vec(vec![0.0, -1.0]),
                activation: Activation::Relu,
            },
            DenseLayer {
                weight: DMatrix::from_row_slice(1, 2, &[3.0, -2.0]),
                bias: DVector::from_vec(vec![0.5]),
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        // x = (1, 2): u = (−1, 2), h = (0, 2), logit = −4 + 0.5.
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![-3.5]);
    }

    #[test]
    fn model_roundtrip() {
        let net = ToyNet::random(&[4, 6, 3], 1).unwrap();
        let (m, b) = net.to_model().unwrap();
        let back = ToyNet::from_model(&m, &b).unwrap();
        for (a, c) in net.layers.iter().zip(&back.layers) {
            assert!((&a.weight - &c.weight).amax() < 1e-6);
        }
        assert_eq!(ToyNet::layer_of(&m, "fc1.weight"), Some(1));
    }

    #[test]
    fn ggn_matches_dense_assembly() {
        // Single linear layer: J_n[c, (c, j)] = x_j.
        let (o, i) = (3, 4);
        let net = ToyNet::random(&[i, o], 2).unwrap();
        let inputs = random_inputs(5, i, 3);
        let oracle = ggn_oracle(&net, 0, &inputs).unwrap();
        let d = o * i;
        let mut dense = DMatrix::zeros(d, d);
        for x in &inputs {
            let p = DVector::from_vec(softmax(&net.forward(x).unwrap(), 1.0));
            let lam = DMatrix::from_diagonal(&p) - &p * p.transpose();
            let mut j = DMatrix::zeros(o, d);
            for c in 0..o {
                for k in 0..i {
                    j[(c, c * i + k)] = x[k];
                }
            }
            dense += j.transpose() * lam * j / inputs.len() as f64;
        }
        for col in 0..d {
            let mut e = vec![0.0; d];
            e[col] = 1.0;
            let got = oracle.apply(&e);
            for r in 0..d {
                assert!((got[r] - dense[(r, col)]).abs() < 1e-12);
            }
        }
        assert!(oracle.apply(&vec![0.0; d]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ggn_is_symmetric_in_hidden_layers() {
        let net = ToyNet::random(&[3, 5, 4], 4).unwrap();
        let inputs = random_inputs(6, 3, 5);
        let oracle = ggn_oracle(&net, 0, &inputs).unwrap();
        let mut rng = seeded(1);
        let u: Vec<f64> = (0..15).map(|_| standard_normal(&mut rng)).collect();
        let v: Vec<f64> = (0..15).map(|_| standard_normal(&mut rng)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&v, &oracle.apply(&u)) - dot(&u, &oracle.apply(&v))).abs() < 1e-8);
        assert!(dot(&u, &oracle.apply(&u)) >= -1e-12);
        assert!(ggn_oracle(&net, 2, &inputs).is_err());
    }

    #[test]
    fn teacher_limits() {
        let net = ToyNet::random(&[3, 4], 6).unwrap();
        let inputs = random_inputs(4, 3, 7);
        let mu = net.weight_row_major(0);
        let post = BlockPosterior::diagonal(mu, vec![1e-300; 12]).unwrap();
        let t = teacher(&net, &[(0, &post)], &inputs, 1, 1.0, 0).unwrap();
        for (x, p) in inputs.iter().zip(&t.probs) {
            let expected = softmax(&net.forward(x).unwrap(), 1.0);
            for (a, b) in p.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let hot = teacher(&net, &[(0, &post)], &inputs, 1, 1e6, 0).unwrap();
        assert!(hot.probs.iter().flatten().all(|p| (p - 0.25).abs() < 1e-4));
        assert!(teacher(&net, &[], &inputs, 0, 2.0, 0).is_err());
        assert!(teacher(&net, &[], &inputs, 1, 0.5, 0).is_err());
    }

    #[test]
    fn kl_basics() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!(kl_divergence(&p, &[0.5, 0.3, 0.2]) > 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
    }

    fn scaled_setup(seed: u64) -> (ToyNet, Vec<ScaledLayer>, Vec<Vec<f64>>) {
        let net = ToyNet::random(&[4, 6, 3], seed).unwrap();
        let layers: Vec<ScaledLayer> = (0..2)
            .map(|l| ScaledLayer {
                layer: l,
                offsets: net.weight_row_major(l),
                group_size: 4,
            })
            .collect();
        let scales = layers.iter().map(|l| vec![1.0; l.groups()]).collect();
        (net, layers, scales)
    }

    #[test]
    fn teacher_equal_student_has_zero_gradient() {
        let (net, layers, scales) = scaled_setup(3);
        let inputs = random_inputs(10, 4, 1);
        let probs = inputs.iter().map(|x| softmax(&net.forward(x).unwrap(), 2.0)).collect();
        let t = TeacherDistribution { probs, tau: 2.0, samples: 1 };
        let (kl, g) = kl_and_scale_grad(&net, &layers, &scales, &t, &inputs).unwrap();
        assert!(kl < 1e-12);
        let norm: f64 = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-8);
        let r = distill_scales(&net, &layers, &scales, &t, &inputs, 5, 0.1).unwrap();
        for (a, b) in r.scales.iter().flatten().zip(scales.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_gradient_matches_finite_differences() {
        let (net, layers, _) = scaled_setup(4);
        let inputs = random_inputs(8, 4, 2);
        let probs = inputs.iter().map(|x| softmax(&[x[0], -x[1], 0.3], 2.0)).collect();
        let t = TeacherDistribution { probs, tau: 2.0, samples: 1 };
        let scales: Vec<Vec<f64>> = layers.iter().map(|l| (0..l.groups()).map(|g| 0.8 + 0.05 * g as f64).collect()).collect();
        let (_, grads) = kl_and_scale_grad(&net, &layers, &scales, &t, &inputs).unwrap();
        let h = 1e-5;
        for li in 0..layers.len() {
            for g in 0..layers[li].groups() {
                let mut plus = scales.clone();
                plus[li][g] += h;
                let mut minus = scales.clone();
                minus[li][g] -= h;
                let fp = kl_and_scale_grad(&net, &layers, &plus, &t, &inputs).unwrap().0;
                let fm = kl_and_scale_grad(&net, &layers, &minus, &t, &inputs).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let a = grads[li][g];
                assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-6), "layer {li} group {g}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn divergence_guard_aborts() {
        let (net, layers, scales) = scaled_setup(5);
        let inputs = random_inputs(6, 4, 3);
        let probs = inputs.iter().map(|_| vec![1.0 / 3.0; 3]).collect();
        let t = TeacherDistribution { probs, tau: 2.0, samples: 1 };
        let r = distill_scales(&net, &layers, &scales, &t, &inputs, 400, 1e4);
        assert!(matches!(r, Err(Error::Divergence { halvings: MAX_HALVINGS })));
    }

    #[test]
    fn recovers_mis_scaled_block() {
        let net = ToyNet::random(&[4, 8, 3], 12).unwrap();
        let inputs = random_inputs(64, 4, 13);
        let probs = inputs.iter().map(|x| softmax(&net.forward(x).unwrap(), 2.0)).collect();
        let t = TeacherDistribution { probs, tau: 2.0, samples: 1 };
        let layers = vec![ScaledLayer { layer: 1, offsets: net.weight_row_major(1), group_size: 24 }];
        let init = vec![vec![0.5]];
        let r = distill_scales(&net, &layers, &init, &t, &inputs, 500, 20.0).unwrap();
        let first = r.kl_trace[0];
        let last = *r.kl_trace.last().unwrap();
        assert!((r.scales[0][0] - 1.0).abs() < 0.05, "scale {}", r.scales[0][0]);
        assert!(last < first / 10.0, "{first} -> {last}");
    }
}
