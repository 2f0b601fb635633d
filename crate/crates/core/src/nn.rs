//! Small feed-forward networks with masked weights.
//!
//! Gradients are always computed on the full parameter space: a pruned weight
//! contributes zero to the forward pass but still receives the gradient of the
//! dense extension at the current point. That gradient is what the pruner
//! uses to decide whether a coordinate is worth adding back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{spmm, DenseMatrix, SparseMatrix};

/// Layers whose mask density falls below this use the sparse forward kernel.
pub const SPARSE_FORWARD_DENSITY: f64 = 1.0 / 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// `outputs x inputs` weight matrix plus bias.
    Dense { inputs: usize, outputs: usize },
    /// Stride 1, no padding. `height`/`width` are the input spatial size.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, height: usize, width: usize },
    Relu,
    /// Identity on the flat channel-major layout; kept for readable model specs.
    Flatten,
}

impl LayerSpec {
    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((outputs, inputs)),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some((out_channels, in_channels * kernel * kernel))
            }
            _ => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                (in_channels * kernel * kernel, out_channels * kernel * kernel)
            }
            _ => (0, 0),
        }
    }

    fn input_dim(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { inputs, .. } => Some(inputs),
            LayerSpec::Conv2d { in_channels, height, width, .. } => Some(in_channels * height * width),
            _ => None,
        }
    }

    fn output_dim(&self, input: usize) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { out_channels, kernel, height, width, .. } => {
                out_channels * (height + 1 - kernel) * (width + 1 - kernel)
            }
            LayerSpec::Relu | LayerSpec::Flatten => input,
        }
    }
}

/// Layer stack terminated by an implicit softmax cross-entropy loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let net = Self { input_dim, layers };
        net.validate()?;
        Ok(net)
    }

    /// Fully-connected network with ReLU between hidden layers.
    pub fn mlp(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Shape("an MLP needs at least input and output sizes".into()));
        }
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense { inputs: w[0], outputs: w[1] });
        }
        Self::new(sizes[0], layers)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = self.input_dim;
        if dim == 0 {
            return Err(Error::Shape("input dimension must be positive".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv2d { kernel, height, width, in_channels, out_channels } = *layer {
                if kernel == 0 || kernel > height || kernel > width || in_channels == 0 || out_channels == 0 {
                    return Err(Error::Shape(format!("layer {i}: invalid convolution geometry")));
                }
            }
            if let Some(expected) = layer.input_dim() {
                if expected != dim {
                    return Err(Error::Shape(format!(
                        "layer {i} expects {expected} inputs but receives {dim}"
                    )));
                }
            }
            dim = layer.output_dim(dim);
            if dim == 0 {
                return Err(Error::Shape(format!("layer {i} has zero outputs")));
            }
        }
        if !self.layers.iter().any(LayerSpec::is_prunable) {
            return Err(Error::Shape("network has no weight layers".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.iter().fold(self.input_dim, |d, l| l.output_dim(d))
    }

    /// Per weight layer: number of prunable coordinates.
    pub fn layer_capacities(&self) -> Vec<usize> {
        self.layers.iter().filter_map(|l| l.weight_shape()).map(|(r, c)| r * c).collect()
    }

    pub fn capacity(&self) -> usize {
        self.layer_capacities().iter().sum()
    }

    /// Glorot-uniform weights, zero biases, full mask.
    pub fn init(&self, seed: u64) -> MaskedParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .layers
            .iter()
            .filter_map(|l| l.weight_shape().map(|shape| (l, shape)))
            .map(|(l, (rows, cols))| {
                let (fan_in, fan_out) = l.fans();
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
                LayerParams { weights, mask: vec![true; rows * cols], bias: vec![0.0; rows] }
            })
            .collect();
        MaskedParams { layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
    pub bias: Vec<f64>,
}

/// Weights and masks of every weight layer. A masked-out weight is exactly zero.
///
/// Coordinates are numbered globally, layer after layer, in the order the
/// weight layers appear in the [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedParams {
    pub layers: Vec<LayerParams>,
}

impl MaskedParams {
    pub fn capacity(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn layer_capacities(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weights.len()).collect()
    }

    pub fn kept_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.mask.iter().filter(|m| **m).count()).collect()
    }

    pub fn kept(&self) -> usize {
        self.kept_per_layer().iter().sum()
    }

    pub fn density(&self) -> f64 {
        let cap = self.capacity();
        if cap == 0 {
            0.0
        } else {
            self.kept() as f64 / cap as f64
        }
    }

    /// Layer index of every global coordinate.
    pub fn coordinate_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().flat_map(|(i, l)| std::iter::repeat_n(i, l.weights.len())).collect()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().copied()).collect()
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.mask.iter().copied()).collect()
    }

    /// Checks that every masked-out weight is zero.
    pub fn mask_is_closed(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().zip(&l.mask).all(|(w, m)| *m || *w == 0.0))
    }

    pub fn same_mask(&self, other: &MaskedParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.mask == b.mask)
    }

    /// Replaces the mask. Newly pruned weights become zero; newly kept
    /// weights start from the zero they were stored as.
    pub fn apply_mask(&mut self, flat_mask: &[bool]) -> Result<()> {
        if flat_mask.len() != self.capacity() {
            return Err(Error::Shape(format!(
                "mask has {} entries, model has {}",
                flat_mask.len(),
                self.capacity()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.weights.len();
            for ((w, m), &new) in layer.weights.iter_mut().zip(&mut layer.mask).zip(&flat_mask[offset..offset + n]) {
                if !new {
                    *w = 0.0;
                }
                *m = new;
            }
            offset += n;
        }
        Ok(())
    }

    /// Copy of `self` with weights drawn from `source` on the kept coordinates.
    pub fn masked_copy_of(&self, source: &MaskedParams) -> MaskedParams {
        let mut out = source.clone();
        out.apply_mask(&self.flat_mask()).expect("same architecture");
        out
    }
}

/// Full-space gradient of the mean batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub batch_size: usize,
}

impl GradientSample {
    pub fn flat_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().flat_map(|w| w.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// `Σ_{j kept} g_j²`, the first-order estimate of loss decrease per unit step.
pub fn masked_grad_sqnorm(grad: &GradientSample, params: &MaskedParams) -> f64 {
    grad.weights
        .iter()
        .zip(&params.layers)
        .flat_map(|(g, l)| g.iter().zip(&l.mask))
        .filter(|(_, m)| **m)
        .map(|(g, _)| g * g)
        .sum()
}

/// Same as [`masked_grad_sqnorm`] over flat vectors.
pub fn masked_sqnorm(grad: &[f64], mask: &[bool]) -> f64 {
    grad.iter().zip(mask).filter(|(_, m)| **m).map(|(g, _)| g * g).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// When set, the rate halves every `lr_half_life` rounds.
    #[serde(default)]
    pub lr_half_life: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
}

impl SgdConfig {
    pub fn plain(learning_rate: f64) -> Self {
        Self { learning_rate, lr_half_life: None, momentum: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, round: u64) -> f64 {
        match self.lr_half_life {
            Some(h) => self.learning_rate * 0.5f64.powf(round as f64 / h),
            None => self.learning_rate,
        }
    }
}

/// `w ← w − η g ⊙ m`; biases take the plain step.
pub fn sgd_step(params: &mut MaskedParams, grad: &GradientSample, lr: f64) {
    for ((layer, gw), gb) in params.layers.iter_mut().zip(&grad.weights).zip(&grad.bias) {
        for ((w, m), g) in layer.weights.iter_mut().zip(&layer.mask).zip(gw) {
            if *m {
                *w -= lr * g;
            }
        }
        for (b, g) in layer.bias.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }
}

/// Masked SGD with heavy-ball momentum. Velocity of pruned coordinates is
/// held at zero.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Option<Velocity>,
}

/// Weight and bias velocity, per layer.
type Velocity = (Vec<Vec<f64>>, Vec<Vec<f64>>);

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: None }
    }

    pub fn step(&mut self, params: &mut MaskedParams, grad: &GradientSample, round: u64) {
        let lr = self.config.lr_at(round);
        if self.config.momentum == 0.0 {
            sgd_step(params, grad, lr);
            return;
        }
        let mu = self.config.momentum;
        let (vw, vb) = self.velocity.get_or_insert_with(|| {
            (
                params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
                params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            )
        });
        for (i, layer) in params.layers.iter_mut().enumerate() {
            for (j, (w, m)) in layer.weights.iter_mut().zip(&layer.mask).enumerate() {
                if *m {
                    let v = &mut vw[i][j];
                    *v = mu * *v + grad.weights[i][j];
                    *w -= lr * *v;
                } else {
                    vw[i][j] = 0.0;
                }
            }
            for (j, b) in layer.bias.iter_mut().enumerate() {
                let v = &mut vb[i][j];
                *v = mu * *v + grad.bias[i][j];
                *b -= lr * *v;
            }
        }
    }

    /// Zeroes velocity on coordinates the mask prunes.
    pub fn apply_mask(&mut self, flat_mask: &[bool]) {
        if let Some((vw, _)) = &mut self.velocity {
            for (v, m) in vw.iter_mut().flatten().zip(flat_mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Row-major `n x dim` batch of examples.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize]) -> Self {
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Inputs seen by each layer during the forward pass, plus output probabilities.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    probs: Vec<f64>,
    labels: Vec<usize>,
    batch: usize,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

pub fn forward(net: &Network, params: &MaskedParams, batch: Batch<'_>) -> Result<(f64, ForwardCache)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if batch.features.len() != n * net.input_dim {
        return Err(Error::Shape(format!(
            "batch of {n} examples needs {} features, got {}",
            n * net.input_dim,
            batch.features.len()
        )));
    }
    if params.layers.len() != net.layer_capacities().len() {
        return Err(Error::Shape("parameter layers do not match network".into()));
    }
    let classes = net.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
    }

    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut x = batch.features.to_vec();
    let mut dim = net.input_dim;
    let mut p = 0;
    for layer in &net.layers {
        let out_dim = layer.output_dim(dim);
        let y = match *layer {
            LayerSpec::Dense { inputs: d_in, outputs } => {
                let y = dense_forward(&params.layers[p], &x, n, d_in, outputs);
                p += 1;
                y
            }
            LayerSpec::Conv2d { .. } => {
                let y = conv_forward(layer, &params.layers[p], &x, n);
                p += 1;
                y
            }
            LayerSpec::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::Flatten => x.clone(),
        };
        inputs.push(x);
        x = y;
        dim = out_dim;
    }

    let mut loss = 0.0;
    let mut probs = x;
    for (row, &y) in probs.chunks_mut(dim).zip(batch.labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        loss -= row[y].ln();
    }
    loss /= n as f64;
    Ok((loss, ForwardCache { inputs, probs, labels: batch.labels.to_vec(), batch: n }))
}

pub fn backward(net: &Network, params: &MaskedParams, cache: &ForwardCache) -> GradientSample {
    let n = cache.batch;
    let classes = net.num_classes();
    let mut g = cache.probs.clone();
    for (row, &y) in g.chunks_mut(classes).zip(&cache.labels) {
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }

    let num_weight_layers = params.layers.len();
    let mut gw = vec![Vec::new(); num_weight_layers];
    let mut gb = vec![Vec::new(); num_weight_layers];
    let mut p = num_weight_layers;
    for (layer, x) in net.layers.iter().zip(&cache.inputs).rev() {
        g = match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                p -= 1;
                let (w, b, gx) = dense_backward(&params.layers[p], x, &g, n, inputs, outputs);
                gw[p] = w;
                gb[p] = b;
                gx
            }
            LayerSpec::Conv2d { .. } => {
                p -= 1;
                let (w, b, gx) = conv_backward(layer, &params.layers[p], x, &g, n);
                gw[p] = w;
                gb[p] = b;
                gx
            }
            LayerSpec::Relu => g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
            LayerSpec::Flatten => g,
        };
    }
    GradientSample { weights: gw, bias: gb, batch_size: n }
}

/// Forward and backward in one call.
pub fn loss_and_gradient(net: &Network, params: &MaskedParams, batch: Batch<'_>) -> Result<(f64, GradientSample)> {
    let (loss, cache) = forward(net, params, batch)?;
    Ok((loss, backward(net, params, &cache)))
}

/// Mean loss and accuracy over a dataset, evaluated in chunks.
pub fn evaluate(net: &Network, params: &MaskedParams, features: &[f64], labels: &[usize]) -> Result<(f64, f64)> {
    const CHUNK: usize = 512;
    if labels.is_empty() {
        return Ok((0.0, 0.0));
    }
    let d = net.input_dim;
    let classes = net.num_classes();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (start, ys) in (0..labels.len()).step_by(CHUNK).zip(labels.chunks(CHUNK)) {
        let xs = &features[start * d..(start + ys.len()) * d];
        let (l, cache) = forward(net, params, Batch::new(xs, ys))?;
        loss += l * ys.len() as f64;
        for (row, &y) in cache.probs.chunks(classes).zip(ys) {
            if argmax(row) == y {
                correct += 1;
            }
        }
    }
    Ok((loss / labels.len() as f64, correct as f64 / labels.len() as f64))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn layer_density(p: &LayerParams) -> f64 {
    p.mask.iter().filter(|m| **m).count() as f64 / p.mask.len() as f64
}

fn dense_forward(p: &LayerParams, x: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * d_out];
    if layer_density(p) < SPARSE_FORWARD_DENSITY {
        // (out x in) · (in x n), then transpose back to row-per-example
        let w = SparseMatrix::from_dense(&DenseMatrix::new(d_out, d_in, p.weights.clone()).expect("weight shape"));
        let xt = transpose(x, n, d_in);
        let prod = spmm(&w, &DenseMatrix::new(d_in, n, xt).expect("input shape")).expect("inner dims");
        for o in 0..d_out {
            for e in 0..n {
                y[e * d_out + o] = prod.get(o, e) + p.bias[o];
            }
        }
        return y;
    }
    for (xr, yr) in x.chunks(d_in).zip(y.chunks_mut(d_out)) {
        for ((yo, wr), b) in yr.iter_mut().zip(p.weights.chunks(d_in)).zip(&p.bias) {
            *yo = b + dot(wr, xr);
        }
    }
    y
}

fn dense_backward(
    p: &LayerParams,
    x: &[f64],
    gout: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; d_out * d_in];
    let mut gb = vec![0.0; d_out];
    let mut gx = vec![0.0; n * d_in];
    for ((xr, gr), gxr) in x.chunks(d_in).zip(gout.chunks(d_out)).zip(gx.chunks_mut(d_in)) {
        for (o, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            axpy(g, xr, &mut gw[o * d_in..(o + 1) * d_in]);
            axpy(g, &p.weights[o * d_in..(o + 1) * d_in], gxr);
        }
    }
    (gw, gb, gx)
}

/// `(C·k·k) x (oh·ow)` patch matrix of one example.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut cols = vec![0.0; c * k * k * oh * ow];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let q = (ch * k + ki) * k + kj;
                let dst = &mut cols[q * oh * ow..(q + 1) * oh * ow];
                for y in 0..oh {
                    let src = &x[ch * h * w + (y + ki) * w + kj..][..ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize, k: usize) {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let q = (ch * k + ki) * k + kj;
                let src = &cols[q * oh * ow..(q + 1) * oh * ow];
                for y in 0..oh {
                    let dst = &mut gx[ch * h * w + (y + ki) * w + kj..][..ow];
                    for (d, s) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn conv_forward(spec: &LayerSpec, p: &LayerParams, x: &[f64], n: usize) -> Vec<f64> {
    let LayerSpec::Conv2d { in_channels, out_channels, kernel, height, width } = *spec else {
        unreachable!("conv_forward called on {spec:?}")
    };
    let q = in_channels * kernel * kernel;
    let spatial = (height + 1 - kernel) * (width + 1 - kernel);
    let in_dim = in_channels * height * width;
    let weights = DenseMatrix::new(out_channels, q, p.weights.clone()).expect("weight shape");
    let sparse = (layer_density(p) < SPARSE_FORWARD_DENSITY).then(|| SparseMatrix::from_dense(&weights));
    let mut y = Vec::with_capacity(n * out_channels * spatial);
    for xe in x.chunks(in_dim) {
        let cols = DenseMatrix::new(q, spatial, im2col(xe, in_channels, height, width, kernel)).expect("cols");
        let out = match &sparse {
            Some(s) => spmm(s, &cols),
            None => weights.matmul(&cols),
        }
        .expect("inner dims");
        for (row, b) in out.values().chunks(spatial).zip(&p.bias) {
            y.extend(row.iter().map(|v| v + b));
        }
    }
    y
}

fn conv_backward(spec: &LayerSpec, p: &LayerParams, x: &[f64], gout: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let LayerSpec::Conv2d { in_channels, out_channels, kernel, height, width } = *spec else {
        unreachable!("conv_backward called on {spec:?}")
    };
    let q = in_channels * kernel * kernel;
    let spatial = (height + 1 - kernel) * (width + 1 - kernel);
    let in_dim = in_channels * height * width;
    let out_dim = out_channels * spatial;
    let mut gw = vec![0.0; out_channels * q];
    let mut gb = vec![0.0; out_channels];
    let mut gx = vec![0.0; n * in_dim];
    for ((xe, ge), gxe) in x.chunks(in_dim).zip(gout.chunks(out_dim)).zip(gx.chunks_mut(in_dim)) {
        let cols = im2col(xe, in_channels, height, width, kernel);
        let mut gcols = vec![0.0; q * spatial];
        for oc in 0..out_channels {
            let g = &ge[oc * spatial..(oc + 1) * spatial];
            gb[oc] += g.iter().sum::<f64>();
            for r in 0..q {
                gw[oc * q + r] += dot(g, &cols[r * spatial..(r + 1) * spatial]);
                let wv = p.weights[oc * q + r];
                if wv != 0.0 {
                    axpy(wv, g, &mut gcols[r * spatial..(r + 1) * spatial]);
                }
            }
        }
        col2im_add(&gcols, gxe, in_channels, height, width, kernel);
    }
    (gw, gb, gx)
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_of(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> (Vec<f64>, Vec<usize>) {
        let xs = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys = (0..n).map(|i| i % classes).collect();
        (xs, ys)
    }

    #[test]
    fn zero_softmax_layer_gives_log_classes() {
        let net = Network::mlp(&[4, 10]).unwrap();
        let mut params = net.init(1);
        params.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        let (xs, ys) = batch_of(&mut ChaCha8Rng::seed_from_u64(2), 3, 4, 10);
        let (loss, _) = forward(&net, &params, Batch::new(&xs, &ys)).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fully_pruned_network_gives_log_classes() {
        let net = Network::mlp(&[5, 7, 3]).unwrap();
        let mut params = net.init(1);
        params.apply_mask(&vec![false; params.capacity()]).unwrap();
        let (xs, ys) = batch_of(&mut ChaCha8Rng::seed_from_u64(2), 4, 5, 3);
        let (loss, _) = forward(&net, &params, Batch::new(&xs, &ys)).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_layer_loss_matches_scalar_oracle() {
        let net = Network::mlp(&[2, 3, 2]).unwrap();
        let params = net.init(9);
        let xs = [0.5, -1.0, 1.5, 0.25, -0.75, 2.0];
        let ys = [0, 1, 1];
        let (loss, _) = forward(&net, &params, Batch::new(&xs, &ys)).unwrap();

        // straight-line scalar evaluation
        let w1 = &params.layers[0].weights;
        let w2 = &params.layers[1].weights;
        let mut total = 0.0;
        for e in 0..3 {
            let x0 = xs[2 * e];
            let x1 = xs[2 * e + 1];
            let h: Vec<f64> = (0..3).map(|o| (w1[o * 2] * x0 + w1[o * 2 + 1] * x1).max(0.0)).collect();
            let z0 = w2[0] * h[0] + w2[1] * h[1] + w2[2] * h[2];
            let z1 = w2[3] * h[0] + w2[4] * h[1] + w2[5] * h[2];
            let z = [z0, z1];
            let lse = (z0.exp() + z1.exp()).ln();
            total += lse - z[ys[e]];
        }
        assert!((loss - total / 3.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let net = Network::mlp(&[4, 2]).unwrap();
        let params = net.init(0);
        let err = forward(&net, &params, Batch::new(&[1.0; 6], &[0, 1])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn dead_input_column_has_zero_gradient() {
        let net = Network::mlp(&[3, 2]).unwrap();
        let params = net.init(4);
        let xs = [0.3, 0.0, -0.2, 1.1, 0.0, 0.4];
        let (_, g) = loss_and_gradient(&net, &params, Batch::new(&xs, &[0, 1])).unwrap();
        // weight (o, 1) multiplies input column 1, which is zero everywhere
        assert_eq!(g.weights[0][1], 0.0);
        assert_eq!(g.weights[0][4], 0.0);
    }

    #[test]
    fn duplicated_batch_gives_identical_gradient() {
        let net = Network::mlp(&[4, 5, 3]).unwrap();
        let params = net.init(11);
        let (xs, ys) = batch_of(&mut ChaCha8Rng::seed_from_u64(12), 4, 4, 3);
        let (_, g1) = loss_and_gradient(&net, &params, Batch::new(&xs, &ys)).unwrap();
        let xs2 = [xs.clone(), xs.clone()].concat();
        let ys2 = [ys.clone(), ys.clone()].concat();
        let (_, g2) = loss_and_gradient(&net, &params, Batch::new(&xs2, &ys2)).unwrap();
        for (a, b) in g1.flat_weights().zip(g2.flat_weights()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn masked_coordinates_still_receive_gradient() {
        let net = Network::mlp(&[3, 4, 2]).unwrap();
        let mut params = net.init(5);
        let mut mask = params.flat_mask();
        mask[0] = false;
        params.apply_mask(&mask).unwrap();
        let (xs, ys) = batch_of(&mut ChaCha8Rng::seed_from_u64(6), 5, 3, 2);
        let (_, g) = loss_and_gradient(&net, &params, Batch::new(&xs, &ys)).unwrap();
        assert_ne!(g.weights[0][0], 0.0);
    }

    #[test]
    fn sgd_scalar_substitution() {
        let mut params = MaskedParams {
            layers: vec![LayerParams { weights: vec![1.0], mask: vec![true], bias: vec![] }],
        };
        let g = GradientSample { weights: vec![vec![0.5]], bias: vec![vec![]], batch_size: 1 };
        sgd_step(&mut params, &g, 0.1);
        assert_eq!(params.layers[0].weights[0], 0.95);
    }

    #[test]
    fn sgd_full_and_empty_masks() {
        let net = Network::mlp(&[3, 4, 2]).unwrap();
        let start = net.init(7);
        let (xs, ys) = batch_of(&mut ChaCha8Rng::seed_from_u64(8), 5, 3, 2);
        let (_, g) = loss_and_gradient(&net, &start, Batch::new(&xs, &ys)).unwrap();

        let mut full = start.clone();
        sgd_step(&mut full, &g, 0.1);
        for ((w, w0), gi) in full.flat_weights().iter().zip(start.flat_weights()).zip(g.flat_weights()) {
            assert_eq!(*w, w0 - 0.1 * gi);
        }

        let mut empty = start.clone();
        empty.apply_mask(&vec![false; start.capacity()]).unwrap();
        let before = empty.clone();
        sgd_step(&mut empty, &g, 0.1);
        assert_eq!(empty.flat_weights(), before.flat_weights());
    }

    #[test]
    fn momentum_velocity_follows_mask() {
        let net = Network::mlp(&[3, 2]).unwrap();
        let mut params = net.init(2);
        let (xs, ys) = batch_of(&mut ChaCha8Rng::seed_from_u64(3), 4, 3, 2);
        let mut opt = Sgd::new(SgdConfig { learning_rate: 0.1, lr_half_life: None, momentum: 0.9 });
        let (_, g) = loss_and_gradient(&net, &params, Batch::new(&xs, &ys)).unwrap();
        opt.step(&mut params, &g, 0);
        let mut mask = params.flat_mask();
        mask[2] = false;
        params.apply_mask(&mask).unwrap();
        opt.apply_mask(&mask);
        // flip it back on: stale velocity must not move it
        mask[2] = true;
        params.apply_mask(&mask).unwrap();
        let zero = GradientSample {
            weights: g.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            bias: g.bias.iter().map(|b| vec![0.0; b.len()]).collect(),
            batch_size: 1,
        };
        opt.step(&mut params, &zero, 1);
        assert_eq!(params.layers[0].weights[2], 0.0);
    }

    #[test]
    fn apply_mask_semantics() {
        let net = Network::mlp(&[3, 3]).unwrap();
        let start = net.init(1);

        let mut same = start.clone();
        same.apply_mask(&start.flat_mask()).unwrap();
        assert_eq!(same, start);

        let mut none = start.clone();
        none.apply_mask(&[false; 9]).unwrap();
        assert!(none.flat_weights().iter().all(|w| *w == 0.0));

        let mut toggled = start.clone();
        let mut mask = vec![true; 9];
        mask[4] = false;
        toggled.apply_mask(&mask).unwrap();
        mask[4] = true;
        toggled.apply_mask(&mask).unwrap();
        for (j, (a, b)) in toggled.flat_weights().iter().zip(start.flat_weights()).enumerate() {
            if j == 4 {
                assert_eq!(*a, 0.0);
            } else {
                assert_eq!(*a, b);
            }
        }
        assert!(toggled.apply_mask(&[true; 3]).is_err());
    }

    #[test]
    fn masked_sqnorm_examples() {
        assert_eq!(masked_sqnorm(&[1.0, 2.0, 3.0], &[true, false, true]), 10.0);
        assert_eq!(masked_sqnorm(&[1.0, 2.0, 3.0], &[true; 3]), 14.0);
        assert_eq!(masked_sqnorm(&[1.0, 2.0, 3.0], &[false; 3]), 0.0);
    }

    #[test]
    fn sparse_forward_path_matches_dense() {
        let net = Network::new(
            2 * 6 * 6,
            vec![
                LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, height: 6, width: 6 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 48, outputs: 4 },
            ],
        )
        .unwrap();
        let mut params = net.init(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask: Vec<bool> = (0..params.capacity()).map(|_| rng.random::<f64>() < 0.02).collect();
        params.apply_mask(&mask).unwrap();
        let (xs, ys) = batch_of(&mut rng, 3, 72, 4);
        let (sparse_loss, _) = forward(&net, &params, Batch::new(&xs, &ys)).unwrap();

        // same values, but with one extra kept zero per layer to force the dense path
        let mut dense = params.clone();
        for l in &mut dense.layers {
            let extra = (l.mask.len() as f64 * SPARSE_FORWARD_DENSITY).ceil() as usize;
            for m in l.mask.iter_mut().filter(|m| !**m).take(extra) {
                *m = true;
            }
        }
        let (dense_loss, _) = forward(&net, &dense, Batch::new(&xs, &ys)).unwrap();
        assert!((sparse_loss - dense_loss).abs() < 1e-12);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // a unit whose incoming weights are all pruned and whose bias is zero
        // sits exactly at the kink; its weights receive no gradient
        let net = Network::mlp(&[2, 2, 2]).unwrap();
        let mut params = net.init(1);
        params.apply_mask(&[false, false, true, true, true, true, true, true]).unwrap();
        let (_, g) = loss_and_gradient(&net, &params, Batch::new(&[0.3, -0.7], &[1])).unwrap();
        assert_eq!(&g.weights[0][..2], &[0.0, 0.0]);
        assert_eq!(g.bias[0][0], 0.0);
    }
}
