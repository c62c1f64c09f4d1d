//! Corner-offset regressor: a small tanh MLP on stacked downsampled patches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distributions::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::{homography_to_offsets, CornerOffsets, Frame, Homography};
use crate::imaging::{center_crop, normalize_intensity, resize_area, to_grayscale, ImageBuf};

use super::sup_loss_grad;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train on every grid symmetry of each example.
    pub symmetries: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.0,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            symmetries: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorSpec {
    /// Side of the square downsampled input patch.
    pub input_side: usize,
    pub hidden: Vec<usize>,
    /// Pixel scale applied to the raw network outputs.
    pub output_scale: f64,
    /// Patch frame the offsets refer to.
    pub patch: Frame,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        Self {
            input_side: 32,
            hidden: vec![64, 32],
            output_scale: 8.0,
            patch: Frame::new(64, 64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (o, b) in self.bias.iter().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// MLP mapping a stacked (source, target) patch pair to 8 corner offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    pub spec: RegressorSpec,
    pub layers: Vec<Layer>,
    pub train: TrainConfig,
}

/// Gradient buffers shaped like the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    fn zeros_like(model: &RegressorModel) -> Self {
        Self {
            layers: model.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    fn add(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

/// Cropped, grayscale, normalized, downsampled patch flattened row-major.
pub fn preprocess(img: &ImageBuf, spec: &RegressorSpec) -> Result<Vec<f64>> {
    let (pw, ph) = (spec.patch.width as usize, spec.patch.height as usize);
    let patch = if img.dims() == (pw, ph) {
        img.clone()
    } else {
        center_crop(img, pw, ph)?
    };
    let small = resize_area(&to_grayscale(&patch), spec.input_side, spec.input_side);
    Ok(normalize_intensity(&small).data.iter().map(|v| *v as f64).collect())
}

/// Concatenated network input for the ordered pair `(a, b)`.
pub fn stack(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

impl RegressorModel {
    /// Xavier-uniform hidden layers from `seed`; the output layer starts at
    /// zero so an untrained model predicts the identity.
    pub fn new(spec: RegressorSpec, train: TrainConfig, seed: u64) -> Result<Self> {
        if spec.input_side == 0 || spec.hidden.iter().any(|h| *h == 0) || !(spec.output_scale > 0.0) {
            return Err(Error::InvalidConfig("regressor shape must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![2 * spec.input_side * spec.input_side];
        sizes.extend(&spec.hidden);
        sizes.push(8);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, io)| {
                let mut l = Layer::zeros(io[0], io[1]);
                if k == last {
                    return l;
                }
                let a = (6.0 / (io[0] + io[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a);
                l.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
                l
            })
            .collect();
        Ok(Self { spec, layers, train })
    }

    /// Model with every weight and bias set to zero.
    pub fn zeroed(spec: RegressorSpec, train: TrainConfig) -> Result<Self> {
        let mut m = Self::new(spec, train, 0)?;
        for l in &mut m.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(m)
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    // Activations per layer; the last entry is the raw linear output.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(l.outputs);
            l.forward(acts.last().expect("input present"), &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    /// Offsets in pixels for a prepared input vector.
    pub fn forward_raw(&self, x: &[f64]) -> [f64; 8] {
        let acts = self.activations(x);
        let y = acts.last().expect("output present");
        let mut out = [0.0; 8];
        for (o, v) in out.iter_mut().zip(y) {
            *o = v * self.spec.output_scale;
        }
        out
    }

    /// Predicted source-to-target offsets for a pair of patches.
    pub fn forward(&self, i_s: &ImageBuf, i_t: &ImageBuf) -> Result<CornerOffsets> {
        let x = stack(&preprocess(i_s, &self.spec)?, &preprocess(i_t, &self.spec)?);
        if x.len() != self.input_len() {
            return Err(Error::DimensionMismatch(format!(
                "input of {} values for a {}-input model",
                x.len(),
                self.input_len()
            )));
        }
        Ok(CornerOffsets::new(self.forward_raw(&x), self.spec.patch))
    }

    // Backprop of `d loss / d offsets` through the network.
    fn backward(&self, x: &[f64], d_offsets: &[f64; 8], grad: &mut Gradient) {
        let acts = self.activations(x);
        let mut delta: Vec<f64> = d_offsets.iter().map(|d| d * self.spec.output_scale).collect();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let input = &acts[k];
            let g = &mut grad.layers[k];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * l.inputs..(o + 1) * l.inputs];
                row.iter_mut().zip(input).for_each(|(w, v)| *w += d * v);
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; l.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            // tanh'(z) = 1 - a^2 with a the stored activation.
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    /// Bidirectional loss on one example and its parameter gradient.
    pub fn example_grad(&self, ex: &Example) -> (f64, Gradient) {
        let fwd = self.forward_raw(&ex.forward);
        let bwd = self.forward_raw(&ex.backward);
        let (loss, d_fwd, d_bwd) = sup_loss_grad(&fwd, &bwd, &ex.target_fwd, &ex.target_bwd);
        let mut g = Gradient::zeros_like(self);
        self.backward(&ex.forward, &d_fwd, &mut g);
        self.backward(&ex.backward, &d_bwd, &mut g);
        (loss, g)
    }

    /// Mean loss over `examples`.
    pub fn loss(&self, examples: &[Example]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let total: f64 = examples
            .par_iter()
            .map(|ex| {
                let fwd = self.forward_raw(&ex.forward);
                let bwd = self.forward_raw(&ex.backward);
                sup_loss_grad(&fwd, &bwd, &ex.target_fwd, &ex.target_bwd).0
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        total / examples.len() as f64
    }

    /// Flat view of all parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("parameter count matches");
            }
        }
    }
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// One prepared training pair with both regression directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
    pub target_fwd: [f64; 8],
    pub target_bwd: [f64; 8],
}

impl Example {
    /// Builds the example for `(i_s, i_t)` related by source-to-target `h`.
    pub fn new(i_s: &ImageBuf, i_t: &ImageBuf, h: &Homography, spec: &RegressorSpec) -> Result<Self> {
        let a = preprocess(i_s, spec)?;
        let b = preprocess(i_t, spec)?;
        let (ox, oy) = crop_shift(i_s, spec);
        // Express the label in patch coordinates.
        let h_patch = h.shifted(-ox, -oy);
        Ok(Self {
            forward: stack(&a, &b),
            backward: stack(&b, &a),
            target_fwd: homography_to_offsets(&h_patch, spec.patch)?.offsets,
            target_bwd: homography_to_offsets(&h_patch.invert()?, spec.patch)?.offsets,
        })
    }
}

/// Point map of the `k`-th symmetry of an `n x n` pixel grid: an optional
/// mirror in x followed by `k / 2` quarter turns.
fn dihedral(k: usize, n: f64, x: f64, y: f64) -> (f64, f64) {
    let c = n - 1.0;
    let (mut x, mut y) = if k % 2 == 1 { (c - x, y) } else { (x, y) };
    for _ in 0..k / 2 {
        (x, y) = (c - y, x);
    }
    (x, y)
}

fn transform_grid(v: &[f64], side: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for y in 0..side {
        for x in 0..side {
            let (u, w) = dihedral(k, side as f64, x as f64, y as f64);
            out[w as usize * side + u as usize] = v[y * side + x];
        }
    }
    out
}

fn transform_offsets(d: &[f64; 8], frame: Frame, k: usize) -> [f64; 8] {
    let n = frame.width as f64;
    let corners = frame.corners();
    let mut out = [0.0; 8];
    for (i, c) in corners.iter().enumerate() {
        let (mx, my) = dihedral(k, n, c.x, c.y);
        let j = corners
            .iter()
            .position(|q| q.x == mx && q.y == my)
            .expect("grid symmetries permute the corners");
        // Offsets are vectors: apply the linear part only.
        let (ox, oy) = dihedral(k, n, c.x + d[2 * i], c.y + d[2 * i + 1]);
        out[2 * j] = ox - mx;
        out[2 * j + 1] = oy - my;
    }
    out
}

impl Example {
    /// The example seen through every symmetry of the square patch (8 on a
    /// square patch, the identity alone otherwise). Entry 0 is `self`.
    pub fn symmetries(&self, spec: &RegressorSpec) -> Vec<Example> {
        let side = spec.input_side;
        let n = side * side;
        if spec.patch.width != spec.patch.height || self.forward.len() != 2 * n {
            return vec![self.clone()];
        }
        (0..8)
            .map(|k| {
                let a = transform_grid(&self.forward[..n], side, k);
                let b = transform_grid(&self.forward[n..], side, k);
                Example {
                    forward: stack(&a, &b),
                    backward: stack(&b, &a),
                    target_fwd: transform_offsets(&self.target_fwd, spec.patch, k),
                    target_bwd: transform_offsets(&self.target_bwd, spec.patch, k),
                }
            })
            .collect()
    }
}

/// Pixel offset of the patch origin inside `img`.
pub fn crop_shift(img: &ImageBuf, spec: &RegressorSpec) -> (f64, f64) {
    let (ox, oy) = crate::imaging::crop_origin(
        img.width,
        img.height,
        (spec.patch.width as usize).min(img.width),
        (spec.patch.height as usize).min(img.height),
    );
    (ox as f64, oy as f64)
}

/// Per-epoch mean training loss; entry 0 is the loss before any update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<f64>,
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

/// Mini-batch SGD (optional momentum) on the bidirectional corner loss.
///
/// Per-example gradients are computed in parallel and summed in example
/// order, so the result does not depend on the thread count.
pub fn train_regressor(model: &RegressorModel, examples: &[Example], cfg: &TrainConfig) -> Result<(RegressorModel, LossCurve)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no accepted samples to train on".into()));
    }
    if let Some(bad) = examples
        .iter()
        .find(|e| e.forward.len() != model.input_len() || e.backward.len() != model.input_len())
    {
        return Err(Error::DimensionMismatch(format!(
            "example of {} values for a {}-input model",
            bad.forward.len(),
            model.input_len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let expanded: Vec<Example>;
    let examples = if cfg.symmetries {
        expanded = examples.iter().flat_map(|e| e.symmetries(&model.spec)).collect();
        &expanded[..]
    } else {
        examples
    };
    let mut m = model.clone();
    m.train = cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; m.n_params()];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = LossCurve::default();
    let initial = m.loss(examples);
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss(format!("initial regressor loss {initial}")));
    }
    curve.epochs.push(initial);
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, Gradient)> = batch.par_iter().map(|&i| m.example_grad(&examples[i])).collect();
            let mut g = Gradient::zeros_like(&m);
            for (l, part) in &parts {
                epoch_loss += l;
                g.add(part);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut p = m.params();
            for ((w, v), d) in p.iter_mut().zip(&mut velocity).zip(g.flat()) {
                *v = cfg.momentum * *v - cfg.lr * d * scale;
                *w += *v;
            }
            m.set_params(&p);
        }
        let mean = epoch_loss / examples.len() as f64;
        if !mean.is_finite() || !m.is_finite() {
            return Err(Error::NonFiniteLoss(format!("regressor loss {mean} at epoch {epoch}")));
        }
        curve.epochs.push(mean);
    }
    Ok((m, curve))
}
