//! A small feed-forward classifier used as the attack target.
//!
//! The attack never sees anything in this module directly; it only talks to
//! a [`crate::oracle::NetworkOracle`] wrapped around a trained [`Network`].
//!
//! # Weight file format
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "ZOONET\0\x01"
//! input rank   u32, then one u64 per input dimension
//! classes      u32
//! layer count  u32
//! layer table  per layer: u8 tag, then
//!                0 dense   u32 out, u32 in
//!                1 conv    u32 kh, u32 kw, u32 cin, u32 cout
//!                2 relu
//!                3 maxpool u32 k
//!                4 flatten
//! payload      f64 parameters in layer order; dense stores its out×in
//!              weight matrix row-major then its bias, conv stores its
//!              kh×kw×cin×cout kernel then its bias
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{read_file, LabeledImage};
use crate::error::{invalid, Error, Result};
use crate::numerics::{argmax, Tensor};

const MAGIC: &[u8; 8] = b"ZOONET\0\x01";

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weights` is `out×in`, `bias` has `out` entries. Expects a rank-1 input.
    Dense { weights: Tensor, bias: Tensor },
    /// Valid (unpadded) stride-1 convolution. `kernel` is `kh×kw×cin×cout`.
    Conv2d { kernel: Tensor, bias: Tensor },
    Relu,
    /// Non-overlapping `k×k` max pooling over each channel.
    MaxPool { k: usize },
    Flatten,
}

impl Layer {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::ShapeMismatch {
            expected: self.expected_input(),
            actual: input.to_vec(),
        };
        match self {
            Layer::Dense { weights, .. } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                if input != [inp] {
                    return Err(mismatch());
                }
                Ok(vec![out])
            }
            Layer::Conv2d { kernel, .. } => {
                let ks = kernel.shape();
                match *input {
                    [h, w, c] if c == ks[2] && h >= ks[0] && w >= ks[1] => {
                        Ok(vec![h - ks[0] + 1, w - ks[1] + 1, ks[3]])
                    }
                    _ => Err(mismatch()),
                }
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { k } => match *input {
                [h, w, c] => Ok(vec![h.div_ceil(*k), w.div_ceil(*k), c]),
                _ => Err(mismatch()),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn expected_input(&self) -> Vec<usize> {
        match self {
            Layer::Dense { weights, .. } => vec![weights.shape()[1]],
            Layer::Conv2d { kernel, .. } => vec![kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]],
            _ => vec![],
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Dense { weights, bias } => weights.len() + bias.len(),
            Layer::Conv2d { kernel, bias } => kernel.len() + bias.len(),
            _ => 0,
        }
    }
}

/// Feed-forward network producing `num_classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

impl Network {
    /// Validates that consecutive layer shapes compose and that the final
    /// layer yields `num_classes` logits.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        for layer in &layers {
            match layer {
                Layer::Dense { weights, bias } => {
                    if weights.shape().len() != 2 || bias.shape() != [weights.shape()[0]] {
                        return Err(Error::InvalidShape(weights.shape().to_vec()));
                    }
                }
                Layer::Conv2d { kernel, bias } => {
                    if kernel.shape().len() != 4 || bias.shape() != [kernel.shape()[3]] {
                        return Err(Error::InvalidShape(kernel.shape().to_vec()));
                    }
                }
                Layer::MaxPool { k } if *k == 0 => return Err(invalid("max-pool kernel must be ≥ 1")),
                _ => {}
            }
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape != [num_classes] {
            return Err(invalid(format!(
                "network ends in shape {shape:?}, expected [{num_classes}] logits"
            )));
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
        })
    }

    /// `flatten → (dense → relu)* → dense` with Xavier-uniform weights and
    /// zero biases.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![Layer::Flatten];
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            layers.push(xavier_dense(&mut rng, width, h));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(xavier_dense(&mut rng, width, num_classes));
        Self::new(input_shape.to_vec(), layers, num_classes)
    }

    /// `conv k×k → relu → maxpool → flatten → dense hidden → relu → dense`.
    pub fn conv_mlp(
        input_shape: &[usize],
        kernel: usize,
        filters: usize,
        pool: usize,
        hidden: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = *input_shape.last().ok_or_else(|| invalid("empty input shape"))?;
        let fan_in = kernel * kernel * cin;
        let fan_out = kernel * kernel * filters;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let kdata = (0..kernel * kernel * cin * filters)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        let conv = Layer::Conv2d {
            kernel: Tensor::new(vec![kernel, kernel, cin, filters], kdata)?,
            bias: Tensor::zeros(&[filters]),
        };
        let mut shape = conv.output_shape(input_shape)?;
        let pool_layer = Layer::MaxPool { k: pool };
        shape = pool_layer.output_shape(&shape)?;
        let flat: usize = shape.iter().product();
        let layers = vec![
            conv,
            Layer::Relu,
            pool_layer,
            Layer::Flatten,
            xavier_dense(&mut rng, flat, hidden),
            Layer::Relu,
            xavier_dense(&mut rng, hidden, num_classes),
        ];
        Self::new(input_shape.to_vec(), layers, num_classes)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Logits `Z(x)`.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.forward_from(0, x.clone()))
    }

    /// Runs layers `start..` on an activation already shaped for `start`.
    fn forward_from(&self, start: usize, mut act: Tensor) -> Tensor {
        for layer in &self.layers[start..] {
            act = apply(layer, &act, None);
        }
        act
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.forward_logits(x)?.data()).unwrap_or(0))
    }

    /// The leading dense layer when everything before it is a flatten.
    /// Single-pixel changes then only touch one weight column, which lets
    /// [`SparseFront`] evaluate nearby inputs without a full matrix product.
    pub fn sparse_front(&self) -> Option<SparseFront> {
        let idx = self.layers.iter().position(|l| !matches!(l, Layer::Flatten))?;
        let Layer::Dense { weights, bias } = &self.layers[idx] else {
            return None;
        };
        let (out, inp) = (weights.shape()[0], weights.shape()[1]);
        let w = weights.data();
        let mut columns = vec![0.0; out * inp];
        for o in 0..out {
            for i in 0..inp {
                columns[i * out + o] = w[o * inp + i];
            }
        }
        Some(SparseFront {
            layer: idx,
            out,
            columns,
            bias: bias.data().to_vec(),
            weights: w.to_vec(),
        })
    }

    /// Writes the documented little-endian weight container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend((self.input_shape.len() as u32).to_le_bytes());
        for &d in &self.input_shape {
            out.extend((d as u64).to_le_bytes());
        }
        out.extend((self.num_classes as u32).to_le_bytes());
        out.extend((self.layers.len() as u32).to_le_bytes());
        let u32s = |out: &mut Vec<u8>, vals: &[usize]| {
            for &v in vals {
                out.extend((v as u32).to_le_bytes());
            }
        };
        for layer in &self.layers {
            match layer {
                Layer::Dense { weights, .. } => {
                    out.push(0);
                    u32s(&mut out, weights.shape());
                }
                Layer::Conv2d { kernel, .. } => {
                    out.push(1);
                    u32s(&mut out, kernel.shape());
                }
                Layer::Relu => out.push(2),
                Layer::MaxPool { k } => {
                    out.push(3);
                    u32s(&mut out, &[*k]);
                }
                Layer::Flatten => out.push(4),
            }
        }
        for layer in &self.layers {
            let (a, b) = match layer {
                Layer::Dense { weights, bias } => (weights, bias),
                Layer::Conv2d { kernel, bias } => (kernel, bias),
                _ => continue,
            };
            for v in a.data().iter().chain(b.data()) {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a network weight file".into()));
        }
        let rank = r.u32()? as usize;
        let input_shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let classes = r.u32()? as usize;
        let count = r.u32()? as usize;
        enum Spec {
            Dense(usize, usize),
            Conv([usize; 4]),
            Relu,
            Pool(usize),
            Flatten,
        }
        let mut specs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            specs.push(match r.take(1)?[0] {
                0 => Spec::Dense(r.u32()? as usize, r.u32()? as usize),
                1 => Spec::Conv([r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize]),
                2 => Spec::Relu,
                3 => Spec::Pool(r.u32()? as usize),
                4 => Spec::Flatten,
                t => return Err(Error::Format(format!("unknown layer tag {t}"))),
            });
        }
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            layers.push(match spec {
                Spec::Dense(o, i) => Layer::Dense {
                    weights: Tensor::new(vec![o, i], r.f64s(o * i)?)?,
                    bias: Tensor::new(vec![o], r.f64s(o)?)?,
                },
                Spec::Conv(s) => Layer::Conv2d {
                    kernel: Tensor::new(s.to_vec(), r.f64s(s.iter().product())?)?,
                    bias: Tensor::new(vec![s[3]], r.f64s(s[3])?)?,
                },
                Spec::Relu => Layer::Relu,
                Spec::Pool(k) => Layer::MaxPool { k },
                Spec::Flatten => Layer::Flatten,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Self::new(input_shape, layers, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::UnexpectedEof)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::UnexpectedEof)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(Error::UnexpectedEof)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn xavier_dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Layer {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Layer::Dense {
        weights: Tensor::new(vec![fan_out, fan_in], w).expect("dense shape"),
        bias: Tensor::zeros(&[fan_out]),
    }
}

/// Applies one layer. `pool_argmax`, when given, records which input each
/// max-pool output came from.
fn apply(layer: &Layer, x: &Tensor, pool_argmax: Option<&mut Vec<usize>>) -> Tensor {
    match layer {
        Layer::Dense { weights, bias } => {
            let (out, inp) = (weights.shape()[0], weights.shape()[1]);
            let w = weights.data();
            let xs = x.data();
            let y = (0..out)
                .map(|o| bias.data()[o] + dot(&w[o * inp..(o + 1) * inp], xs))
                .collect();
            Tensor::new(vec![out], y).expect("dense output")
        }
        Layer::Conv2d { kernel, bias } => conv_forward(kernel, bias, x),
        Layer::Relu => x.map(|v| v.max(0.0)),
        Layer::MaxPool { k } => {
            let (h, w, c) = x.dims3().expect("validated shape");
            let (oh, ow) = (h.div_ceil(*k), w.div_ceil(*k));
            let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
            let mut arg = vec![0usize; oh * ow * c];
            let xs = x.data();
            for yy in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let src = (yy * w + xx) * c + ch;
                        let dst = ((yy / k) * ow + xx / k) * c + ch;
                        if xs[src] > out[dst] {
                            out[dst] = xs[src];
                            arg[dst] = src;
                        }
                    }
                }
            }
            if let Some(slot) = pool_argmax {
                *slot = arg;
            }
            Tensor::new(vec![oh, ow, c], out).expect("pool output")
        }
        Layer::Flatten => Tensor::new(vec![x.len()], x.data().to_vec()).expect("flatten"),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler pipeline the adds.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_forward(kernel: &Tensor, bias: &Tensor, x: &Tensor) -> Tensor {
    let (h, w, cin) = x.dims3().expect("validated shape");
    let ks = kernel.shape();
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let kd = kernel.data();
    let xs = x.data();
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let cell = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            cell.copy_from_slice(bias.data());
            for ky in 0..kh {
                for kx in 0..kw {
                    for ci in 0..cin {
                        let v = xs[((oy + ky) * w + ox + kx) * cin + ci];
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &kd[((ky * kw + kx) * cin + ci) * cout..][..cout];
                        for (o, kv) in cell.iter_mut().zip(krow) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out).expect("conv output")
}

/// Precomputed leading dense layer for evaluating inputs that differ from a
/// base input in a handful of entries.
#[derive(Debug, Clone)]
pub struct SparseFront {
    layer: usize,
    out: usize,
    /// Weight matrix stored column-major (one contiguous column per input).
    columns: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SparseFront {
    /// Logits for `base` with each change set applied in turn. A change set
    /// lists `(flat index, new value)` pairs; indices must be in range.
    pub fn logits_for_changes(
        &self,
        net: &Network,
        base: &Tensor,
        changes: &[Vec<(usize, f64)>],
    ) -> Result<Vec<Tensor>> {
        net.check_input(base)?;
        let xs = base.data();
        let inp = xs.len();
        let pre: Vec<f64> = (0..self.out)
            .map(|o| self.bias[o] + dot(&self.weights[o * inp..(o + 1) * inp], xs))
            .collect();
        changes
            .iter()
            .map(|set| {
                let mut act = pre.clone();
                for &(idx, value) in set {
                    if idx >= inp {
                        return Err(Error::IndexOutOfRange { index: idx, dim: inp });
                    }
                    let diff = value - xs[idx];
                    if diff != 0.0 {
                        let col = &self.columns[idx * self.out..(idx + 1) * self.out];
                        for (a, w) in act.iter_mut().zip(col) {
                            *a += diff * w;
                        }
                    }
                }
                let act = Tensor::new(vec![self.out], act).expect("front output");
                Ok(net.forward_from(self.layer + 1, act))
            })
            .collect()
    }
}

/// Numerically stable softmax: `exp(z_k - max z) / Σ exp(z_i - max z)`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax`, exact even where the probability itself underflows.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Random translation of each training image by up to this many pixels.
    pub max_shift: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            lr_decay: 1.0,
            max_shift: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy over the training set before any update.
    pub initial_loss: f64,
    /// Mean cross-entropy over the training set after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD on softmax cross-entropy.
pub fn train(net: &Network, data: &[LabeledImage], cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    if data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(invalid("batch size and learning rate must be positive"));
    }
    for s in data {
        net.check_input(&s.image)?;
        if s.label >= net.num_classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: net.num_classes,
            });
        }
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_loss = mean_loss(&net, data);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut grads = zero_grads(&net);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            for &i in batch {
                let sample = &data[i];
                if cfg.max_shift > 0 {
                    let s = cfg.max_shift as i64;
                    let (dy, dx) = (rng.gen_range(-s..=s), rng.gen_range(-s..=s));
                    let shifted = translate(&sample.image, dy, dx);
                    backprop(&net, &shifted, sample.label, &mut grads);
                } else {
                    backprop(&net, &sample.image, sample.label, &mut grads);
                }
            }
            let step = lr / batch.len() as f64;
            apply_grads(&mut net, &grads, step);
        }
        lr *= cfg.lr_decay;
        epoch_losses.push(mean_loss(&net, data));
    }
    Ok((
        net,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

/// Shifts an `H×W×C` image, filling uncovered pixels with 0.
fn translate(img: &Tensor, dy: i64, dx: i64) -> Tensor {
    let Ok((h, w, c)) = img.dims3() else {
        return img.clone();
    };
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w as i64 {
            let sx = x - dx;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let (d, s) = (((y * w as i64 + x) as usize) * c, ((sy * w as i64 + sx) as usize) * c);
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Mean softmax cross-entropy of `net` over `data`.
pub fn mean_loss(net: &Network, data: &[LabeledImage]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|s| {
            let z = net.forward_from(0, s.image.clone());
            -log_softmax(z.data())[s.label]
        })
        .sum();
    total / data.len() as f64
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn accuracy(net: &Network, data: &[LabeledImage]) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("accuracy of an empty dataset"));
    }
    let mut hits = 0usize;
    for s in data {
        if net.predict(&s.image)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

fn zero_grads(net: &Network) -> Vec<Vec<f64>> {
    net.layers.iter().map(|l| vec![0.0; l.param_count()]).collect()
}

fn apply_grads(net: &mut Network, grads: &[Vec<f64>], step: f64) {
    for (layer, g) in net.layers.iter_mut().zip(grads) {
        let (a, b) = match layer {
            Layer::Dense { weights, bias } => (weights, bias),
            Layer::Conv2d { kernel, bias } => (kernel, bias),
            _ => continue,
        };
        let n = a.len();
        for (p, d) in a.data_mut().iter_mut().zip(&g[..n]) {
            *p -= step * d;
        }
        for (p, d) in b.data_mut().iter_mut().zip(&g[n..]) {
            *p -= step * d;
        }
    }
}

/// Adds the gradient of the cross-entropy at `(x, label)` into `grads`
/// (one flat buffer per layer, weights first then bias).
fn backprop(net: &Network, x: &Tensor, label: usize, grads: &mut [Vec<f64>]) -> f64 {
    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); net.layers.len()];
    acts.push(x.clone());
    for (i, layer) in net.layers.iter().enumerate() {
        let next = apply(layer, acts.last().expect("input"), Some(&mut pools[i]));
        acts.push(next);
    }
    let logits = acts.last().expect("logits").data();
    let probs = softmax(logits);
    let loss = -log_softmax(logits)[label];
    let mut delta: Vec<f64> = probs;
    delta[label] -= 1.0;

    // Earliest layer that owns parameters; no input gradient needed before it.
    let first_param = net.layers.iter().position(|l| l.param_count() > 0).unwrap_or(0);
    for i in (0..net.layers.len()).rev() {
        let input = &acts[i];
        let need_input_grad = i > first_param;
        delta = match &net.layers[i] {
            Layer::Dense { weights, .. } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                let w = weights.data();
                let xs = input.data();
                let g = &mut grads[i];
                for o in 0..out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (gw, xv) in g[o * inp..(o + 1) * inp].iter_mut().zip(xs) {
                            *gw += d * xv;
                        }
                    }
                    g[out * inp + o] += d;
                }
                if need_input_grad {
                    let mut dx = vec![0.0; inp];
                    for o in 0..out {
                        let d = delta[o];
                        if d != 0.0 {
                            for (dv, wv) in dx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                                *dv += d * wv;
                            }
                        }
                    }
                    dx
                } else {
                    Vec::new()
                }
            }
            Layer::Conv2d { kernel, .. } => {
                conv_backward(kernel, input, &delta, &mut grads[i], need_input_grad)
            }
            Layer::Relu => delta
                .iter()
                .zip(input.data())
                .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                .collect(),
            Layer::MaxPool { .. } => {
                let mut dx = vec![0.0; input.len()];
                for (o, &src) in pools[i].iter().enumerate() {
                    dx[src] += delta[o];
                }
                dx
            }
            Layer::Flatten => delta,
        };
        if !need_input_grad && i <= first_param {
            break;
        }
    }
    loss
}

fn conv_backward(kernel: &Tensor, x: &Tensor, delta: &[f64], g: &mut [f64], need_dx: bool) -> Vec<f64> {
    let (h, w, cin) = x.dims3().expect("validated shape");
    let ks = kernel.shape();
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let kd = kernel.data();
    let xs = x.data();
    let nk = kernel.len();
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    for oy in 0..oh {
        for ox in 0..ow {
            let d = &delta[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for (co, dv) in d.iter().enumerate() {
                g[nk + co] += dv;
            }
            for ky in 0..kh {
                for kx in 0..kw {
                    for ci in 0..cin {
                        let xi = ((oy + ky) * w + ox + kx) * cin + ci;
                        let base = ((ky * kw + kx) * cin + ci) * cout;
                        let v = xs[xi];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            g[base + co] += v * d[co];
                            acc += kd[base + co] * d[co];
                        }
                        if need_dx {
                            dx[xi] += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_dataset;
    use proptest::prelude::*;

    fn dense(out: usize, inp: usize, w: &[f64], b: &[f64]) -> Layer {
        Layer::Dense {
            weights: Tensor::new(vec![out, inp], w.to_vec()).unwrap(),
            bias: Tensor::new(vec![out], b.to_vec()).unwrap(),
        }
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = Network::new(
            vec![2, 2, 1],
            vec![Layer::Flatten, dense(3, 4, &[0.0; 12], &[0.0; 3])],
            3,
        )
        .unwrap();
        let z = net.forward_logits(&Tensor::full(&[2, 2, 1], 0.7)).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_and_hand_dense() {
        let id = Network::new(vec![2], vec![dense(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0])], 2).unwrap();
        let z = id.forward_logits(&Tensor::from_slice(&[0.3, 0.7])).unwrap();
        assert_eq!(z.data(), &[0.3, 0.7]);

        let net = Network::new(vec![2], vec![dense(2, 2, &[1.0, 2.0, 3.0, 4.0], &[0.5, -0.5])], 2).unwrap();
        let z = net.forward_logits(&Tensor::from_slice(&[1.0, 1.0])).unwrap();
        assert_eq!(z.data(), &[3.5, 6.5]);
    }

    #[test]
    fn shape_errors() {
        let net = Network::mlp(&[4, 4, 1], &[3], 2, 0).unwrap();
        assert!(matches!(
            net.forward_logits(&Tensor::zeros(&[4, 3, 1])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(Network::new(vec![3], vec![dense(2, 2, &[0.0; 4], &[0.0; 2])], 2).is_err());
        assert!(Network::new(vec![2], vec![dense(2, 2, &[0.0; 4], &[0.0; 2])], 3).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let a = softmax(&[0.3, -1.2]);
        let b = softmax(&[100.3, 98.8]);
        assert!((a[0] - b[0]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_is_stable(z in proptest::collection::vec(-1e3f64..1e3, 2..12)) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }

        #[test]
        fn softmax_shift_invariant(z in proptest::collection::vec(-20.0f64..20.0, 2..6), c in -50.0f64..50.0) {
            let a = softmax(&z);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    /// Central-difference check of backprop on a network with ten parameters.
    #[test]
    fn backprop_matches_finite_differences() {
        let net = Network::new(
            vec![1, 1, 1],
            vec![
                Layer::Flatten,
                dense(2, 1, &[0.7, -0.4], &[0.1, 0.3]),
                Layer::Relu,
                dense(2, 2, &[0.5, -0.3, 0.8, 0.2], &[0.05, -0.1]),
            ],
            2,
        )
        .unwrap();
        assert_eq!(net.param_count(), 10);
        check_gradients(&net, &Tensor::full(&[1, 1, 1], 0.9), 1);
    }

    #[test]
    fn conv_backprop_matches_finite_differences() {
        let mut net = Network::conv_mlp(&[6, 6, 2], 3, 2, 2, 4, 3, 11).unwrap();
        // Zero-initialized biases leave ReLU inputs sitting on the kink.
        for layer in &mut net.layers {
            if let Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } = layer {
                for (i, b) in bias.data_mut().iter_mut().enumerate() {
                    *b = 0.13 + 0.07 * i as f64;
                }
            }
        }
        let x = Tensor::new(vec![6, 6, 2], (0..72).map(|i| ((i * 37) % 17) as f64 / 17.0).collect()).unwrap();
        check_gradients(&net, &x, 2);
    }

    #[allow(clippy::needless_range_loop)]
    fn check_gradients(net: &Network, x: &Tensor, label: usize) {
        let mut grads = zero_grads(net);
        backprop(net, x, label, &mut grads);
        let loss_at = |n: &Network| -log_softmax(n.forward_logits(x).unwrap().data())[label];
        let h = 1e-6;
        for (li, g) in grads.iter().enumerate() {
            for pi in 0..g.len() {
                let bumped = |delta: f64| {
                    let mut n = net.clone();
                    let (a, b) = match &mut n.layers[li] {
                        Layer::Dense { weights, bias } => (weights, bias),
                        Layer::Conv2d { kernel, bias } => (kernel, bias),
                        _ => unreachable!(),
                    };
                    let na = a.len();
                    if pi < na {
                        a.data_mut()[pi] += delta;
                    } else {
                        b.data_mut()[pi - na] += delta;
                    }
                    loss_at(&n)
                };
                let fd = (bumped(h) - bumped(-h)) / (2.0 * h);
                let err = (fd - g[pi]).abs() / fd.abs().max(g[pi].abs()).max(1e-8);
                assert!(err < 1e-5, "layer {li} param {pi}: backprop {} vs fd {fd}", g[pi]);
            }
        }
    }

    #[test]
    fn training_separates_two_classes() {
        let data = synthetic_dataset(3, 200, 8, 2).unwrap();
        let net = Network::mlp(&[8, 8, 1], &[16], 2, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 10,
            learning_rate: 0.1,
            seed: 1,
            ..TrainConfig::default()
        };
        let (trained, report) = train(&net, &data, &cfg).unwrap();
        assert!(accuracy(&trained, &data).unwrap() >= 0.95);
        assert!(report.epoch_losses.last().unwrap() <= &report.initial_loss);

        let (again, _) = train(&net, &data, &cfg).unwrap();
        assert_eq!(trained, again);
    }

    #[test]
    fn zero_epochs_is_identity_and_empty_is_error() {
        let data = synthetic_dataset(3, 10, 8, 2).unwrap();
        let net = Network::mlp(&[8, 8, 1], &[4], 2, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train(&net, &data, &cfg).unwrap().0, net);
        assert!(train(&net, &[], &cfg).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let constant = Network::new(
            vec![2, 2, 1],
            vec![Layer::Flatten, dense(4, 4, &[0.0; 16], &[1.0; 4])],
            4,
        )
        .unwrap();
        let data = synthetic_dataset(0, 40, 2, 4).unwrap();
        assert!((accuracy(&constant, &data).unwrap() - 0.25).abs() < 1e-12);
        assert!(accuracy(&constant, &[]).is_err());
        let one = [crate::dataset::LabeledImage {
            image: Tensor::zeros(&[2, 2, 1]),
            label: 0,
        }];
        assert_eq!(accuracy(&constant, &one).unwrap(), 1.0);
    }

    #[test]
    fn weight_file_round_trip() {
        let net = Network::conv_mlp(&[6, 6, 1], 3, 2, 2, 5, 3, 4).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Network::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Network::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Network::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn sparse_front_matches_full_forward() {
        let net = Network::mlp(&[5, 5, 1], &[7], 3, 9).unwrap();
        let front = net.sparse_front().unwrap();
        let base = Tensor::new(vec![5, 5, 1], (0..25).map(|i| i as f64 / 25.0).collect()).unwrap();
        let changes = vec![vec![], vec![(3, 0.9)], vec![(0, -0.2), (24, 1.3)]];
        let fast = front.logits_for_changes(&net, &base, &changes).unwrap();
        for (set, z) in changes.iter().zip(&fast) {
            let mut x = base.clone();
            for &(i, v) in set {
                x.data_mut()[i] = v;
            }
            let full = net.forward_logits(&x).unwrap();
            for (a, b) in z.data().iter().zip(full.data()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
        assert!(Network::conv_mlp(&[6, 6, 1], 3, 2, 2, 5, 3, 4).unwrap().sparse_front().is_none());
    }
}
