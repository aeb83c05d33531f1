//! Multilayer perceptron with tanh hidden layers and exact backpropagation.
//!
//! Weights are stored `[in x out]` row-major so a batch `x[n x in]` maps to
//! `x * W + b`. The output layer is linear; `cross_entropy` applies the
//! softmax. All gradient routines return gradients for every parameter and,
//! on request, for the input batch itself (used by the attacks).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{affine, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EFATMDL1";

/// One affine layer. `weight` is `[in x out]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![in_dim, out_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("layer_sizes", "network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape().len() != 1 {
                return Err(Error::Shape(format!("layer {i} is not a matrix/vector pair")));
            }
            if l.weight.shape()[1] != l.bias.len() {
                return Err(Error::Shape(format!(
                    "layer {i}: weight has {} outputs, bias has {}",
                    l.weight.shape()[1],
                    l.bias.len()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// All-zero parameters with the given architecture.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].in_dim()];
        sizes.extend(self.layers.iter().map(Dense::out_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter values in checkpoint order: per layer, weights then bias.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| {
            l.weight
                .data()
                .iter()
                .chain(l.bias.data().iter())
                .copied()
        })
    }

    /// Mutable parameter values in the same order as [`MlpParams::values`].
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            let Dense { weight, bias } = l;
            weight.data_mut().iter_mut().chain(bias.data_mut().iter_mut())
        })
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layer_sizes() == other.layer_sizes()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let sizes = self.layer_sizes();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in &sizes {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        for v in self.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an EFATMDL1 checkpoint".into()));
        }
        let count = read_u32(&mut r, "layer count")? as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let sizes = (0..count)
            .map(|_| read_u32(&mut r, "layer size").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        validate_sizes(&sizes).map_err(|e| Error::Format(e.to_string()))?;
        let mut params = MlpParams::zeros(&sizes)?;
        let mut buf = [0u8; 8];
        for v in params.values_mut() {
            read_exact(&mut r, &mut buf, "parameter values")?;
            *v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::Format("checkpoint holds a non-finite value".into()));
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::config(
            "layer_sizes",
            format!("need at least two sizes, got {:?}", layer_sizes),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config(
            "layer_sizes",
            format!("sizes must be positive, got {:?}", layer_sizes),
        ));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases. Identical `(layer_sizes, seed)` gives
/// bitwise-identical parameters.
pub fn init_params(layer_sizes: &[usize], seed: u64) -> Result<MlpParams> {
    validate_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let weights = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
        layers.push(Dense {
            weight: Tensor::from_parts_unchecked(vec![fan_in, fan_out], weights),
            bias: Tensor::zeros(vec![fan_out]),
        });
    }
    Ok(MlpParams { layers })
}

fn check_batch(params: &MlpParams, batch: &Tensor) -> Result<()> {
    if batch.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "batch must be a matrix, got shape {:?}",
            batch.shape()
        )));
    }
    if batch.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch width {} does not match network input {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Runs the network and keeps every layer's output (`acts[0]` is the input).
fn forward_all(params: &MlpParams, batch: &Tensor) -> Vec<Vec<f64>> {
    let n = batch.rows();
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(batch.data().to_vec());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = affine(
            &acts[l],
            n,
            layer.in_dim(),
            layer.weight.data(),
            layer.bias.data(),
        );
        if l != last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    acts
}

/// Raw logits `[n x classes]`.
pub fn forward(params: &MlpParams, batch: &Tensor) -> Result<Tensor> {
    check_batch(params, batch)?;
    let n = batch.rows();
    let mut acts = forward_all(params, batch);
    let logits = acts.pop().expect("at least one layer");
    Ok(Tensor::from_parts_unchecked(
        vec![n, params.num_classes()],
        logits,
    ))
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `-log softmax(z)[y]` with max subtraction.
fn row_loss(z: &[f64], y: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln() - z[y]
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape("logits must be a matrix".into()));
    }
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Data("cross_entropy needs at least one row".into()));
    }
    check_labels(labels, n, logits.cols())?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| row_loss(logits.row(i), y))
        .sum();
    Ok(total / n as f64)
}

/// Parameter gradients (shaped like [`MlpParams`]) plus an optional gradient
/// with respect to the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

/// Weighted loss `sum_i w_i * CE_i` and its exact gradient.
///
/// With `w_i = 1/n` this is the mean cross-entropy; with `w_i = 1` each input
/// row gets the gradient of its own loss, independent of the rest of the batch.
pub fn weighted_loss_and_gradients(
    params: &MlpParams,
    batch: &Tensor,
    labels: &[usize],
    row_weights: &[f64],
    want_input: bool,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch)?;
    let n = batch.rows();
    let classes = params.num_classes();
    check_labels(labels, n, classes)?;
    if row_weights.len() != n {
        return Err(Error::Shape(format!(
            "{} row weights for {} rows",
            row_weights.len(),
            n
        )));
    }

    let acts = forward_all(params, batch);
    let logits = &acts[acts.len() - 1];

    let mut loss = 0.0;
    let mut delta = vec![0.0; n * classes];
    for i in 0..n {
        let z = &logits[i * classes..(i + 1) * classes];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let d = &mut delta[i * classes..(i + 1) * classes];
        let mut sum = 0.0;
        for (dv, &zv) in d.iter_mut().zip(z) {
            *dv = (zv - m).exp();
            sum += *dv;
        }
        let y = labels[i];
        loss += row_weights[i] * (m + sum.ln() - z[y]);
        for (c, dv) in d.iter_mut().enumerate() {
            let p = *dv / sum;
            let target = if c == y { 1.0 } else { 0.0 };
            *dv = row_weights[i] * (p - target);
        }
    }

    let mut grads: Vec<Dense> = Vec::with_capacity(params.layers.len());
    let mut input_grad = None;
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let in_dim = layer.in_dim();
        let out_dim = layer.out_dim();
        let a_prev = &acts[l];

        let mut gw = vec![0.0; in_dim * out_dim];
        let mut gb = vec![0.0; out_dim];
        for i in 0..n {
            let di = &delta[i * out_dim..(i + 1) * out_dim];
            for (g, &dv) in gb.iter_mut().zip(di) {
                *g += dv;
            }
            let ai = &a_prev[i * in_dim..(i + 1) * in_dim];
            for (p, &av) in ai.iter().enumerate() {
                let row = &mut gw[p * out_dim..(p + 1) * out_dim];
                for (g, &dv) in row.iter_mut().zip(di) {
                    *g += av * dv;
                }
            }
        }
        grads.push(Dense {
            weight: Tensor::from_parts_unchecked(vec![in_dim, out_dim], gw),
            bias: Tensor::from_parts_unchecked(vec![out_dim], gb),
        });

        if l > 0 || want_input {
            let w = layer.weight.data();
            let mut d_in = vec![0.0; n * in_dim];
            for i in 0..n {
                let di = &delta[i * out_dim..(i + 1) * out_dim];
                let row = &mut d_in[i * in_dim..(i + 1) * in_dim];
                for (p, r) in row.iter_mut().enumerate() {
                    let wp = &w[p * out_dim..(p + 1) * out_dim];
                    *r = wp.iter().zip(di).map(|(a, b)| a * b).sum();
                }
            }
            if l > 0 {
                for (d, &a) in d_in.iter_mut().zip(a_prev) {
                    *d *= 1.0 - a * a;
                }
                delta = d_in;
            } else {
                input_grad = Some(Tensor::from_parts_unchecked(vec![n, in_dim], d_in));
            }
        }
    }
    grads.reverse();

    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss became {loss}")));
    }
    Ok((
        loss,
        Gradients {
            layers: grads,
            input: input_grad,
        },
    ))
}

/// Gradients of the mean cross-entropy with respect to every parameter and
/// to the input batch.
pub fn backward(params: &MlpParams, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
    let n = batch.rows().max(1);
    let weights = vec![1.0 / n as f64; batch.rows()];
    weighted_loss_and_gradients(params, batch, labels, &weights, true).map(|(_, g)| g)
}

/// Per-row input gradient: row `i` is `d CE_i / d x_i`, unaffected by the
/// other rows of the batch.
pub fn input_gradient(params: &MlpParams, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let weights = vec![1.0; batch.rows()];
    let (_, g) = weighted_loss_and_gradients(params, batch, labels, &weights, true)?;
    Ok(g.input.expect("input gradient requested"))
}

/// `theta <- theta - lr * g`.
pub fn sgd_step(params: &MlpParams, grads: &Gradients, lr: f64) -> Result<MlpParams> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("lr", format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if grads.layers.len() != params.layers.len()
        || params
            .layers
            .iter()
            .zip(&grads.layers)
            .any(|(p, g)| p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape())
    {
        return Err(Error::Shape("gradients do not match parameter shapes".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let mut next = params.clone();
    for (p, g) in next.layers.iter_mut().zip(&grads.layers) {
        for (v, gv) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *v -= lr * gv;
        }
        for (v, gv) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *v -= lr * gv;
        }
    }
    Ok(next)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &MlpParams, batch: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(params, batch)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// Fraction of rows classified correctly. Empty input yields 0.
pub fn accuracy(params: &MlpParams, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.len() != batch.rows() {
        return Err(Error::Shape("label count does not match rows".into()));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(params, batch)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}
