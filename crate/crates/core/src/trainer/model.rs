use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::depe::WeightDecomposition;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::data::Dataset;

/// Weight of a dense layer, either trained directly or through a lookup table.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeight {
    Plain(Matrix),
    Factorized(WeightDecomposition),
}

impl LayerWeight {
    /// The `n × m` weight used by the forward pass.
    pub fn effective(&self) -> Matrix {
        match self {
            LayerWeight::Plain(w) => w.clone(),
            LayerWeight::Factorized(d) => d.reconstruct(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            LayerWeight::Plain(w) => w.dims(),
            LayerWeight::Factorized(d) => d.weight_dims(),
        }
    }

    /// Entries that training updates: all of `W`, or the `r × m` table.
    pub fn trainable_len(&self) -> usize {
        match self {
            LayerWeight::Plain(w) => w.len(),
            LayerWeight::Factorized(d) => d.trainable_len(),
        }
    }

    fn trainable_values(&self) -> &[f64] {
        match self {
            LayerWeight::Plain(w) => w.data(),
            LayerWeight::Factorized(d) => d.table().data(),
        }
    }
}

/// `y = x·W + b`, with `W` of shape `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: LayerWeight,
    pub bias: Vec<f64>,
    pub trainable: bool,
}

/// Gradient of the loss with respect to one layer's effective weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Multi-layer perceptron: ReLU on hidden layers, softmax cross-entropy on
/// the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<DenseLayer>,
}

struct Trace {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix>,
}

impl ToyModel {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let (_, m) = l.weight.dims();
            if l.bias.len() != m {
                return Err(Error::shape(
                    "ToyModel::from_layers",
                    format!("layer {i}: bias {} for {m} outputs", l.bias.len()),
                ));
            }
            if i > 0 && layers[i - 1].weight.dims().1 != l.weight.dims().0 {
                return Err(Error::shape(
                    "ToyModel::from_layers",
                    format!("layer {i} input does not match layer {} output", i - 1),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// MLP with layer widths `dims` (input first), He-normal weights and zero
    /// biases. Deterministic in `seed`.
    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!("invalid layer widths {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (n, m) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / n as f64).sqrt()).expect("positive std");
                DenseLayer {
                    weight: LayerWeight::Plain(Matrix::from_fn(n, m, |_, _| normal.sample(&mut rng))),
                    bias: vec![0.0; m],
                    trainable: true,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Replaces every plain weight by `W0 + D·T` with rank `min(rank, n, m)`.
    pub fn factorize(&self, rank: usize) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let weight = match &l.weight {
                    LayerWeight::Plain(w) => {
                        let r = rank.min(w.rows()).min(w.cols());
                        LayerWeight::Factorized(WeightDecomposition::init(w.clone(), r)?)
                    }
                    f @ LayerWeight::Factorized(_) => f.clone(),
                };
                Ok(DenseLayer {
                    weight,
                    bias: l.bias.clone(),
                    trainable: l.trainable,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    /// Freezes all but the last `k` layers.
    pub fn train_last(&self, k: usize) -> Result<Self> {
        if k > self.layers.len() {
            return Err(Error::Parameter(format!(
                "cannot train the last {k} of {} layers",
                self.layers.len()
            )));
        }
        let mut out = self.clone();
        let cut = out.layers.len() - k;
        for (i, l) in out.layers.iter_mut().enumerate() {
            l.trainable = i >= cut;
        }
        Ok(out)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.dims().0
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.dims().1
    }

    /// Total count of weight and bias entries in the effective model.
    pub fn full_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (n, m) = l.weight.dims();
                n * m + m
            })
            .sum()
    }

    /// Multiply-accumulates of one forward plus backward pass for one sample.
    pub fn macs_per_sample(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| {
                let (n, m) = l.weight.dims();
                3 * (n * m) as u64
            })
            .sum()
    }

    /// Trainable weight entries (tables for factorized layers), in layer order.
    pub fn trainable_weight_len(&self) -> usize {
        self.trainable().map(|l| l.weight.trainable_len()).sum()
    }

    pub fn trainable_bias_len(&self) -> usize {
        self.trainable().map(|l| l.bias.len()).sum()
    }

    /// Length of the flat trainable vector: all weight parts, then all biases.
    pub fn trainable_len(&self) -> usize {
        self.trainable_weight_len() + self.trainable_bias_len()
    }

    fn trainable(&self) -> impl Iterator<Item = &DenseLayer> {
        self.layers.iter().filter(|l| l.trainable)
    }

    /// Flat trainable parameters: weight parts of trainable layers in order,
    /// followed by their biases.
    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for l in self.trainable() {
            out.extend_from_slice(l.weight.trainable_values());
        }
        for l in self.trainable() {
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Maps per-layer effective-weight gradients into the flat trainable
    /// layout. Factorized layers go through `Dᵀ·∂L/∂W`.
    pub fn trainable_gradient(&self, grads: &[LayerGrad]) -> Result<Vec<f64>> {
        if grads.len() != self.layers.len() {
            return Err(Error::shape(
                "trainable_gradient",
                format!("{} gradients for {} layers", grads.len(), self.layers.len()),
            ));
        }
        let mut weights = Vec::with_capacity(self.trainable_weight_len());
        let mut biases = Vec::with_capacity(self.trainable_bias_len());
        for (l, g) in self.layers.iter().zip(grads) {
            if !l.trainable {
                continue;
            }
            match &l.weight {
                LayerWeight::Plain(_) => weights.extend_from_slice(g.weight.data()),
                LayerWeight::Factorized(d) => {
                    weights.extend_from_slice(d.table_gradient(&g.weight)?.data())
                }
            }
            biases.extend_from_slice(&g.bias);
        }
        weights.extend(biases);
        Ok(weights)
    }

    /// `θ ← θ − lr·g` over the flat trainable layout.
    pub fn apply_update(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.trainable_len() {
            return Err(Error::shape(
                "apply_update",
                format!("update of {} for {} parameters", grad.len(), self.trainable_len()),
            ));
        }
        let mut w_off = 0;
        let mut b_off = self.trainable_weight_len();
        for l in self.layers.iter_mut().filter(|l| l.trainable) {
            let wl = l.weight.trainable_len();
            let gw = &grad[w_off..w_off + wl];
            match &mut l.weight {
                LayerWeight::Plain(w) => {
                    let g = Matrix::new(w.rows(), w.cols(), gw.to_vec())?;
                    w.sub_scaled_assign(&g, lr)?;
                }
                LayerWeight::Factorized(d) => {
                    let (r, m) = d.table().dims();
                    d.apply_table_update(&Matrix::new(r, m, gw.to_vec())?, lr)?;
                }
            }
            w_off += wl;
            let gb = &grad[b_off..b_off + l.bias.len()];
            if l.bias.iter().zip(gb).any(|(b, g)| !(b - lr * g).is_finite()) {
                return Err(Error::Numerical("bias update produced a non-finite entry".into()));
            }
            for (b, g) in l.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
            b_off += l.bias.len();
        }
        Ok(())
    }

    fn forward_trace(&self, x: &Matrix) -> Result<(Matrix, Trace)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let w = l.weight.effective();
            let z = add_bias(&a.matmul(&w)?, &l.bias)?;
            inputs.push(a);
            let last = i + 1 == self.layers.len();
            a = if last { z.clone() } else { relu(&z) };
            pre.push(z);
        }
        Ok((a, Trace { inputs, pre }))
    }

    /// Logits for a `batch × input_dim` feature matrix.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.0)
    }

    /// Mean cross-entropy and its gradient with respect to every layer's
    /// effective weight and bias.
    pub fn loss_and_gradients(&self, x: &Matrix, labels: &[u32]) -> Result<(f64, Vec<LayerGrad>)> {
        if x.rows() != labels.len() || x.rows() == 0 {
            return Err(Error::shape(
                "loss_and_gradients",
                format!("{} samples, {} labels", x.rows(), labels.len()),
            ));
        }
        let (logits, trace) = self.forward_trace(x)?;
        let (loss, mut dz) = softmax_cross_entropy(&logits, labels)?;
        let mut grads = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let input = &trace.inputs[i];
            let weight = input.transpose_matmul(&dz)?;
            let bias = (0..dz.cols())
                .map(|c| (0..dz.rows()).map(|r| dz.get(r, c)).sum())
                .collect();
            if i > 0 {
                let w = self.layers[i].weight.effective();
                let da = dz.matmul(&w.transpose())?;
                let z_prev = &trace.pre[i - 1];
                dz = Matrix::from_fn(da.rows(), da.cols(), |r, c| {
                    if z_prev.get(r, c) > 0.0 {
                        da.get(r, c)
                    } else {
                        0.0
                    }
                });
            }
            grads[i] = Some(LayerGrad { weight, bias });
        }
        Ok((loss, grads.into_iter().map(|g| g.expect("every layer visited")).collect()))
    }

    /// Mean loss and accuracy on `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let logits = self.forward(data.features())?;
        let (loss, _) = softmax_cross_entropy(&logits, data.labels())?;
        let correct = (0..logits.rows())
            .filter(|&r| argmax(logits.row(r)) == data.labels()[r] as usize)
            .count();
        Ok((loss, correct as f64 / logits.rows() as f64))
    }
}

fn add_bias(z: &Matrix, bias: &[f64]) -> Result<Matrix> {
    let data = z
        .data()
        .chunks_exact(z.cols())
        .flat_map(|row| row.iter().zip(bias).map(|(v, b)| v + b))
        .collect();
    Matrix::new(z.rows(), z.cols(), data)
}

fn relu(z: &Matrix) -> Matrix {
    Matrix::from_fn(z.rows(), z.cols(), |r, c| z.get(r, c).max(0.0))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Mean cross-entropy of `logits` and `∂loss/∂logits = (softmax − onehot)/B`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[u32]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.dims();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * c);
    for (r, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= c {
            return Err(Error::Parameter(format!("label {y} outside {c} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - row[y];
        for (k, v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad.push((p - onehot) / b as f64);
        }
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss over a batch of {b} (max |logit| {})",
            logits.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        )));
    }
    Ok((loss, Matrix::new(b, c, grad)?))
}
