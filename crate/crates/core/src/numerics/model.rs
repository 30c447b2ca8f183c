//! Two fixed softmax classifiers with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::rng::{Purpose, RngStream};
use super::{Batch, Dataset, GradTensor, NumericsError, TensorSpec};

/// Model architecture tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Multinomial logistic regression: `softmax(W x + b)`.
    LinearSoftmax,
    /// One tanh hidden layer: `softmax(W2 tanh(W1 x + b1) + b2)`.
    MlpOneHidden { hidden: usize },
}

/// A classifier and its parameter tensors, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    input_dim: usize,
    classes: usize,
    params: Vec<GradTensor>,
}

impl Model {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture, input_dim: usize, classes: usize) -> Self {
        let params = layout(arch, input_dim, classes)
            .into_iter()
            .map(|s| GradTensor::zeros(s.name, s.shape))
            .collect();
        Self {
            arch,
            input_dim,
            classes,
            params,
        }
    }

    /// Seeded initialization. Weights are Glorot-uniform, biases zero; the
    /// linear model starts at zero, which is the usual choice for logistic
    /// regression. The same seed always gives the same parameters.
    pub fn init(arch: Architecture, input_dim: usize, classes: usize, seed: u64) -> Self {
        let mut model = Self::zeros(arch, input_dim, classes);
        if matches!(arch, Architecture::LinearSoftmax) {
            return model;
        }
        let streams = RngStream::new(seed);
        for p in model.params.iter_mut() {
            if p.shape().len() != 2 {
                continue;
            }
            let (fan_out, fan_in) = (p.shape()[0], p.shape()[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bound");
            let mut rng = streams.sequential(Purpose::Init, p.name());
            for v in p.values_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        model
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[GradTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [GradTensor] {
        &mut self.params
    }

    /// Names and shapes of the parameters in canonical order.
    pub fn layout(&self) -> Vec<TensorSpec> {
        self.params.iter().map(TensorSpec::from).collect()
    }

    /// Replaces the parameters; the new set must match the layout exactly.
    pub fn set_params(&mut self, params: Vec<GradTensor>) -> Result<(), NumericsError> {
        check_layout(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    /// Copy of this model evaluated at other parameters (e.g. an EMA shadow).
    pub fn with_params(&self, params: Vec<GradTensor>) -> Result<Self, NumericsError> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    /// Mean cross-entropy loss and its gradient for every parameter.
    pub fn forward_backward(&self, batch: &Batch) -> Result<(f64, Vec<GradTensor>), NumericsError> {
        self.check_batch(batch)?;
        let rows = batch.rows();
        let inv_rows = 1.0 / rows as f64;
        let mut acc: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut loss = 0.0f64;

        match self.arch {
            Architecture::LinearSoftmax => {
                let (w, b) = (self.params[0].values(), self.params[1].values());
                let mut logits = vec![0.0f64; self.classes];
                for r in 0..rows {
                    let x = batch.row(r);
                    affine(w, b, x, &mut logits);
                    let y = batch.labels()[r];
                    loss += softmax_xent_grad(&mut logits, y);
                    let (gw, rest) = acc.split_at_mut(1);
                    for (c, &dz) in logits.iter().enumerate() {
                        let dz = dz * inv_rows;
                        let row = &mut gw[0][c * self.input_dim..(c + 1) * self.input_dim];
                        for (g, &xi) in row.iter_mut().zip(x) {
                            *g += dz * xi as f64;
                        }
                        rest[0][c] += dz;
                    }
                }
            }
            Architecture::MlpOneHidden { hidden } => {
                let w1 = self.params[0].values();
                let b1 = self.params[1].values();
                let w2 = self.params[2].values();
                let b2 = self.params[3].values();
                let mut pre = vec![0.0f64; hidden];
                let mut h = vec![0.0f32; hidden];
                let mut logits = vec![0.0f64; self.classes];
                let mut dh = vec![0.0f64; hidden];
                for r in 0..rows {
                    let x = batch.row(r);
                    affine(w1, b1, x, &mut pre);
                    for (hk, &p) in h.iter_mut().zip(&pre) {
                        *hk = p.tanh() as f32;
                    }
                    affine(w2, b2, &h, &mut logits);
                    loss += softmax_xent_grad(&mut logits, batch.labels()[r]);

                    dh.iter_mut().for_each(|v| *v = 0.0);
                    for (c, &dz) in logits.iter().enumerate() {
                        let dz = dz * inv_rows;
                        let w2_row = &w2[c * hidden..(c + 1) * hidden];
                        let g_row = &mut acc[2][c * hidden..(c + 1) * hidden];
                        for k in 0..hidden {
                            g_row[k] += dz * h[k] as f64;
                            dh[k] += dz * w2_row[k] as f64;
                        }
                        acc[3][c] += dz;
                    }
                    for k in 0..hidden {
                        let hk = h[k] as f64;
                        let da = dh[k] * (1.0 - hk * hk);
                        let g_row = &mut acc[0][k * self.input_dim..(k + 1) * self.input_dim];
                        for (g, &xi) in g_row.iter_mut().zip(x) {
                            *g += da * xi as f64;
                        }
                        acc[1][k] += da;
                    }
                }
            }
        }

        let grads = self
            .params
            .iter()
            .zip(acc)
            .map(|(p, g)| {
                GradTensor::new(
                    p.name(),
                    p.shape().to_vec(),
                    g.into_iter().map(|v| v as f32).collect(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((loss * inv_rows, grads))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64, NumericsError> {
        self.check_batch(batch)?;
        let mut total = 0.0;
        for r in 0..batch.rows() {
            let mut logits = self.logits(batch.row(r));
            total += softmax_xent_grad(&mut logits, batch.labels()[r]);
        }
        Ok(total * (1.0 / batch.rows() as f64))
    }

    /// Argmax class per row.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>, NumericsError> {
        self.check_batch(batch)?;
        Ok((0..batch.rows())
            .map(|r| argmax(&self.logits(batch.row(r))))
            .collect())
    }

    /// Fraction of correctly classified samples in `data`.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64, NumericsError> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let batch = data.full_batch();
        let correct = self
            .predict(&batch)?
            .iter()
            .zip(batch.labels())
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut logits = vec![0.0f64; self.classes];
        match self.arch {
            Architecture::LinearSoftmax => {
                affine(self.params[0].values(), self.params[1].values(), x, &mut logits)
            }
            Architecture::MlpOneHidden { hidden } => {
                let mut pre = vec![0.0f64; hidden];
                affine(self.params[0].values(), self.params[1].values(), x, &mut pre);
                let h: Vec<f32> = pre.iter().map(|p| p.tanh() as f32).collect();
                affine(self.params[2].values(), self.params[3].values(), &h, &mut logits);
            }
        }
        logits
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), NumericsError> {
        if batch.cols() != self.input_dim {
            return Err(NumericsError::Shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.input_dim
            )));
        }
        if let Some(&y) = batch.labels().iter().find(|&&y| y >= self.classes) {
            return Err(NumericsError::Shape(format!(
                "label {y} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Parameter names and shapes for an architecture, in canonical order.
pub fn layout(arch: Architecture, input_dim: usize, classes: usize) -> Vec<TensorSpec> {
    let spec = |name: &str, shape: Vec<usize>| TensorSpec {
        name: name.to_string(),
        shape,
    };
    match arch {
        Architecture::LinearSoftmax => vec![
            spec("fc.weight", vec![classes, input_dim]),
            spec("fc.bias", vec![classes]),
        ],
        Architecture::MlpOneHidden { hidden } => vec![
            spec("fc1.weight", vec![hidden, input_dim]),
            spec("fc1.bias", vec![hidden]),
            spec("fc2.weight", vec![classes, hidden]),
            spec("fc2.bias", vec![classes]),
        ],
    }
}

fn check_layout(current: &[GradTensor], new: &[GradTensor]) -> Result<(), NumericsError> {
    if current.len() != new.len() {
        return Err(NumericsError::Shape(format!(
            "expected {} parameter tensors, got {}",
            current.len(),
            new.len()
        )));
    }
    for (a, b) in current.iter().zip(new) {
        if a.name() != b.name() || a.shape() != b.shape() {
            return Err(NumericsError::Shape(format!(
                "parameter {} {:?} does not match {} {:?}",
                a.name(),
                a.shape(),
                b.name(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// `out = W x + b` with f64 accumulation; `W` is `out.len() x x.len()`.
fn affine(w: &[f32], b: &[f32], x: &[f32], out: &mut [f64]) {
    let cols = x.len();
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(cols).zip(b)) {
        *o = bias as f64
            + row
                .iter()
                .zip(x)
                .map(|(&wi, &xi)| wi as f64 * xi as f64)
                .sum::<f64>();
    }
}

/// Replaces `logits` with `softmax(logits) - onehot(label)` and returns the
/// cross-entropy. Stabilized by subtracting the row max.
fn softmax_xent_grad(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    logits[label] -= 1.0;
    (sum.ln() - shifted_label).max(0.0)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Random batch and parameters for gradient checks and tests.
pub fn random_batch<R: Rng>(rng: &mut R, rows: usize, cols: usize, classes: usize) -> Batch {
    let inputs = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, cols, labels).expect("consistent dimensions")
}
