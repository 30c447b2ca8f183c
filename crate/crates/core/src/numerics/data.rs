//! Batches, datasets and deterministic synthetic classification tasks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::rng::{Purpose, RngStream};
use super::NumericsError;

/// A mini-batch: a row-major `rows x cols` input matrix plus class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f32>,
    cols: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f32>, cols: usize, labels: Vec<usize>) -> Result<Self, NumericsError> {
        if labels.is_empty() || cols == 0 {
            return Err(NumericsError::Shape("batch must have at least one row and column".into()));
        }
        if inputs.len() != labels.len() * cols {
            return Err(NumericsError::Shape(format!(
                "{} inputs do not form {} rows of {cols}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            cols,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.inputs[r * self.cols..(r + 1) * self.cols]
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// An in-memory labelled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f32>,
    dim: usize,
    classes: usize,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f32>,
        dim: usize,
        classes: usize,
        labels: Vec<usize>,
    ) -> Result<Self, NumericsError> {
        if dim == 0 || classes == 0 {
            return Err(NumericsError::Shape("dim and classes must be positive".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(NumericsError::Shape(format!(
                "{} inputs do not form {} rows of {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(NumericsError::Shape(format!("label {y} >= {classes} classes")));
        }
        Ok(Self {
            inputs,
            dim,
            classes,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.inputs[r * self.dim..(r + 1) * self.dim]
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: impl IntoIterator<Item = usize>) -> Result<Batch, NumericsError> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in indices {
            if i >= self.len() {
                return Err(NumericsError::Shape(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, self.dim, labels)
    }

    /// All samples as one batch.
    pub fn full_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            cols: self.dim,
            labels: self.labels.clone(),
        }
    }

    /// Splits off the last `tail` samples into a second dataset.
    pub fn split_tail(mut self, tail: usize) -> (Dataset, Dataset) {
        let keep = self.len().saturating_sub(tail);
        let tail_inputs = self.inputs.split_off(keep * self.dim);
        let tail_labels = self.labels.split_off(keep);
        let rest = Dataset {
            inputs: tail_inputs,
            dim: self.dim,
            classes: self.classes,
            labels: tail_labels,
        };
        (self, rest)
    }
}

/// Synthetic task family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Gaussian clusters around random class centers; classes overlap.
    Blobs,
    /// Labels are the argmax of a hidden linear map, with a margin enforced,
    /// so some linear classifier has zero training error.
    LinearSeparable,
}

const BLOB_SPREAD: f32 = 2.0;
const SEPARABLE_MARGIN: f64 = 0.1;

/// Generates `n` samples of dimension `dim` over `classes` classes.
pub fn make_synthetic(
    task: SyntheticTask,
    n: usize,
    dim: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset, NumericsError> {
    if n == 0 || dim == 0 || classes == 0 {
        return Err(NumericsError::Shape("n, dim and classes must be positive".into()));
    }
    let streams = RngStream::new(seed);
    let mut rng = streams.sequential(Purpose::Data, task_label(task));
    let mut normal = move || -> f32 { StandardNormal.sample(&mut rng) };
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);

    match task {
        SyntheticTask::Blobs => {
            let centers: Vec<f32> = (0..classes * dim).map(|_| BLOB_SPREAD * normal()).collect();
            let mut pick = streams.sequential(Purpose::Data, "blobs.labels");
            for _ in 0..n {
                let y = pick.random_range(0..classes);
                let c = &centers[y * dim..(y + 1) * dim];
                inputs.extend(c.iter().map(|&m| m + normal()));
                labels.push(y);
            }
        }
        SyntheticTask::LinearSeparable => {
            let hidden: Vec<f32> = (0..classes * dim).map(|_| normal()).collect();
            let mut x = vec![0.0f32; dim];
            while labels.len() < n {
                x.iter_mut().for_each(|v| *v = normal());
                let (y, margin) = if classes == 1 {
                    (0, f64::INFINITY)
                } else {
                    top_two(&hidden, &x)
                };
                if margin < SEPARABLE_MARGIN {
                    continue;
                }
                inputs.extend_from_slice(&x);
                labels.push(y);
            }
        }
    }
    Dataset::new(inputs, dim, classes, labels)
}

fn task_label(task: SyntheticTask) -> &'static str {
    match task {
        SyntheticTask::Blobs => "blobs",
        SyntheticTask::LinearSeparable => "linear-separable",
    }
}

/// Argmax class of `W x` and the gap to the runner-up score.
fn top_two(w: &[f32], x: &[f32]) -> (usize, f64) {
    let dim = x.len();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for (c, row) in w.chunks_exact(dim).enumerate() {
        let s: f64 = row.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum();
        if s > best.1 {
            second = best.1;
            best = (c, s);
        } else if s > second {
            second = s;
        }
    }
    (best.0, best.1 - second)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(SyntheticTask::Blobs, 1000, 8, 2, 42).unwrap();
        let b = make_synthetic(SyntheticTask::Blobs, 1000, 8, 2, 42).unwrap();
        let bits = |d: &Dataset| d.inputs().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        let c = make_synthetic(SyntheticTask::Blobs, 1000, 8, 2, 43).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn blobs_shape_contract() {
        let d = make_synthetic(SyntheticTask::Blobs, 10, 2, 3, 1).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.dim(), 2);
        assert!(d.labels().iter().all(|&y| y < 3));
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(make_synthetic(SyntheticTask::Blobs, 0, 2, 2, 1).is_err());
        assert!(make_synthetic(SyntheticTask::LinearSeparable, 5, 0, 2, 1).is_err());
        assert!(make_synthetic(SyntheticTask::LinearSeparable, 5, 2, 0, 1).is_err());
    }

    #[test]
    fn split_and_batch() {
        let d = make_synthetic(SyntheticTask::Blobs, 10, 3, 2, 4).unwrap();
        let full = d.clone();
        let (head, tail) = d.split_tail(4);
        assert_eq!((head.len(), tail.len()), (6, 4));
        assert_eq!(tail.row(0), full.row(6));
        let b = full.batch([9, 0]).unwrap();
        assert_eq!(b.row(0), full.row(9));
        assert_eq!(b.labels(), &[full.labels()[9], full.labels()[0]]);
        assert!(full.batch([10]).is_err());
    }
}
