//! Labelled mini-batches with dense soft-label rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABEL_SUM_TOL: f64 = 1e-9;

/// Where a batch came from in the training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchRole {
    Current,
    Memory,
    Augmented,
    Joined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    /// `[N, K]`, each row a probability vector.
    pub labels: Tensor,
    pub task_ids: Vec<usize>,
    pub role: BatchRole,
}

/// Borrowed view of one example.
#[derive(Clone, Copy, Debug)]
pub struct ExampleRef<'a> {
    pub image: &'a [f64],
    pub label: &'a [f64],
    pub task: usize,
}

pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    v
}

impl Batch {
    pub fn new(images: Tensor, labels: Tensor, task_ids: Vec<usize>, role: BatchRole) -> Result<Self> {
        let (is, ls) = (images.shape(), labels.shape());
        if is.len() != 4 || ls.len() != 2 || is[0] != ls[0] || task_ids.len() != is[0] {
            return Err(Error::shape("batch", is, ls));
        }
        for (i, row) in labels.data().chunks(ls[1].max(1)).enumerate().take(ls[0]) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > LABEL_SUM_TOL || row.iter().any(|v| *v < 0.0) {
                return Err(Error::invalid(
                    "batch",
                    format!("label row {i} is not a distribution (sum {sum})"),
                ));
            }
        }
        Ok(Self {
            images,
            labels,
            task_ids,
            role,
        })
    }

    pub fn empty(image_shape: [usize; 3], num_classes: usize, role: BatchRole) -> Self {
        let [c, h, w] = image_shape;
        Self {
            images: Tensor::zeros(&[0, c, h, w]),
            labels: Tensor::zeros(&[0, num_classes]),
            task_ids: Vec::new(),
            role,
        }
    }

    /// Builds a batch from `(image, label, task)` triples.
    pub fn from_examples<'a, I>(image_shape: [usize; 3], num_classes: usize, examples: I, role: BatchRole) -> Result<Self>
    where
        I: IntoIterator<Item = ExampleRef<'a>>,
    {
        let [c, h, w] = image_shape;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut task_ids = Vec::new();
        for ex in examples {
            if ex.image.len() != c * h * w || ex.label.len() != num_classes {
                return Err(Error::invalid("batch", "example does not match batch geometry"));
            }
            images.extend_from_slice(ex.image);
            labels.extend_from_slice(ex.label);
            task_ids.push(ex.task);
        }
        let n = task_ids.len();
        Self::new(
            Tensor::new(vec![n, c, h, w], images)?,
            Tensor::new(vec![n, num_classes], labels)?,
            task_ids,
            role,
        )
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn example(&self, i: usize) -> ExampleRef<'_> {
        let (d, k) = (self.image_len(), self.num_classes());
        ExampleRef {
            image: &self.images.data()[i * d..(i + 1) * d],
            label: &self.labels.data()[i * k..(i + 1) * k],
            task: self.task_ids[i],
        }
    }

    pub fn examples(&self) -> impl Iterator<Item = ExampleRef<'_>> {
        (0..self.len()).map(|i| self.example(i))
    }

    /// Stacks batches in order; all parts must share image shape and class count.
    pub fn join(parts: &[&Batch], role: BatchRole) -> Result<Batch> {
        let first = parts.first().ok_or_else(|| Error::invalid("join", "no batches"))?;
        let (shape, k) = (first.image_shape(), first.num_classes());
        for p in parts {
            if p.image_shape() != shape || p.num_classes() != k {
                return Err(Error::shape("join", first.images.shape(), p.images.shape()));
            }
        }
        let images: Vec<&Tensor> = parts.iter().map(|p| &p.images).collect();
        let labels: Vec<&Tensor> = parts.iter().map(|p| &p.labels).collect();
        Ok(Batch {
            images: Tensor::concat(&images, 0)?,
            labels: Tensor::concat(&labels, 0)?,
            task_ids: parts.iter().flat_map(|p| p.task_ids.iter().copied()).collect(),
            role,
        })
    }
}
