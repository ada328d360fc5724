//! Labelled datasets, the task split and the single-pass batch stream.
//!
//! Raw dataset files (`MMDS`) are little-endian:
//!
//! ```text
//! "MMDS" | u16 version | u32 N | u32 C | u32 H | u32 W | u32 K
//!        | N x u16 class index | N*C*H*W x f32 pixel in [0, 1]
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::{one_hot, Batch, BatchRole, ExampleRef};
use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::metrics::EvalSet;
use crate::rng_stream;
use crate::tensor::Tensor;

pub const MMDS_MAGIC: &[u8; 4] = b"MMDS";
pub const MMDS_VERSION: u16 = 1;
pub const DEFAULT_NOISE: f64 = 0.3;
/// Peak height of a class template above the background level.
pub const TEMPLATE_CONTRAST: f64 = 0.5;
const TEMPLATE_BACKGROUND: f64 = 0.25;

const SPLIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    /// `N * C * H * W` pixels, example-major.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(image_shape: [usize; 3], num_classes: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let d: usize = image_shape.iter().product();
        if d == 0 || pixels.len() != labels.len() * d {
            return Err(Error::invalid("dataset", format!("{} pixels for {} examples", pixels.len(), labels.len())));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid("dataset", format!("label {y} outside {num_classes} classes")));
        }
        Ok(Self {
            image_shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// `[n, C, H, W]` tensor of the listed examples.
    pub fn images_of(&self, indices: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.image_shape;
        let data = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MMDS_MAGIC);
        w.u16(MMDS_VERSION);
        w.u32(self.len() as u32);
        for d in self.image_shape {
            w.u32(d as u32);
        }
        w.u32(self.num_classes as u32);
        self.labels.iter().for_each(|&y| w.u16(y as u16));
        self.pixels.iter().for_each(|&p| w.f32(p as f32));
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MMDS_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != MMDS_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = r.u32()? as usize;
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let k = r.u32()? as usize;
        let d = shape.iter().product::<usize>();
        let expected = n
            .checked_mul(d)
            .and_then(|p| p.checked_mul(4))
            .and_then(|p| p.checked_add(2 * n))
            .ok_or_else(|| Error::Format("dataset header overflows".into()))?;
        if bytes.len() - 26 != expected {
            return Err(Error::Format(format!(
                "dataset body is {} bytes, header implies {expected}",
                bytes.len() - 26
            )));
        }
        let labels = (0..n).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
        let mut pixels = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            let p = r.f32()?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Format(format!("pixel {p} outside [0, 1]")));
            }
            pixels.push(f64::from(p));
        }
        Self::new(shape, k, pixels, labels).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Seeded synthetic classes: each class is a fixed template of Gaussian
/// blobs, and every example adds pixel noise of standard deviation
/// [`DEFAULT_NOISE`], clipped to `[0, 1]`.
pub fn synth_dataset(classes: usize, per_class: usize, image_shape: [usize; 3], seed: u64) -> Result<LabeledDataset> {
    synth_dataset_with_noise(classes, per_class, image_shape, seed, DEFAULT_NOISE)
}

pub fn synth_dataset_with_noise(
    classes: usize,
    per_class: usize,
    image_shape: [usize; 3],
    seed: u64,
    noise: f64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::invalid("synth_dataset", "need at least two classes"));
    }
    if !(noise >= 0.0) {
        return Err(Error::invalid("synth_dataset", format!("noise {noise} must be non-negative")));
    }
    let [c, h, w] = image_shape;
    let d = c * h * w;
    if d == 0 {
        return Err(Error::invalid("synth_dataset", "image extents must be positive"));
    }
    let mut rng = rng_stream(seed, 0);
    let templates: Vec<Vec<f64>> = (0..classes).map(|_| blob_template(image_shape, &mut rng)).collect();
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid("synth_dataset", e.to_string()))?;
    let mut pixels = Vec::with_capacity(classes * per_class * d);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            pixels.extend(template.iter().map(|t| (t + normal.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    LabeledDataset::new(image_shape, classes, pixels, labels)
}

fn blob_template<R: Rng>(shape: [usize; 3], rng: &mut R) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let blobs: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                let cy = rng.random::<f64>() * h as f64;
                let cx = rng.random::<f64>() * w as f64;
                let s = 0.8 + 1.2 * rng.random::<f64>();
                (cy, cx, s)
            })
            .collect();
        for r in 0..h {
            for col in 0..w {
                let v = blobs
                    .iter()
                    .map(|&(cy, cx, s)| {
                        let d2 = (r as f64 + 0.5 - cy).powi(2) + (col as f64 + 0.5 - cx).powi(2);
                        (-d2 / (2.0 * s * s)).exp()
                    })
                    .fold(0.0, f64::max);
                out[ch * h * w + r * w + col] = TEMPLATE_BACKGROUND + TEMPLATE_CONTRAST * v;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub test_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    /// Dataset indices in stream order.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub dataset: LabeledDataset,
    pub tasks: Vec<Task>,
}

/// Task `t` gets classes `t * cpt .. (t + 1) * cpt`. The seed fixes which
/// examples of each class are held out and the order of the training stream.
pub fn split_tasks(dataset: LabeledDataset, spec: SplitSpec, seed: u64) -> Result<TaskStream> {
    let SplitSpec {
        tasks,
        classes_per_task,
        test_per_class,
    } = spec;
    if tasks == 0 || classes_per_task == 0 {
        return Err(Error::Config("tasks and classes per task must be positive".into()));
    }
    if tasks * classes_per_task > dataset.num_classes {
        return Err(Error::Config(format!(
            "{tasks} tasks x {classes_per_task} classes exceeds {} classes",
            dataset.num_classes
        )));
    }
    let mut by_class = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut split_rng = rng_stream(seed, SPLIT_STREAM);
    let mut order_rng = rng_stream(seed, ORDER_STREAM);
    let mut out = Vec::with_capacity(tasks);
    for id in 0..tasks {
        let classes: Vec<usize> = (id * classes_per_task..(id + 1) * classes_per_task).collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for &c in &classes {
            let mut members = by_class[c].clone();
            if members.len() <= test_per_class {
                return Err(Error::Config(format!(
                    "class {c} has {} examples, need more than {test_per_class}",
                    members.len()
                )));
            }
            members.shuffle(&mut split_rng);
            test.extend_from_slice(&members[..test_per_class]);
            train.extend_from_slice(&members[test_per_class..]);
        }
        train.shuffle(&mut order_rng);
        test.sort_unstable();
        out.push(Task { id, classes, train, test });
    }
    Ok(TaskStream { dataset, tasks: out })
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.dataset.image_shape
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes
    }

    /// Batch of the given dataset indices, labelled one-hot over all classes.
    pub fn batch_of(&self, task: usize, indices: &[usize]) -> Result<Batch> {
        let k = self.num_classes();
        let labels: Vec<Vec<f64>> = indices.iter().map(|&i| one_hot(self.dataset.labels[i], k)).collect();
        Batch::from_examples(
            self.image_shape(),
            k,
            indices.iter().zip(&labels).map(|(&i, y)| ExampleRef {
                image: self.dataset.image(i),
                label: y,
                task,
            }),
            BatchRole::Current,
        )
    }

    /// Single pass over task `t`'s training stream in chunks of `batch_size`.
    pub fn batches(&self, t: usize, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let size = batch_size.max(1);
        self.tasks[t].train.chunks(size).map(move |chunk| self.batch_of(t, chunk))
    }

    /// Per-task test sets with predictions restricted to the task's classes.
    pub fn eval_sets(&self) -> Result<Vec<EvalSet>> {
        self.tasks
            .iter()
            .map(|t| {
                Ok(EvalSet {
                    images: self.dataset.images_of(&t.test)?,
                    labels: t.test.iter().map(|&i| self.dataset.labels[i]).collect(),
                    classes: t.classes.clone(),
                })
            })
            .collect()
    }
}
