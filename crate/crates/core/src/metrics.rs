//! Accuracy matrix and the five continual-learning summary metrics.
//!
//! Row 0 of the matrix holds the accuracies of the untrained model, row `i`
//! (for `i >= 1`) the accuracies on every task after training on task `i`.
//! Tasks are numbered from 1 in the formulas below and stored in column
//! `i - 1`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::ModelState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Option<Vec<f64>>>,
    b_bar: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub fm: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub la: f64,
}

fn check_accuracies(op: &'static str, v: &[f64], tasks: usize) -> Result<()> {
    if v.len() != tasks {
        return Err(Error::invalid(op, format!("expected {tasks} accuracies, got {}", v.len())));
    }
    if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(op, format!("accuracy {x} outside [0, 1]")));
    }
    Ok(())
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::invalid("accuracy_matrix", "need at least one task"));
        }
        Ok(Self {
            tasks,
            rows: vec![None; tasks + 1],
            b_bar: None,
        })
    }

    /// Builds a complete matrix from `T + 1` rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, b_bar: Option<Vec<f64>>) -> Result<Self> {
        let tasks = rows.len().checked_sub(1).ok_or_else(|| Error::invalid("accuracy_matrix", "no rows"))?;
        let mut m = Self::new(tasks)?;
        for (i, r) in rows.into_iter().enumerate() {
            m.set_row(i, r)?;
        }
        if let Some(b) = b_bar {
            m.set_b_bar(b)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Rows are written in order and never overwritten.
    pub fn set_row(&mut self, i: usize, row: Vec<f64>) -> Result<()> {
        if i > self.tasks {
            return Err(Error::invalid("set_row", format!("row {i} beyond {} tasks", self.tasks)));
        }
        if self.rows[i].is_some() {
            return Err(Error::invalid("set_row", format!("row {i} already populated")));
        }
        if i > 0 && self.rows[i - 1].is_none() {
            return Err(Error::invalid("set_row", format!("row {i} written before row {}", i - 1)));
        }
        check_accuracies("set_row", &row, self.tasks)?;
        self.rows[i] = Some(row);
        Ok(())
    }

    pub fn set_b_bar(&mut self, b: Vec<f64>) -> Result<()> {
        check_accuracies("set_b_bar", &b, self.tasks)?;
        self.b_bar = Some(b);
        Ok(())
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.rows.get(i).and_then(|r| r.as_deref())
    }

    /// Random-initialisation baseline; row 0 unless set explicitly.
    pub fn b_bar(&self) -> Option<&[f64]> {
        self.b_bar.as_deref().or_else(|| self.row(0))
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(Option::is_some)
    }

    /// `a_{i,j}` with 1-based task `j`.
    fn a(&self, i: usize, j: usize) -> f64 {
        self.rows[i].as_ref().expect("complete matrix")[j - 1]
    }

    /// CSV with header `after_task,task_0,..`, rows `0..=T` and a `b_bar` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task");
        for j in 0..self.tasks {
            let _ = write!(s, ",task_{j}");
        }
        s.push('\n');
        let mut line = |label: String, v: &[f64]| {
            s.push_str(&label);
            for x in v {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        };
        for (i, r) in self.rows.iter().enumerate() {
            if let Some(r) = r {
                line(i.to_string(), r);
            }
        }
        if let Some(b) = &self.b_bar {
            line("b_bar".into(), b);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty accuracy CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"after_task") || cols.len() < 2 {
            return Err(Error::Format(format!("bad accuracy CSV header {header:?}")));
        }
        let mut m = Self::new(cols.len() - 1)?;
        for line in lines {
            let mut fields = line.split(',').map(str::trim);
            let label = fields.next().unwrap_or_default();
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("bad accuracy {f:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if label == "b_bar" {
                m.set_b_bar(values)?;
            } else {
                let i = label
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad row label {label:?}")))?;
                m.set_row(i, values)?;
            }
        }
        Ok(m)
    }
}

pub fn compute_metrics(m: &AccuracyMatrix) -> Result<MetricsReport> {
    if !m.is_complete() {
        return Err(Error::invalid("compute_metrics", "accuracy matrix has unpopulated rows"));
    }
    let t = m.tasks;
    let b = m.b_bar().expect("row 0 present");
    let acc = (1..=t).map(|i| m.a(t, i)).sum::<f64>() / t as f64;
    let la = (1..=t).map(|i| m.a(i, i)).sum::<f64>() / t as f64;
    let (fm, bwt, fwt) = if t == 1 {
        (0.0, 0.0, 0.0)
    } else {
        let d = (t - 1) as f64;
        let fm = (1..t)
            .map(|j| (1..t).map(|l| m.a(l, j)).fold(f64::NEG_INFINITY, f64::max) - m.a(t, j))
            .sum::<f64>()
            / d;
        let bwt = (1..t).map(|i| m.a(t, i) - m.a(i, i)).sum::<f64>() / d;
        let fwt = (1..t).map(|i| m.a(i - 1, i) - b[i - 1]).sum::<f64>() / d;
        (fm, bwt, fwt)
    };
    Ok(MetricsReport { acc, fm, bwt, fwt, la })
}

impl MetricsReport {
    /// Flat JSON object, one key per line.
    pub fn to_text(&self) -> String {
        format!(
            "{{\n  \"acc\": {},\n  \"fm\": {},\n  \"bwt\": {},\n  \"fwt\": {},\n  \"la\": {}\n}}\n",
            self.acc, self.fm, self.bwt, self.fwt, self.la
        )
    }
}

/// Anything that maps an image batch to `[N, K]` logits.
pub trait Classifier {
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

impl Classifier for ModelState {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images, false)?.logits)
    }
}

/// Test split of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Classes the prediction is restricted to; empty means all classes.
    pub classes: Vec<usize>,
}

const EVAL_CHUNK: usize = 256;

/// Index of the largest entry among `allowed` (all when empty); ties go to
/// the lowest class index.
pub fn masked_argmax(row: &[f64], allowed: &[usize]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    let mut consider = |k: usize| {
        let v = row[k];
        match best {
            Some((bk, bv)) if v < bv || (v == bv && k > bk) => {}
            _ => best = Some((k, v)),
        }
    };
    if allowed.is_empty() {
        (0..row.len()).for_each(&mut consider);
    } else {
        allowed.iter().copied().for_each(&mut consider);
    }
    best.map(|b| b.0).unwrap_or(0)
}

/// Fraction of correct predictions on each set.
pub fn evaluate_row<M: Classifier + ?Sized>(model: &M, sets: &[EvalSet]) -> Result<Vec<f64>> {
    sets.iter()
        .enumerate()
        .map(|(t, set)| {
            let n = set.labels.len();
            if n == 0 || set.images.shape().first() != Some(&n) {
                return Err(Error::invalid("evaluate_row", format!("test set {t} is empty or malformed")));
            }
            let mut correct = 0usize;
            for start in (0..n).step_by(EVAL_CHUNK) {
                let end = (start + EVAL_CHUNK).min(n);
                let logits = model.logits(&set.images.rows(start, end)?)?;
                let k = logits.shape()[1];
                for (row, &y) in logits.data().chunks(k).zip(&set.labels[start..end]) {
                    correct += usize::from(masked_argmax(row, &set.classes) == y);
                }
            }
            Ok(correct as f64 / n as f64)
        })
        .collect()
}
