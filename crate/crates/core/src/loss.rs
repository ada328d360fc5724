//! Training objective: soft-label cross-entropy plus weighted distillation.

use crate::batch::Batch;
use crate::distill::{multiscale_kd_loss, KdConfig, TeacherTargets};
use crate::error::{Error, Result};
use crate::network::ModelState;
use crate::tensor::{Graph, Tensor, Var};

/// Label rows may deviate from summing to one by at most this much.
pub const LABEL_TOL: f64 = 1e-6;

/// Additive logit offset for classes outside an example's task head.
pub const MASKED_LOGIT: f64 = -1e4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub kd_weight: f64,
}

fn check_labels(logits: &[usize], labels: &Tensor) -> Result<()> {
    if logits.len() != 2 || labels.shape() != logits {
        return Err(Error::shape("cross_entropy", logits, labels.shape()));
    }
    let k = logits[1].max(1);
    for (i, row) in labels.data().chunks(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > LABEL_TOL {
            return Err(Error::invalid("cross_entropy", format!("label row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Mean over rows of `-sum_k y_k log softmax(z)_k`.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let v = cross_entropy_var(&mut g, z, labels)?;
    g.value(v).item()
}

pub fn cross_entropy_var(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<Var> {
    check_labels(g.shape(logits), labels)?;
    let n = labels.shape()[0];
    if n == 0 {
        return Err(Error::invalid("cross_entropy", "empty batch"));
    }
    let logp = g.log_softmax(logits)?;
    let y = g.constant(labels.clone());
    let picked = g.mul(logp, y)?;
    let s = g.sum_all(picked)?;
    g.scale(s, -1.0 / n as f64)
}

/// Loss report and the flat parameter gradient of the total.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub report: LossReport,
    pub grads: Vec<f64>,
}

/// One forward pass of `model` on `batch`. The distillation term is added
/// only when `targets` is given; `logit_mask` is an optional `[N, K]`
/// additive constant applied before the softmax.
pub fn total_loss_with_targets(
    model: &ModelState,
    batch: &Batch,
    targets: Option<&TeacherTargets>,
    kd_weight: f64,
    logit_mask: Option<&Tensor>,
) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::invalid("total_loss", "empty batch"));
    }
    let mut g = Graph::new();
    let x = g.constant(batch.images.clone());
    let fwd = model.forward_on(&mut g, x, true)?;
    let mut logits = fwd.logits;
    if let Some(mask) = logit_mask {
        let m = g.constant(mask.clone());
        logits = g.add(logits, m)?;
    }
    let ce = cross_entropy_var(&mut g, logits, &batch.labels)?;
    let (total, kd) = match targets {
        Some(t) => {
            let kd = multiscale_kd_loss(&mut g, &fwd.taps, t)?;
            let weighted = g.scale(kd, kd_weight)?;
            (g.add(ce, weighted)?, g.value(kd).item()?)
        }
        None => (ce, 0.0),
    };
    let report = LossReport {
        total: g.value(total).item()?,
        ce: g.value(ce).item()?,
        kd,
        kd_weight,
    };
    let grads = g.backward(total)?;
    Ok(LossEval {
        report,
        grads: model.flatten_grads(&grads, &fwd.params)?,
    })
}

/// Teacher embeddings for `batch`, from a forward pass without gradients.
pub fn teacher_targets(teacher: &ModelState, batch: &Batch, kd: &KdConfig) -> Result<TeacherTargets> {
    let taps = teacher.forward(&batch.images, true)?.taps;
    TeacherTargets::new(&taps, kd)
}

pub fn total_loss(
    model: &ModelState,
    teacher: Option<&ModelState>,
    batch: &Batch,
    kd_weight: f64,
    kd: &KdConfig,
) -> Result<LossEval> {
    let targets = teacher.map(|t| teacher_targets(t, batch, kd)).transpose()?;
    total_loss_with_targets(model, batch, targets.as_ref(), kd_weight, None)
}
