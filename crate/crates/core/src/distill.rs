//! Multi-scale pooled-slice distillation between a model and a frozen teacher.
//!
//! For a feature map region of size `h x w` with `C` channels, the slice
//! embedding stacks the `h` width-pooled rows (mean over columns) on top of
//! the `w` height-pooled columns (mean over rows), giving an `(h + w) x C`
//! matrix. At grid scale `s` the map is cut into `s x s` equal regions, each
//! embedded separately. The loss is the squared Euclidean distance between
//! student and teacher embeddings, summed over regions and scales and
//! averaged over tapped layers (and over the batch).

use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `(H + W) x C` pooled-slice embedding of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceEmbedding {
    pub data: Tensor,
}

/// Region embeddings of one feature map at each configured scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleEmbedding {
    pub layer: usize,
    /// `(s, regions)` with `s * s` regions ordered row-major.
    pub scales: Vec<(usize, Vec<SliceEmbedding>)>,
}

impl MultiScaleEmbedding {
    pub fn region_count(&self) -> usize {
        self.scales.iter().map(|(_, r)| r.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdConfig {
    /// Grid sizes; `1` is the whole map, `2` the four quadrants.
    pub scales: Vec<usize>,
    /// Compare unit-norm embeddings instead of raw ones.
    pub normalize: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2],
            normalize: false,
        }
    }
}

/// Verifies that every tapped map splits evenly at every scale.
pub fn check_scales(tap_shapes: &[[usize; 3]], scales: &[usize]) -> Result<()> {
    if scales.is_empty() || scales.contains(&0) {
        return Err(Error::Config(format!("scales {scales:?} must be non-empty and positive")));
    }
    for (l, &[_, h, w]) in tap_shapes.iter().enumerate() {
        for &s in scales {
            if h % s != 0 || w % s != 0 || h < s || w < s {
                return Err(Error::Config(format!(
                    "tap {l} is {h}x{w}, not divisible into a {s}x{s} grid"
                )));
            }
        }
    }
    Ok(())
}

fn region_bounds(h: usize, w: usize, s: usize, i: usize, j: usize) -> (usize, usize, usize, usize) {
    (i * h / s, (i + 1) * h / s, j * w / s, (j + 1) * w / s)
}

/// Embedding of one `C x H x W` map.
pub fn phi(feature: &Tensor) -> Result<SliceEmbedding> {
    let s = feature.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::invalid("phi", format!("expected a non-empty C x H x W map, got {s:?}")));
    }
    let batched = feature.reshape(&[1, s[0], s[1], s[2]])?;
    let emb = pooled_slices(&batched, false)?; // [1, C, H + W]
    let (c, len) = (s[0], s[1] + s[2]);
    let src = emb.data();
    let mut data = vec![0.0; c * len];
    for ch in 0..c {
        for r in 0..len {
            data[r * c + ch] = src[ch * len + r];
        }
    }
    Ok(SliceEmbedding {
        data: Tensor::new(vec![len, c], data)?,
    })
}

/// `[N, C, H + W]` pooled slices of a batched region.
fn pooled_slices(region: &Tensor, normalize: bool) -> Result<Tensor> {
    let width_pooled = region.mean_axes(&[3])?;
    let height_pooled = region.mean_axes(&[2])?;
    let cat = Tensor::concat(&[&width_pooled, &height_pooled], 2)?;
    if !normalize {
        return Ok(cat);
    }
    let mut g = Graph::new();
    let v = g.constant(cat);
    let n = g.l2_normalize(v, 1)?;
    Ok(g.value(n).clone())
}

fn region_of(map: &Tensor, bounds: (usize, usize, usize, usize)) -> Result<Tensor> {
    let (r0, r1, c0, c1) = bounds;
    map.slice(2, r0, r1)?.slice(3, c0, c1)
}

/// Region embeddings of a `C x H x W` map at each scale.
pub fn multiscale_embed(feature: &Tensor, scales: &[usize], layer: usize) -> Result<MultiScaleEmbedding> {
    let s = feature.shape();
    if s.len() != 3 {
        return Err(Error::invalid("multiscale_embed", format!("expected C x H x W, got {s:?}")));
    }
    check_scales(&[[s[0], s[1], s[2]]], scales)?;
    let batched = feature.reshape(&[1, s[0], s[1], s[2]])?;
    let mut out = Vec::with_capacity(scales.len());
    for &sc in scales {
        let mut regions = Vec::with_capacity(sc * sc);
        for i in 0..sc {
            for j in 0..sc {
                let region = region_of(&batched, region_bounds(s[1], s[2], sc, i, j))?;
                let dims = region.shape()[1..].to_vec();
                regions.push(phi(&region.reshape(&dims)?)?);
            }
        }
        out.push((sc, regions));
    }
    Ok(MultiScaleEmbedding { layer, scales: out })
}

fn check_pair(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b || a.len() != 4 {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// Loss value for batched taps without recording gradients.
pub fn kd_distance(current: &[Tensor], teacher: &[Tensor], cfg: &KdConfig) -> Result<f64> {
    if current.len() != teacher.len() || current.is_empty() {
        return Err(Error::invalid("kd_loss", "tap lists must be non-empty and of equal length"));
    }
    let mut total = 0.0;
    for (cur, tea) in current.iter().zip(teacher) {
        check_pair("kd_loss", cur.shape(), tea.shape())?;
        let [n, c, h, w] = [cur.shape()[0], cur.shape()[1], cur.shape()[2], cur.shape()[3]];
        check_scales(&[[c, h, w]], &cfg.scales)?;
        let mut layer = 0.0;
        for &s in &cfg.scales {
            for i in 0..s {
                for j in 0..s {
                    let b = region_bounds(h, w, s, i, j);
                    let ec = pooled_slices(&region_of(cur, b)?, cfg.normalize)?;
                    let et = pooled_slices(&region_of(tea, b)?, cfg.normalize)?;
                    layer += ec.data().iter().zip(et.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                }
            }
        }
        total += layer / n.max(1) as f64;
    }
    Ok(total / current.len() as f64)
}

/// Teacher-side region embeddings, computed once per batch and reused as
/// constants in [`multiscale_kd_loss`].
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    shapes: Vec<Vec<usize>>,
    /// Per layer, per (scale, region) in iteration order: `[N, C, h + w]`.
    embeddings: Vec<Vec<Tensor>>,
    cfg: KdConfig,
}

impl TeacherTargets {
    pub fn new(teacher_taps: &[Tensor], cfg: &KdConfig) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(teacher_taps.len());
        for tap in teacher_taps {
            let s = tap.shape();
            if s.len() != 4 {
                return Err(Error::invalid("kd_loss", format!("teacher tap must be 4-D, got {s:?}")));
            }
            check_scales(&[[s[1], s[2], s[3]]], &cfg.scales)?;
            let mut per_layer = Vec::new();
            for &sc in &cfg.scales {
                for i in 0..sc {
                    for j in 0..sc {
                        let region = region_of(tap, region_bounds(s[2], s[3], sc, i, j))?;
                        per_layer.push(pooled_slices(&region, cfg.normalize)?);
                    }
                }
            }
            embeddings.push(per_layer);
        }
        Ok(Self {
            shapes: teacher_taps.iter().map(|t| t.shape().to_vec()).collect(),
            embeddings,
            cfg: cfg.clone(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }
}

/// Differentiable distillation loss of `current` taps against fixed targets.
pub fn multiscale_kd_loss(g: &mut Graph, current: &[Var], targets: &TeacherTargets) -> Result<Var> {
    if current.len() != targets.num_layers() || current.is_empty() {
        return Err(Error::invalid("kd_loss", "tap lists must be non-empty and of equal length"));
    }
    let mut terms = Vec::new();
    for ((&tap, shape), embs) in current.iter().zip(&targets.shapes).zip(&targets.embeddings) {
        check_pair("kd_loss", g.shape(tap), shape)?;
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let mut k = 0;
        let mut layer_terms = Vec::new();
        for &sc in &targets.cfg.scales {
            for i in 0..sc {
                for j in 0..sc {
                    let (r0, r1, c0, c1) = region_bounds(h, w, sc, i, j);
                    let region = g.slice(tap, 2, r0, r1)?;
                    let region = g.slice(region, 3, c0, c1)?;
                    let wp = g.mean(region, &[3])?;
                    let hp = g.mean(region, &[2])?;
                    let mut emb = g.concat(&[wp, hp], 2)?;
                    if targets.cfg.normalize {
                        emb = g.l2_normalize(emb, 1)?;
                    }
                    let t = g.constant(embs[k].clone());
                    let diff = g.sub(emb, t)?;
                    let sq = g.mul(diff, diff)?;
                    layer_terms.push(g.sum_all(sq)?);
                    k += 1;
                }
            }
        }
        let mut layer = layer_terms[0];
        for t in &layer_terms[1..] {
            layer = g.add(layer, *t)?;
        }
        terms.push(g.scale(layer, 1.0 / n.max(1) as f64)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    g.scale(total, 1.0 / current.len() as f64)
}

/// Payload for the `EMBD` checkpoint section.
pub fn encode_embeddings(embeddings: &[MultiScaleEmbedding]) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u32(embeddings.len() as u32);
    for e in embeddings {
        w.u32(e.layer as u32);
        w.u32(e.scales.len() as u32);
        for (s, regions) in &e.scales {
            w.u32(*s as u32);
            w.u32(regions.len() as u32);
            for r in regions {
                let shape = r.data.shape();
                w.u32(shape[0] as u32);
                w.u32(shape[1] as u32);
                r.data.data().iter().for_each(|v| w.f64(*v));
            }
        }
    }
    w.into_inner()
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<MultiScaleEmbedding>> {
    let mut r = ByteReader::new(bytes);
    let mut out = Vec::new();
    for _ in 0..r.u32()? {
        let layer = r.u32()? as usize;
        let mut scales = Vec::new();
        for _ in 0..r.u32()? {
            let s = r.u32()? as usize;
            let mut regions = Vec::new();
            for _ in 0..r.u32()? {
                let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
                let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                regions.push(SliceEmbedding {
                    data: Tensor::new(vec![rows, cols], data)?,
                });
            }
            scales.push((s, regions));
        }
        out.push(MultiScaleEmbedding { layer, scales });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after embeddings".into()));
    }
    Ok(out)
}
