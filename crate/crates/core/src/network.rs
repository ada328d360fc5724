//! Convolutional classifier split into a feature extractor and a linear head.
//!
//! The feature extractor is a stack of `conv -> relu` blocks with "same"
//! padding; the head is global average pooling followed by a linear layer.
//! Selected block outputs are exposed as taps for feature distillation.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding();
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    /// (channels, height, width) of one input image.
    pub input_shape: [usize; 3],
    pub conv_blocks: Vec<ConvBlock>,
    /// Zero-based indices of the blocks whose outputs are tapped.
    pub tap_layers: Vec<usize>,
    pub num_classes: usize,
    /// Restrict softmax and argmax to the classes of the example's task.
    pub multi_head: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSegment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSegment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl ArchSpec {
    /// Three stride-2 3x3 blocks (16, 32, 64 channels) tapped after the first two.
    pub fn desk_default(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            input_shape,
            conv_blocks: vec![
                ConvBlock::new(16, 3, 2),
                ConvBlock::new(32, 3, 2),
                ConvBlock::new(64, 3, 2),
            ],
            tap_layers: vec![0, 1],
            num_classes,
            multi_head: false,
        }
    }

    /// Output (C, H, W) of every block, or the first block that collapses.
    fn try_block_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [_, mut h, mut w] = self.input_shape;
        let mut shapes = Vec::with_capacity(self.conv_blocks.len());
        for (i, b) in self.conv_blocks.iter().enumerate() {
            match (b.output_extent(h), b.output_extent(w)) {
                (Some(nh), Some(nw)) if nh > 0 && nw > 0 => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(Error::Arch(format!(
                        "block {i} (kernel {}) does not fit a {h}x{w} input",
                        b.kernel
                    )))
                }
            }
            shapes.push([b.out_channels, h, w]);
        }
        Ok(shapes)
    }

    pub fn block_shapes(&self) -> Vec<[usize; 3]> {
        self.try_block_shapes().unwrap_or_default()
    }

    pub fn tap_shapes(&self) -> Vec<[usize; 3]> {
        let shapes = self.block_shapes();
        self.tap_layers.iter().filter_map(|&i| shapes.get(i).copied()).collect()
    }

    pub fn num_taps(&self) -> usize {
        self.tap_layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Arch(format!("input shape {:?} has an empty axis", self.input_shape)));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::Arch("at least one convolution block is required".into()));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::Arch(format!("block {i} has a zero channel, kernel or stride")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Arch("num_classes must be at least 2".into()));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Arch("tap_layers must not be empty".into()));
        }
        if self.tap_layers.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Arch(format!(
                "tap_layers {:?} must be strictly increasing",
                self.tap_layers
            )));
        }
        if let Some(&last) = self.tap_layers.last() {
            if last >= self.conv_blocks.len() {
                return Err(Error::Arch(format!(
                    "tap layer {last} out of range for {} blocks",
                    self.conv_blocks.len()
                )));
            }
        }
        let shapes = self.try_block_shapes()?;
        for &t in &self.tap_layers {
            let [_, th, tw] = shapes[t];
            if th < 2 || tw < 2 {
                return Err(Error::Arch(format!(
                    "tapped block {t} produces a {th}x{tw} map; taps need at least 2x2"
                )));
            }
        }
        Ok(())
    }

    pub fn param_layout(&self) -> Vec<ParamSegment> {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            segments.push(ParamSegment { name, shape, offset });
            offset += len;
        };
        let mut in_c = self.input_shape[0];
        for (i, b) in self.conv_blocks.iter().enumerate() {
            push(format!("conv{i}.weight"), vec![b.out_channels, in_c, b.kernel, b.kernel]);
            push(format!("conv{i}.bias"), vec![b.out_channels]);
            in_c = b.out_channels;
        }
        push("head.weight".into(), vec![in_c, self.num_classes]);
        push("head.bias".into(), vec![self.num_classes]);
        segments
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(ParamSegment::len).sum()
    }

    /// Line-oriented `key=value` form used inside checkpoints.
    pub fn to_canonical_text(&self) -> String {
        let [c, h, w] = self.input_shape;
        let blocks: Vec<String> = self
            .conv_blocks
            .iter()
            .map(|b| format!("{}:{}:{}", b.out_channels, b.kernel, b.stride))
            .collect();
        let taps: Vec<String> = self.tap_layers.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "input={c}x{h}x{w}");
        let _ = writeln!(s, "blocks={}", blocks.join(","));
        let _ = writeln!(s, "taps={}", taps.join(","));
        let _ = writeln!(s, "classes={}", self.num_classes);
        let _ = writeln!(s, "multi_head={}", self.multi_head);
        s
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut input = None;
        let mut blocks = None;
        let mut taps = None;
        let mut classes = None;
        let mut multi_head = None;
        let bad = |what: &str| Error::Format(format!("arch descriptor: bad {what}"));
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(s));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k.trim() {
                "input" => {
                    let dims = v.split('x').map(num).collect::<Result<Vec<_>>>()?;
                    let dims: [usize; 3] = dims.try_into().map_err(|_| bad("input"))?;
                    input = Some(dims);
                }
                "blocks" => {
                    let parsed = v
                        .split(',')
                        .map(|b| {
                            let parts = b.split(':').map(num).collect::<Result<Vec<_>>>()?;
                            match parts[..] {
                                [o, k, s] => Ok(ConvBlock::new(o, k, s)),
                                _ => Err(bad("block")),
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    blocks = Some(parsed);
                }
                "taps" => taps = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?),
                "classes" => classes = Some(num(v)?),
                "multi_head" => multi_head = Some(v.trim().parse::<bool>().map_err(|_| bad("multi_head"))?),
                other => return Err(bad(other)),
            }
        }
        let arch = Self {
            input_shape: input.ok_or_else(|| bad("missing input"))?,
            conv_blocks: blocks.ok_or_else(|| bad("missing blocks"))?,
            tap_layers: taps.ok_or_else(|| bad("missing taps"))?,
            num_classes: classes.ok_or_else(|| bad("missing classes"))?,
            multi_head: multi_head.unwrap_or(false),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
    pub rng_seed: u64,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub logits: Tensor,
    /// One `[N, C, H, W]` map per tap layer; empty unless taps were requested.
    pub taps: Vec<Tensor>,
}

/// Variables produced by recording a forward pass on a [`Graph`].
#[derive(Clone, Debug)]
pub struct GraphForward {
    pub params: Vec<Var>,
    pub logits: Var,
    pub taps: Vec<Var>,
}

/// Kaiming-uniform fan-in initialisation; biases start at zero.
pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = arch.param_layout();
    let mut params = vec![0.0; arch.param_count()];
    for seg in layout.iter().filter(|s| s.name.ends_with(".weight")) {
        let fan_in: usize = if seg.shape.len() == 4 {
            seg.shape[1..].iter().product()
        } else {
            seg.shape[0]
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        for p in &mut params[seg.range()] {
            *p = rng.random_range(-bound..bound);
        }
    }
    Ok(ModelState {
        arch: arch.clone(),
        params,
        rng_seed: seed,
    })
}

impl ModelState {
    pub fn new(arch: ArchSpec, params: Vec<f64>, rng_seed: u64) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Arch(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self { arch, params, rng_seed })
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.arch.input_shape;
        if shape.len() != 4 || shape[0] == 0 || shape[1..] != [c, h, w] {
            return Err(Error::shape("forward", shape, &[0, c, h, w]));
        }
        Ok(())
    }

    /// Records the full network on `g`. Parameters become trainable leaves
    /// when `trainable` is set and constants otherwise.
    pub fn forward_on(&self, g: &mut Graph, images: Var, trainable: bool) -> Result<GraphForward> {
        self.check_images(g.shape(images))?;
        let layout = self.arch.param_layout();
        let params = layout
            .iter()
            .map(|seg| {
                let t = Tensor::new(seg.shape.clone(), self.params[seg.range()].to_vec())?;
                Ok(if trainable { g.param(t) } else { g.constant(t) })
            })
            .collect::<Result<Vec<_>>>()?;
        let (logits, taps) = self.run_blocks(g, &params, images, 0, true)?;
        Ok(GraphForward { params, logits, taps })
    }

    fn run_blocks(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: Var,
        first_block: usize,
        collect_taps: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = input;
        let mut taps = Vec::new();
        for (i, block) in self.arch.conv_blocks.iter().enumerate().skip(first_block) {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            h = g.conv2d(h, w, b, block.stride, block.padding())?;
            h = g.relu(h)?;
            if collect_taps && self.arch.tap_layers.contains(&i) {
                taps.push(h);
            }
        }
        let pooled = g.mean(h, &[2, 3])?;
        let n = self.arch.conv_blocks.len();
        let logits = g.matmul(pooled, params[2 * n])?;
        let logits = g.add_bias(logits, params[2 * n + 1])?;
        Ok((logits, taps))
    }

    pub fn forward(&self, images: &Tensor, with_taps: bool) -> Result<ForwardResult> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward_on(&mut g, x, false)?;
        Ok(ForwardResult {
            logits: g.value(out.logits).clone(),
            taps: if with_taps {
                out.taps.iter().map(|t| g.value(*t).clone()).collect()
            } else {
                Vec::new()
            },
        })
    }

    /// Logits obtained by feeding `features` (the output of block
    /// `block - 1`) through blocks `block..` and the head.
    pub fn forward_from_block(&self, block: usize, features: &Tensor) -> Result<Tensor> {
        if block > self.arch.conv_blocks.len() {
            return Err(Error::invalid("forward_from_block", format!("block {block} out of range")));
        }
        let mut g = Graph::new();
        let layout = self.arch.param_layout();
        let params = layout
            .iter()
            .map(|seg| Tensor::new(seg.shape.clone(), self.params[seg.range()].to_vec()).map(|t| g.constant(t)))
            .collect::<Result<Vec<_>>>()?;
        let x = g.constant(features.clone());
        let (logits, _) = self.run_blocks(&mut g, &params, x, block, false)?;
        Ok(g.value(logits).clone())
    }

    /// Concatenates per-segment gradients into one vector aligned with `params`.
    pub fn flatten_grads(&self, grads: &Gradients, params: &[Var]) -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(self.params.len());
        for p in params {
            let g = grads
                .get(*p)
                .ok_or_else(|| Error::Backward("parameter was not trainable".into()))?;
            flat.extend_from_slice(g.data());
        }
        Ok(flat)
    }

    /// `params - lr * grads` as a new state.
    pub fn sgd_step(&self, grads: &[f64], lr: f64) -> Result<ModelState> {
        if grads.len() != self.params.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!("{} gradients for {} parameters", grads.len(), self.params.len()),
            ));
        }
        let params = self.params.iter().zip(grads).map(|(p, g)| p - lr * g).collect();
        Ok(ModelState {
            arch: self.arch.clone(),
            params,
            rng_seed: self.rng_seed,
        })
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.arch
            .param_layout()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.range()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            input_shape: [1, 8, 8],
            conv_blocks: vec![ConvBlock::new(4, 3, 2), ConvBlock::new(6, 3, 2)],
            tap_layers: vec![0, 1],
            num_classes: 3,
            multi_head: false,
        }
    }

    #[test]
    fn default_arch_is_valid() {
        let arch = ArchSpec::desk_default([1, 8, 8], 10);
        arch.validate().unwrap();
        assert_eq!(arch.block_shapes(), vec![[16, 4, 4], [32, 2, 2], [64, 1, 1]]);
        assert_eq!(arch.tap_shapes(), vec![[16, 4, 4], [32, 2, 2]]);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = small_arch();
        let a = init_model(&arch, 1).unwrap();
        let b = init_model(&arch, 1).unwrap();
        let c = init_model(&arch, 2).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.params.len(), arch.param_count());
    }

    #[test]
    fn tap_on_collapsed_map_is_rejected() {
        let mut arch = ArchSpec::desk_default([1, 8, 8], 10);
        arch.tap_layers = vec![1, 2];
        let err = init_model(&arch, 0).unwrap_err().to_string();
        assert!(err.contains("1x1"), "{err}");
    }

    #[test]
    fn arch_validation_messages() {
        let mut arch = small_arch();
        arch.tap_layers = vec![];
        assert!(arch.validate().is_err());
        arch.tap_layers = vec![1, 0];
        assert!(arch.validate().unwrap_err().to_string().contains("increasing"));
        arch.tap_layers = vec![5];
        assert!(arch.validate().unwrap_err().to_string().contains("out of range"));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let arch = ArchSpec::desk_default([1, 8, 8], 10);
        let model = init_model(&arch, 3).unwrap();
        let zero = Tensor::zeros(&[1, 1, 8, 8]);
        let out = model.forward(&zero, true).unwrap();
        assert_eq!(out.logits.shape(), &[1, 10]);
        assert_eq!(out.taps.len(), 2);
        let again = model.forward(&zero, true).unwrap();
        assert_eq!(out.logits, again.logits);
        assert!(model.forward(&Tensor::zeros(&[1, 1, 4, 4]), false).is_err());
        assert!(model.forward(&Tensor::zeros(&[0, 1, 8, 8]), false).is_err());
    }

    #[test]
    fn taps_feed_the_remaining_network() {
        let arch = small_arch();
        let model = init_model(&arch, 11).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let out = model.forward(&x, true).unwrap();
        let resumed = model.forward_from_block(1, &out.taps[0]).unwrap();
        assert_eq!(resumed, out.logits);
    }

    #[test]
    fn sgd_step_examples() {
        let arch = small_arch();
        let mut model = init_model(&arch, 0).unwrap();
        let n = model.params.len();
        model.params = vec![1.0; n];
        let mut grads = vec![0.0; n];
        grads[0] = 1.0;
        grads[1] = 2.0;
        let next = model.sgd_step(&grads, 0.1).unwrap();
        assert_eq!(&next.params[..2], &[0.9, 0.8]);
        assert_eq!(model.sgd_step(&grads, 0.0).unwrap().params, model.params);
        assert!(model.sgd_step(&grads[..3], 0.1).is_err());
    }

    #[test]
    fn canonical_text_round_trip() {
        let mut arch = small_arch();
        arch.multi_head = true;
        let text = arch.to_canonical_text();
        assert_eq!(ArchSpec::from_canonical_text(&text).unwrap(), arch);
    }
}
