//! CutMix over a joined current/replay batch.
//!
//! One crop box is sampled per batch. Every image `i` gets the box region
//! replaced by the same region of its partner `perm[i]` (a uniform shuffle
//! of the batch), and its label becomes
//! `gamma_exact * y_i + (1 - gamma_exact) * y_perm[i]`, where `gamma_exact`
//! is the fraction of pixels that were kept.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::batch::{Batch, BatchRole};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    /// Mix ratio drawn from Uniform(0, 1), i.e. Beta(1, 1).
    pub gamma_raw: f64,
    /// Box `(w1, h1, w2, h2)`: columns `w1..w2`, rows `h1..h2`.
    pub box_: (usize, usize, usize, usize),
    /// `1 - box_area / (W * H)` after rounding and clipping.
    pub gamma_exact: f64,
    pub width: usize,
    pub height: usize,
}

impl MixSpec {
    /// Box centred at `(center_w, center_h)` with side lengths
    /// `W * sqrt(1 - gamma_raw)` and `H * sqrt(1 - gamma_raw)`, rounded and
    /// clipped to the image.
    pub fn from_raw(width: usize, height: usize, gamma_raw: f64, center_w: f64, center_h: f64) -> Self {
        let cut = (1.0 - gamma_raw).max(0.0).sqrt();
        let (cut_w, cut_h) = (width as f64 * cut, height as f64 * cut);
        let lo = |c: f64, len: f64| (c - len / 2.0).max(0.0).round() as usize;
        let hi = |c: f64, len: f64, limit: usize| (c + len / 2.0).min(limit as f64).round() as usize;
        let w1 = lo(center_w, cut_w).min(width);
        let w2 = hi(center_w, cut_w, width).max(w1);
        let h1 = lo(center_h, cut_h).min(height);
        let h2 = hi(center_h, cut_h, height).max(h1);
        let area = (w2 - w1) * (h2 - h1);
        Self {
            gamma_raw,
            box_: (w1, h1, w2, h2),
            gamma_exact: 1.0 - area as f64 / (width * height) as f64,
            width,
            height,
        }
    }

    pub fn box_area(&self) -> usize {
        let (w1, h1, w2, h2) = self.box_;
        (w2 - w1) * (h2 - h1)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (w1, h1, w2, h2) = self.box_;
        (h1..h2).contains(&row) && (w1..w2).contains(&col)
    }
}

pub fn sample_mixspec<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Result<MixSpec> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("cutmix", "image extents must be positive"));
    }
    let gamma_raw: f64 = rng.random();
    let center_w = rng.random::<f64>() * width as f64;
    let center_h = rng.random::<f64>() * height as f64;
    Ok(MixSpec::from_raw(width, height, gamma_raw, center_w, center_h))
}

/// Augmented batch plus the choices that produced it.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub batch: Batch,
    pub spec: Option<MixSpec>,
    pub partners: Vec<usize>,
}

/// Shuffles partners, samples one [`MixSpec`] and applies it.
pub fn cutmix<R: Rng + ?Sized>(batch: &Batch, rng: &mut R) -> Result<Mixed> {
    if batch.is_empty() {
        return Ok(Mixed {
            batch: Batch::empty(batch.image_shape(), batch.num_classes(), BatchRole::Augmented),
            spec: None,
            partners: Vec::new(),
        });
    }
    let mut partners: Vec<usize> = (0..batch.len()).collect();
    partners.shuffle(rng);
    let [_, h, w] = batch.image_shape();
    let spec = sample_mixspec(w, h, rng)?;
    let mixed = apply_mix(batch, &spec, &partners)?;
    Ok(Mixed {
        batch: mixed,
        spec: Some(spec),
        partners,
    })
}

/// Deterministic core of [`cutmix`].
pub fn apply_mix(batch: &Batch, spec: &MixSpec, partners: &[usize]) -> Result<Batch> {
    let [c, h, w] = batch.image_shape();
    if spec.width != w || spec.height != h {
        return Err(Error::invalid(
            "cutmix",
            format!("spec is for {}x{} images, batch has {h}x{w}", spec.height, spec.width),
        ));
    }
    if partners.len() != batch.len() || partners.iter().any(|&p| p >= batch.len()) {
        return Err(Error::invalid("cutmix", "partner list does not index the batch"));
    }
    let (w1, h1, w2, h2) = spec.box_;
    let image_len = c * h * w;
    let src = batch.images.data();
    let mut images = src.to_vec();
    for (i, &p) in partners.iter().enumerate() {
        for ch in 0..c {
            for row in h1..h2 {
                let off = ch * h * w + row * w;
                let (dst, from) = (i * image_len + off, p * image_len + off);
                images[dst + w1..dst + w2].copy_from_slice(&src[from + w1..from + w2]);
            }
        }
    }
    let k = batch.num_classes();
    let gamma = spec.gamma_exact;
    let y = batch.labels.data();
    let mut labels = Vec::with_capacity(y.len());
    for (i, &p) in partners.iter().enumerate() {
        labels.extend((0..k).map(|j| gamma * y[i * k + j] + (1.0 - gamma) * y[p * k + j]));
    }
    Batch::new(
        Tensor::new(batch.images.shape().to_vec(), images)?,
        Tensor::new(batch.labels.shape().to_vec(), labels)?,
        batch.task_ids.clone(),
        BatchRole::Augmented,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::one_hot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `n` images whose every pixel equals the image index.
    fn tagged_batch(n: usize, h: usize, w: usize, k: usize) -> Batch {
        Batch::new(
            Tensor::new(vec![n, 2, h, w], (0..n).flat_map(|i| vec![i as f64; 2 * h * w]).collect()).unwrap(),
            Tensor::new(vec![n, k], (0..n).flat_map(|i| one_hot(i % k, k)).collect()).unwrap(),
            vec![0; n],
            BatchRole::Joined,
        )
        .unwrap()
    }

    #[test]
    fn centered_box_geometry() {
        let spec = MixSpec::from_raw(4, 4, 0.75, 2.0, 2.0);
        assert_eq!(spec.box_, (1, 1, 3, 3));
        assert_eq!(spec.box_area(), 4);
        assert_eq!(spec.gamma_exact, 0.75);
    }

    #[test]
    fn full_keep_limit() {
        let spec = MixSpec::from_raw(8, 8, 1.0, 3.3, 5.1);
        assert_eq!(spec.box_area(), 0);
        assert_eq!(spec.gamma_exact, 1.0);
        let b = tagged_batch(3, 8, 8, 3);
        let out = apply_mix(&b, &spec, &[2, 0, 1]).unwrap();
        assert_eq!(out.images, b.images);
        assert_eq!(out.labels, b.labels);
    }

    #[test]
    fn unclipped_cut_ratio_is_one_minus_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let gamma: f64 = rng.random();
            let (w, h) = (8.0, 6.0);
            let (cw, ch) = (w * (1.0 - gamma).sqrt(), h * (1.0 - gamma).sqrt());
            assert!((cw * ch / (w * h) - (1.0 - gamma)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_label_mix() {
        let b = tagged_batch(2, 4, 4, 2);
        let spec = MixSpec::from_raw(4, 4, 0.75, 2.0, 2.0);
        let out = apply_mix(&b, &spec, &[1, 0]).unwrap();
        assert_eq!(out.example(0).label, &[0.75, 0.25]);
        assert_eq!(out.example(1).label, &[0.25, 0.75]);
    }

    #[test]
    fn identical_examples_are_a_fixed_point() {
        let b = Batch::new(
            Tensor::full(&[4, 1, 5, 5], 0.3),
            Tensor::new(vec![4, 3], [0.2, 0.5, 0.3].repeat(4)).unwrap(),
            vec![1; 4],
            BatchRole::Joined,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = cutmix(&b, &mut rng).unwrap().batch;
        assert_eq!(out.images, b.images);
        for (a, e) in out.labels.data().iter().zip(b.labels.data()) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(out.role, BatchRole::Augmented);
    }

    #[test]
    fn empty_and_degenerate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = Batch::empty([1, 4, 4], 3, BatchRole::Joined);
        assert!(cutmix(&empty, &mut rng).unwrap().batch.is_empty());
        let thin = tagged_batch(3, 1, 5, 3);
        let out = cutmix(&thin, &mut rng).unwrap();
        assert_eq!(out.batch.len(), 3);
        assert!(sample_mixspec(0, 3, &mut rng).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let b = tagged_batch(6, 8, 8, 3);
        let a = cutmix(&b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = cutmix(&b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.batch, c.batch);
        assert_eq!(a.partners, c.partners);
    }

    proptest! {
        #[test]
        fn provenance_and_label_invariants(seed in any::<u64>(), n in 1usize..7, h in 1usize..9, w in 1usize..9) {
            let b = tagged_batch(n, h, w, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mixed = cutmix(&b, &mut rng).unwrap();
            let spec = mixed.spec.unwrap();
            let (w1, h1, w2, h2) = spec.box_;
            prop_assert!(w1 <= w2 && w2 <= w && h1 <= h2 && h2 <= h);
            prop_assert_eq!(spec.gamma_exact, 1.0 - ((w2 - w1) * (h2 - h1)) as f64 / (w * h) as f64);
            for i in 0..n {
                let p = mixed.partners[i];
                let img = mixed.batch.example(i).image;
                let mut from_partner = 0;
                for ch in 0..2 {
                    for r in 0..h {
                        for col in 0..w {
                            let v = img[ch * h * w + r * w + col];
                            let expect = if spec.contains(r, col) { p } else { i } as f64;
                            prop_assert_eq!(v, expect);
                            if spec.contains(r, col) { from_partner += 1; }
                        }
                    }
                }
                prop_assert_eq!(from_partner, 2 * spec.box_area());
                prop_assert!((from_partner as f64 / (2 * h * w) as f64 - (1.0 - spec.gamma_exact)).abs() < 1e-12);
                let sum: f64 = mixed.batch.example(i).label.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
            // Input untouched.
            prop_assert_eq!(&b, &tagged_batch(n, h, w, 3));
        }
    }
}
