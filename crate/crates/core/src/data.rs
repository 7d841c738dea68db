//! In-memory samples, the seeded train/test split, per-epoch batching and a
//! synthetic cloud-blob generator.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::SPATIAL_DIVISOR;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

// Keyed streams of one seed, so split and batch order never share randomness.
const SPLIT_STREAM: u64 = 1;
const BATCH_STREAM_BASE: u64 = 1 << 32;

/// An RGB image in `[0, 1]` paired with its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// `(1, 3, H, W)`
    pub image: Tensor<T>,
    /// `(1, 1, H, W)`, values in `{0, 1}`
    pub mask: Tensor<T>,
    pub id: String,
}

impl<T: Element> Sample<T> {
    pub fn new(image: Tensor<T>, mask: Tensor<T>, id: impl Into<String>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.n() != 1 || is.c() != 3 || ms.n() != 1 || ms.c() != 1 || (is.h(), is.w()) != (ms.h(), ms.w()) {
            return Err(Error::shape("sample", format!("image {is} and mask {ms} do not pair up")));
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Sample { image, mask, id: id.into() })
    }

    pub fn cast<U: Element>(&self) -> Sample<U> {
        Sample { image: self.image.cast(), mask: self.mask.cast(), id: self.id.clone() }
    }
}

/// Which part of a split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Test => "test",
        }
    }
}

/// Seeded random partition of `0..n`: the first `floor(ratio * n)` shuffled
/// indices train, the rest test. Both parts are returned sorted.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_train = Float::floor(ratio * n as f64) as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Shuffled batches of `ids` for one epoch, keyed by `(seed, epoch)`. The last
/// batch may be short.
pub fn batches(ids: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BATCH_STREAM_BASE + epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Indexed access to samples, in memory or loaded on demand.
pub trait SampleSource<T> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize) -> Result<Sample<T>>;
}

impl<T: Element> SampleSource<T> for [Sample<T>] {
    fn len(&self) -> usize {
        <[Sample<T>]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<Sample<T>> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range for {} samples", self.len())))
    }
}

impl<T: Element> SampleSource<T> for Vec<Sample<T>> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn sample(&self, index: usize) -> Result<Sample<T>> {
        self.as_slice().sample(index)
    }
}

/// Stacks the samples at `ids` into an image batch and a mask batch.
pub fn collate<T: Element, S: SampleSource<T> + ?Sized>(source: &S, ids: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let items = ids.iter().map(|&i| source.sample(i)).collect::<Result<Vec<_>>>()?;
    let images: Vec<&Tensor<T>> = items.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<T>> = items.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
}

pub fn check_target_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(SPATIAL_DIVISOR) || !width.is_multiple_of(SPATIAL_DIVISOR) {
        return Err(Error::invalid(format!(
            "target size {height}x{width} must be a positive multiple of {SPATIAL_DIVISOR}"
        )));
    }
    Ok(())
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Blob {
    /// Soft membership in `[0, 1]`, 1 inside the core and fading at the rim.
    fn coverage(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let r = Float::sqrt(u * u + v * v);
        (1.5 - r).clamp(0.0, 1.0)
    }
}

fn synth_one(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let unit = Uniform::new(0.0, 1.0);
    let n_blobs = rng.gen_range(1..=4);
    let scale = h.min(w) as f64;
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let angle = rng.gen_range(0.0..core::f64::consts::PI);
            Blob {
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                ry: rng.gen_range(0.1..0.3) * scale,
                rx: rng.gen_range(0.1..0.35) * scale,
                cos: libm::cos(angle),
                sin: libm::sin(angle),
            }
        })
        .collect();
    // sky: blue gradient brightening towards the horizon (bottom)
    let sky_top = [rng.gen_range(0.05..0.25), rng.gen_range(0.25..0.45), rng.gen_range(0.6..0.9)];
    let sky_gain = rng.gen_range(0.05..0.2);
    let cloud_tone = rng.gen_range(0.75..0.95);
    let mut image = alloc::vec![0.0; 3 * h * w];
    let mut mask = alloc::vec![0.0; h * w];
    for y in 0..h {
        let t = y as f64 / h as f64;
        for x in 0..w {
            let c = blobs.iter().map(|b| b.coverage(y as f64, x as f64)).fold(0.0, f64::max);
            mask[y * w + x] = if c >= 0.5 { 1.0 } else { 0.0 };
            for ch in 0..3 {
                let sky = sky_top[ch] + sky_gain * t;
                let noise = (unit.sample(rng) - 0.5) * 0.06;
                let v = (1.0 - c) * sky + c * cloud_tone + noise;
                image[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    (image, mask)
}

/// `n` synthetic sky images with soft elliptical clouds over a blue gradient.
/// Masks mark pixels with cloud coverage of at least one half; draws whose
/// mask would be all sky or all cloud are rejected and redrawn.
pub fn synth_dataset<T: Element>(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Sample<T>>> {
    if n == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one sample"));
    }
    check_target_size(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (image, mask) = synth_one(&mut rng, height, width);
        let clouds = mask.iter().filter(|&&m| m == 1.0).count();
        if clouds == 0 || clouds == mask.len() {
            continue;
        }
        let image = Tensor::new(Shape::new(1, 3, height, width), image.into_iter().map(T::from_f64).collect())?;
        let mask = Tensor::new(Shape::new(1, 1, height, width), mask.into_iter().map(T::from_f64).collect())?;
        out.push(Sample::new(image, mask, format!("synth{:05}", out.len()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_sizes() {
        let (tr, te) = split(6768, 0.8, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (5414, 1354));
        let (tr, te) = split(10, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split(10, 0.8, 3).unwrap(), (tr, te));
        assert!(split(10, 1.0, 3).is_err());
    }

    #[test]
    fn batch_counts() {
        let ids: Vec<usize> = (0..5414).collect();
        let b = batches(&ids, 16, 1, 0).unwrap();
        assert_eq!(b.len(), 339);
        assert_eq!(b.last().unwrap().len(), 5414 - 338 * 16);
        assert_eq!(batches(&ids, 16, 7, 3).unwrap(), batches(&ids, 16, 7, 3).unwrap());
        assert_ne!(batches(&ids, 16, 7, 3).unwrap(), batches(&ids, 16, 7, 4).unwrap());
        let small = batches(&[0, 1, 2, 3, 4], 16, 0, 0).unwrap();
        assert_eq!(small.len(), 1);
        assert_eq!(small[0].len(), 5);
        assert!(batches(&ids, 0, 0, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_two_class() {
        let a = synth_dataset::<f32>(8, 64, 64, 1).unwrap();
        let b = synth_dataset::<f32>(8, 64, 64, 1).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bit_eq(&y.image) && x.mask.bit_eq(&y.mask));
            let ones = x.mask.data().iter().filter(|&&v| v == 1.0).count();
            assert!(ones > 0 && ones < x.mask.numel());
            assert!(x.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(synth_dataset::<f32>(2, 60, 64, 1).is_err());
    }

    #[test]
    fn sample_validation() {
        let img = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        assert!(Sample::new(img.clone(), Tensor::zeros(Shape::new(1, 1, 4, 5)), "x").is_err());
        assert!(Sample::new(img, Tensor::full(Shape::new(1, 1, 4, 4), 0.5), "x").is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..300, seed in any::<u64>(), ratio in 0.05f64..0.95) {
            let (tr, te) = split(n, ratio, seed).unwrap();
            let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
