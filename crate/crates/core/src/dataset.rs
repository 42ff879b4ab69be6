//! Procedural labelled shapes and the image preprocessing pipeline.
//!
//! Every class is one (shape, colour) template. Samples jitter position,
//! scale, colour and background tint. Pixel levels lie on a 1/256 grid, which
//! keeps the normalize/denormalize round trip exact.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::math;
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// An image in `[0, 1]` with shape `(C, H, W)` and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
    Saltire,
    Frame,
}

const SHAPES: [Shape; 10] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::HBar,
    Shape::VBar,
    Shape::Saltire,
    Shape::Frame,
];

const COLORS: [[f64; 3]; 10] = [
    [1.0, 0.25, 0.25],
    [0.25, 1.0, 0.25],
    [0.25, 0.5, 1.0],
    [1.0, 1.0, 0.25],
    [1.0, 0.25, 1.0],
    [0.25, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 1.0],
    [0.5, 0.25, 0.75],
    [0.5, 0.75, 0.25],
];

/// Number of distinct class templates available.
pub const MAX_CLASSES: usize = SHAPES.len();

impl Shape {
    /// Whether the point `(dx, dy)`, relative to the centre and in units of
    /// the shape radius, lies inside.
    fn contains(self, dx: f64, dy: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => dx * dx + dy * dy <= 1.0,
            Shape::Square => ax <= 0.8 && ay <= 0.8,
            Shape::Triangle => dy <= 0.8 && dy >= -0.9 && ax <= (dy + 0.9) * 0.55,
            Shape::Cross => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.35..=1.0).contains(&r2)
            }
            Shape::Diamond => ax + ay <= 1.0,
            Shape::HBar => ax <= 1.0 && ay <= 0.35,
            Shape::VBar => ay <= 1.0 && ax <= 0.35,
            Shape::Saltire => ax <= 0.9 && ay <= 0.9 && (ax - ay).abs() <= 0.3,
            Shape::Frame => ax <= 0.9 && ay <= 0.9 && (ax >= 0.55 || ay >= 0.55),
        }
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D1_049B_133A_11EB);
    z ^ (z >> 31)
}

fn level(rng: &mut Rng, lo: usize, hi: usize) -> f64 {
    rng::int_inclusive(rng, lo, hi) as f64 / 256.0
}

fn render(class: usize, size: usize, rng: &mut Rng) -> Tensor {
    let shape = SHAPES[class];
    let color = COLORS[class];
    let s = size as f64;
    let jitter = s / 8.0;
    let cx = s / 2.0 + (2.0 * rng::unit(rng) - 1.0) * jitter;
    let cy = s / 2.0 + (2.0 * rng::unit(rng) - 1.0) * jitter;
    let radius = s * 0.3 * (0.8 + 0.4 * rng::unit(rng));
    let background: [f64; 3] = core::array::from_fn(|_| level(rng, 0, 32));
    let shade: [f64; 3] = core::array::from_fn(|_| level(rng, 0, 32));
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let inside = shape.contains(dx, dy);
            for c in 0..3 {
                let v = if inside {
                    (color[c] - shade[c]).max(0.0)
                } else {
                    background[c]
                };
                data[(c * size + y) * size + x] = v;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("rendered buffer matches shape")
}

/// `per_class` samples of each of the first `num_classes` templates,
/// class-major. Sample `i` draws from its own stream derived from
/// `(seed, i)`.
pub fn generate_dataset(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if num_classes == 0 || per_class == 0 {
        return Err(invalid("generate_dataset", "num_classes and per_class must be positive"));
    }
    if num_classes > MAX_CLASSES {
        return Err(invalid(
            "generate_dataset",
            format!("{num_classes} classes requested but only {MAX_CLASSES} templates exist"),
        ));
    }
    if size < 8 {
        return Err(invalid("generate_dataset", format!("image size must be at least 8, got {size}")));
    }
    let mut out = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for i in 0..per_class {
            let index = (class * per_class + i) as u64;
            let mut rng = rng::seeded(mix_seed(seed, index), Stream::Dataset);
            out.push(LabeledImage {
                pixels: render(class, size, &mut rng),
                label: class,
            });
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize: destination pixel `d` reads source pixel
/// `floor(d * src / target)`.
pub fn resize_nearest(pixels: &Tensor, target: usize) -> Result<Tensor> {
    if pixels.rank() != 3 {
        return Err(invalid("preprocess", format!("expected (C, H, W), got {:?}", pixels.shape())));
    }
    if target == 0 {
        return Err(invalid("preprocess", "target size must be positive"));
    }
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if h == target && w == target {
        return Ok(pixels.clone());
    }
    let src = pixels.data();
    let mut data = Vec::with_capacity(c * target * target);
    for ch in 0..c {
        for y in 0..target {
            let sy = y * h / target;
            for x in 0..target {
                let sx = x * w / target;
                data.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, target, target], data)
}

/// Resize, then map each channel `x -> (x - 0.5) / 0.5` into `[-1, 1]`.
pub fn preprocess(image: &LabeledImage, target: usize) -> Result<Tensor> {
    if image.pixels.is_empty() {
        return Err(invalid("preprocess", "empty image"));
    }
    Ok(resize_nearest(&image.pixels, target)?.map(|x| (x - 0.5) / 0.5))
}

/// `x -> clamp(x * 0.5 + 0.5, 0, 1)`.
pub fn denormalize(t: &Tensor) -> Tensor {
    t.map(|x| (x * 0.5 + 0.5).clamp(0.0, 1.0))
}

/// Per-class mean images of a preprocessed set, indexed by label.
pub fn class_means(images: &[Tensor], labels: &[usize], num_classes: usize) -> Result<Vec<Tensor>> {
    let first = images.first().ok_or_else(|| invalid("class_means", "no images"))?;
    let mut sums = vec![Tensor::zeros(first.shape()); num_classes];
    let mut counts = vec![0usize; num_classes];
    for (img, &l) in images.iter().zip(labels) {
        if l >= num_classes {
            return Err(invalid("class_means", format!("label {l} out of range")));
        }
        for (s, v) in sums[l].data_mut().iter_mut().zip(img.data()) {
            *s += v;
        }
        counts[l] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n == 0 {
            return Err(invalid("class_means", "a class has no images"));
        }
        for v in s.data_mut() {
            *v /= n as f64;
        }
    }
    Ok(sums)
}

/// Root-mean-square difference of two equally sized tensors.
pub fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Index of the class mean nearest to `image` in RMS distance.
pub fn nearest_class(image: &[f64], means: &[Tensor]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, m) in means.iter().enumerate() {
        let d = rms_distance(image, m.data());
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}
