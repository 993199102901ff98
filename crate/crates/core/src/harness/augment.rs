//! Training-time augmentation with consistent landmark transforms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::synth::{rotate_point, SyntheticSample, ROTATION_STD_DEG};
use crate::landmarks::{face, Point};
use crate::numerics::Tensor;

/// Largest fraction of landmarks a rotation may push out of frame.
pub const MAX_OUT_OF_FRAME: f64 = 0.25;
const ROTATION_RETRIES: usize = 10;

/// Mirror left-right; mirrored landmarks swap identities.
pub fn flip(s: &SyntheticSample) -> SyntheticSample {
    let size = s.image_size();
    let image = Tensor::from_fn(s.image.shape(), |i| {
        let (y, x) = (i / size, i % size);
        s.image.data()[y * size + (size - 1 - x)]
    });
    let mut out = s.clone();
    out.image = image;
    let old = &s.landmarks.points;
    out.landmarks.points = (0..old.len())
        .map(|i| {
            let p = old[face::FLIP[i]];
            Point::new((size - 1) as f64 - p.x, p.y)
        })
        .collect();
    out
}

/// `clamp(gain · v + bias, 0, 1)` on every pixel.
pub fn grayscale(s: &SyntheticSample, gain: f64, bias: f64) -> SyntheticSample {
    let mut out = s.clone();
    out.image = s.image.map(|v| (gain * v + bias).clamp(0.0, 1.0));
    out
}

/// Fills a rectangle with a constant tone.
pub fn occlude(
    s: &SyntheticSample,
    rect: (usize, usize, usize, usize),
    tone: f64,
) -> SyntheticSample {
    let size = s.image_size();
    let mut out = s.clone();
    let (x0, y0, w, h) = rect;
    for y in y0..(y0 + h).min(size) {
        for x in x0..(x0 + w).min(size) {
            out.image.set(&[0, y, x], tone);
        }
    }
    out
}

fn bilinear(image: &Tensor, x: f64, y: f64) -> f64 {
    let size = image.shape()[1];
    let max = (size - 1) as f64;
    if !(0.0..=max).contains(&x) || !(0.0..=max).contains(&y) {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let d = image.data();
    let top = d[y0 * size + x0] * (1.0 - fx) + d[y0 * size + x1] * fx;
    let bottom = d[y1 * size + x0] * (1.0 - fx) + d[y1 * size + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image centre with bilinear resampling; pixels mapped
/// from outside the frame become 0.
pub fn rotate(s: &SyntheticSample, degrees: f64) -> SyntheticSample {
    let size = s.image_size();
    let angle = degrees.to_radians();
    let mut out = s.clone();
    out.image = Tensor::from_fn(s.image.shape(), |i| {
        let q = Point::new((i % size) as f64, (i / size) as f64);
        let src = rotate_point(q, -angle, size);
        bilinear(&s.image, src.x, src.y)
    });
    out.landmarks.points = s
        .landmarks
        .points
        .iter()
        .map(|&p| rotate_point(p, angle, size))
        .collect();
    out
}

pub fn out_of_frame_fraction(points: &[Point], size: usize) -> f64 {
    let max = (size - 1) as f64;
    let out = points
        .iter()
        .filter(|p| !(0.0..=max).contains(&p.x) || !(0.0..=max).contains(&p.y))
        .count();
    out as f64 / points.len().max(1) as f64
}

/// Applies flip, grayscale, occlusion and rotation, each with probability ½.
/// A rotation that pushes too many landmarks out of frame is redrawn a
/// bounded number of times and skipped if none fits.
pub fn augment(s: &SyntheticSample, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let size = s.image_size();
    let mut out = s.clone();
    if rng.random_bool(0.5) {
        out = flip(&out);
    }
    if rng.random_bool(0.5) {
        let gain = rng.random_range(0.7..1.3);
        let bias = rng.random_range(-0.1..0.1);
        out = grayscale(&out, gain, bias);
    }
    if rng.random_bool(0.5) {
        let w = ((rng.random_range(0.15..0.3) * size as f64) as usize).max(1);
        let h = ((rng.random_range(0.15..0.3) * size as f64) as usize).max(1);
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        let tone = rng.random_range(0.0..1.0);
        out = occlude(&out, (x0, y0, w, h), tone);
    }
    if rng.random_bool(0.5) {
        let normal = Normal::new(0.0, ROTATION_STD_DEG).unwrap();
        for _ in 0..ROTATION_RETRIES {
            let deg = normal.sample(rng);
            let rotated: Vec<Point> = out
                .landmarks
                .points
                .iter()
                .map(|&p| rotate_point(p, deg.to_radians(), size))
                .collect();
            if out_of_frame_fraction(&rotated, size) <= MAX_OUT_OF_FRAME {
                out = rotate(&out, deg);
                break;
            }
        }
    }
    out
}
