//! Parametric grayscale faces with analytically known landmarks.
//!
//! A face is an ellipse head with two eye blobs, pupils, a nose tip and a
//! mouth arc. Every sample is a pure function of its seed and difficulty.
//! The face parameters and pixel noise come from one random stream and the
//! difficulty branch (rotation angle, occluder, blur width) from another, so
//! the branches of one seed share the same underlying face.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{face, LandmarkSet, NormKind, Point};
use crate::metrics::landmark_set;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Neutral,
    Occluded,
    Rotated,
    Blurred,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Neutral,
        Difficulty::Occluded,
        Difficulty::Rotated,
        Difficulty::Blurred,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Neutral => "neutral",
            Difficulty::Occluded => "occluded",
            Difficulty::Rotated => "rotated",
            Difficulty::Blurred => "blurred",
        }
    }

    pub fn names() -> [&'static str; 4] {
        Self::ALL.map(Self::name)
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown difficulty `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: u64,
    pub seed: u64,
    pub label: Difficulty,
    /// `1×S×S`, values in `[0, 1]`.
    pub image: Tensor,
    /// Image pixel coordinates, inter-ocular normalization.
    pub landmarks: LandmarkSet,
}

impl SyntheticSample {
    pub fn image_size(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Geometry and tones of one face, in image pixels.
#[derive(Clone, Debug)]
struct Face {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    eye_v: f64,
    eye_sep: f64,
    eye_w: f64,
    eye_h: f64,
    gaze: f64,
    nose: (f64, f64),
    mouth_w: f64,
    mouth_v: f64,
    smile: f64,
    skin: f64,
    background: f64,
    shading: f64,
}

/// Random choices of the difficulty branches for one seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchParams {
    /// Rotation about the image centre, radians.
    pub angle: f64,
    /// Occluder `(x0, y0, width, height)` in whole pixels.
    pub occluder: (usize, usize, usize, usize),
    pub occluder_tone: f64,
    pub blur_sigma: f64,
}

const NOISE_STD: f64 = 0.02;
pub const ROTATION_STD_DEG: f64 = 20.0;

fn face_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn branch_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

impl Face {
    fn sample(size: usize, r: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let centre = (s - 1.0) / 2.0;
        let a = r.random_range(0.26..0.32) * s;
        Face {
            cx: centre + r.random_range(-0.04..0.04) * s,
            cy: centre + r.random_range(-0.04..0.04) * s,
            a,
            b: a * r.random_range(1.1..1.25),
            eye_v: r.random_range(-0.3..-0.15),
            eye_sep: r.random_range(0.36..0.44),
            eye_w: r.random_range(0.16..0.2),
            eye_h: r.random_range(0.07..0.1),
            gaze: r.random_range(-0.05..0.05),
            nose: (r.random_range(-0.05..0.05), r.random_range(0.12..0.25)),
            mouth_w: r.random_range(0.25..0.35),
            mouth_v: r.random_range(0.45..0.58),
            smile: r.random_range(-0.08..0.12),
            skin: r.random_range(0.65..0.85),
            background: r.random_range(0.1..0.35),
            shading: r.random_range(-0.1..0.1),
        }
    }

    fn at(&self, u: f64, v: f64) -> Point {
        Point::new(self.cx + self.a * u, self.cy + self.b * v)
    }

    fn landmarks(&self) -> Vec<Point> {
        let mut p = vec![Point::new(0.0, 0.0); face::LANDMARKS];
        p[face::JAW_LEFT] = self.at(-0.8, 0.6);
        p[face::CHIN] = self.at(0.0, 1.0);
        p[face::JAW_RIGHT] = self.at(0.8, 0.6);
        p[face::LEFT_EYE_OUTER] = self.at(-self.eye_sep - self.eye_w, self.eye_v);
        p[face::LEFT_EYE_INNER] = self.at(-self.eye_sep + self.eye_w, self.eye_v);
        p[face::RIGHT_EYE_INNER] = self.at(self.eye_sep - self.eye_w, self.eye_v);
        p[face::RIGHT_EYE_OUTER] = self.at(self.eye_sep + self.eye_w, self.eye_v);
        p[face::LEFT_PUPIL] = self.at(-self.eye_sep + self.gaze, self.eye_v);
        p[face::RIGHT_PUPIL] = self.at(self.eye_sep + self.gaze, self.eye_v);
        p[face::NOSE] = self.at(self.nose.0, self.nose.1);
        p[face::MOUTH_LEFT] = self.at(-self.mouth_w, self.mouth_v);
        p[face::MOUTH_RIGHT] = self.at(self.mouth_w, self.mouth_v);
        p
    }

    /// Intensity at image point `(x, y)` before noise.
    fn intensity(&self, x: f64, y: f64, size: f64) -> f64 {
        let u = (x - self.cx) / self.a;
        let v = (y - self.cy) / self.b;
        let mut value = self.background + self.shading * (x / size - 0.5);

        let head_sd = ((u * u + v * v).sqrt() - 1.0) * self.a.min(self.b);
        value = mix(value, self.skin, coverage(head_sd));

        for side in [-1.0, 1.0] {
            let eu = (u - side * self.eye_sep) / self.eye_w;
            let ev = (v - self.eye_v) / self.eye_h;
            let eye_sd = ((eu * eu + ev * ev).sqrt() - 1.0) * (self.eye_h * self.b);
            value = mix(value, 0.3, coverage(eye_sd));

            let pupil = self.at(side * self.eye_sep + self.gaze, self.eye_v);
            let radius = 0.8 * self.eye_h * self.b;
            let pupil_sd = Point::new(x, y).distance(pupil) - radius;
            value = mix(value, 0.05, coverage(pupil_sd));
        }

        let nose = self.at(self.nose.0, self.nose.1);
        let nose_sd = Point::new(x, y).distance(nose) - 0.07 * self.a;
        value = mix(value, 0.4, coverage(nose_sd));

        let q = Point::new(x, y);
        let mut mouth_d = f64::INFINITY;
        let mut prev = self.mouth_point(-1.0);
        for k in 1..=12 {
            let next = self.mouth_point(-1.0 + 2.0 * k as f64 / 12.0);
            mouth_d = mouth_d.min(crate::heads::segment_distance(q, prev, next));
            prev = next;
        }
        let thickness = 0.05 * self.b + 0.3;
        value = mix(value, 0.15, coverage(mouth_d - thickness));
        value
    }

    /// Point on the mouth arc; `t` runs from −1 (left corner) to 1.
    fn mouth_point(&self, t: f64) -> Point {
        self.at(t * self.mouth_w, self.mouth_v + self.smile * (1.0 - t * t))
    }
}

fn mix(under: f64, over: f64, alpha: f64) -> f64 {
    under + (over - under) * alpha
}

/// Anti-aliased coverage of a shape given the signed distance in pixels.
fn coverage(signed_distance: f64) -> f64 {
    1.0 / (1.0 + (signed_distance / 0.35).exp())
}

pub fn branch_params(seed: u64, image_size: usize) -> BranchParams {
    let s = image_size as f64;
    let mut r = branch_rng(seed);
    let angle_deg: f64 = Normal::new(0.0, ROTATION_STD_DEG).unwrap().sample(&mut r);
    let ow = ((r.random_range(0.25..0.4) * s).round() as usize).clamp(1, image_size);
    let oh = ((r.random_range(0.25..0.4) * s).round() as usize).clamp(1, image_size);
    let centre_x = r.random_range(0.3..0.7) * s;
    let centre_y = r.random_range(0.3..0.7) * s;
    let x0 = ((centre_x - ow as f64 / 2.0).max(0.0) as usize).min(image_size - ow);
    let y0 = ((centre_y - oh as f64 / 2.0).max(0.0) as usize).min(image_size - oh);
    BranchParams {
        angle: angle_deg * PI / 180.0,
        occluder: (x0, y0, ow, oh),
        occluder_tone: r.random_range(0.0..1.0),
        blur_sigma: r.random_range(0.03..0.05) * s,
    }
}

/// Rotates `p` about the image centre.
pub fn rotate_point(p: Point, angle: f64, image_size: usize) -> Point {
    let c = (image_size as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let (dx, dy) = (p.x - c, p.y - c);
    Point::new(c + cos * dx - sin * dy, c + sin * dx + cos * dy)
}

fn render(face: &Face, size: usize, angle: f64, noise: &[f64]) -> Tensor {
    let s = size as f64;
    Tensor::from_fn(&[1, size, size], |i| {
        let q = Point::new((i % size) as f64, (i / size) as f64);
        let src = rotate_point(q, -angle, size);
        (face.intensity(src.x, src.y, s) + noise[i]).clamp(0.0, 1.0)
    })
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let src = image.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in (-radius..=radius).enumerate() {
                let xx = (x as isize + k).clamp(0, w as isize - 1) as usize;
                acc += kernel[j] * src[y * w + xx];
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    Tensor::from_fn(image.shape(), |i| {
        let (y, x) = (i / w, i % w);
        let mut acc = 0.0;
        for (j, k) in (-radius..=radius).enumerate() {
            let yy = (y as isize + k).clamp(0, h as isize - 1) as usize;
            acc += kernel[j] * tmp[yy * w + x];
        }
        acc / norm
    })
}

/// Renders the face of `seed` under the given difficulty.
pub fn generate_sample(
    seed: u64,
    difficulty: Difficulty,
    image_size: usize,
) -> Result<SyntheticSample> {
    if image_size < 8 {
        return Err(Error::Config(format!(
            "image_size {image_size} is too small to draw a face"
        )));
    }
    let mut r = face_rng(seed);
    let face = Face::sample(image_size, &mut r);
    let noise: Vec<f64> = (0..image_size * image_size)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            NOISE_STD * z
        })
        .collect();
    let branch = branch_params(seed, image_size);
    let mut points = face.landmarks();
    let image = match difficulty {
        Difficulty::Neutral => render(&face, image_size, 0.0, &noise),
        Difficulty::Rotated => {
            points = points
                .into_iter()
                .map(|p| rotate_point(p, branch.angle, image_size))
                .collect();
            render(&face, image_size, branch.angle, &noise)
        }
        Difficulty::Occluded => {
            let mut img = render(&face, image_size, 0.0, &noise);
            let (x0, y0, ow, oh) = branch.occluder;
            for y in y0..y0 + oh {
                for x in x0..x0 + ow {
                    img.set(&[0, y, x], branch.occluder_tone);
                }
            }
            img
        }
        Difficulty::Blurred => {
            gaussian_blur(&render(&face, image_size, 0.0, &noise), branch.blur_sigma)
        }
    };
    Ok(SyntheticSample {
        id: seed,
        seed,
        label: difficulty,
        image,
        landmarks: landmark_set(points, NormKind::InterOcular, &face::NORM_PAIRS)?,
    })
}

/// Label proportions for a generated set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mix(pub Vec<(Difficulty, f64)>);

impl Default for Mix {
    fn default() -> Self {
        Mix(vec![
            (Difficulty::Neutral, 0.4),
            (Difficulty::Occluded, 0.2),
            (Difficulty::Rotated, 0.2),
            (Difficulty::Blurred, 0.2),
        ])
    }
}

impl std::str::FromStr for Mix {
    type Err = Error;

    /// `neutral:0.4,occluded:0.2,...`
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = Vec::new();
        for item in s.split(',') {
            let (name, weight) = item.split_once(':').ok_or_else(|| {
                Error::Config(format!("mix entry `{item}` is not `label:weight`"))
            })?;
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("mix weight `{weight}` is not a number")))?;
            if !(weight >= 0.0) {
                return Err(Error::Config(format!("mix weight {weight} is negative")));
            }
            parts.push((name.trim().parse()?, weight));
        }
        let total: f64 = parts.iter().map(|p| p.1).sum();
        if !(total > 0.0) {
            return Err(Error::Config("mix weights sum to zero".into()));
        }
        Ok(Mix(parts))
    }
}

impl Mix {
    /// Exactly proportioned labels (largest remainder), shuffled.
    pub fn labels(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<Difficulty> {
        let total: f64 = self.0.iter().map(|p| p.1).sum();
        let exact: Vec<f64> = self.0.iter().map(|p| p.1 / total * count as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&i, &j| {
            (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor()))
        });
        let mut missing = count - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
        let mut labels: Vec<Difficulty> = self
            .0
            .iter()
            .zip(&counts)
            .flat_map(|(&(d, _), &n)| std::iter::repeat_n(d, n))
            .collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        labels
    }
}

/// Seed of sample `index` in a set generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` samples with labels drawn to match `mix`; ids are `0..count`.
pub fn generate_set(
    seed: u64,
    count: usize,
    mix: &Mix,
    image_size: usize,
) -> Result<Vec<SyntheticSample>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(7);
    let labels = mix.labels(count, &mut r);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut s = generate_sample(sample_seed(seed, i), label, image_size)?;
            s.id = i as u64;
            Ok(s)
        })
        .collect()
}
