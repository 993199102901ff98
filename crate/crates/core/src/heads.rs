//! Heatmap prediction heads, ground-truth rendering and the training loss.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::landmarks::Point;
use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Forward, Init};
use crate::numerics::{ParamStore, Tensor, Var};

/// Initial scale of the 1×1 output convolutions, small so untrained maps
/// start near zero.
const OUTPUT_INIT: Init = Init::Normal(1e-3);

/// Landmark (`N×L×h×w`) and boundary (`N×B×h×w`) maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    pub landmark: Tensor,
    pub boundary: Tensor,
}

impl HeatmapSet {
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.landmark.shape();
        (s[2], s[3])
    }

    /// Stacks per-sample `L×h×w` / `B×h×w` maps into a batch.
    pub fn batch(samples: &[HeatmapSet]) -> Result<HeatmapSet> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("empty heatmap batch".into()))?;
        let stack = |pick: fn(&HeatmapSet) -> &Tensor| -> Result<Tensor> {
            let shape = pick(first).shape().to_vec();
            let mut data = Vec::with_capacity(samples.len() * pick(first).numel());
            for s in samples {
                if pick(s).shape() != shape.as_slice() {
                    return Err(Error::Dimension {
                        op: "heatmap batch",
                        left: shape.clone(),
                        right: pick(s).shape().to_vec(),
                    });
                }
                data.extend_from_slice(pick(s).data());
            }
            let mut full = vec![samples.len()];
            full.extend_from_slice(&shape);
            Tensor::new(&full, data)
        };
        Ok(HeatmapSet {
            landmark: stack(|s| &s.landmark)?,
            boundary: stack(|s| &s.boundary)?,
        })
    }
}

/// Predicted maps on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeatmapPrediction {
    pub landmark: Var,
    pub boundary: Var,
}

/// Conv-BN-ReLU trunk, a stride-2 transposed convolution and two sibling
/// 1×1 output convolutions. Output resolution is twice the input's.
#[derive(Clone, Debug)]
pub struct Heads {
    conv: Conv2d,
    bn1: BatchNorm2d,
    up: ConvTranspose2d,
    bn2: BatchNorm2d,
    pub landmark: Conv2d,
    pub boundary: Conv2d,
}

impl Heads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        landmarks: usize,
        boundaries: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = channels;
        Ok(Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.trunk.conv"),
                c,
                c,
                3,
                1,
                1,
                Init::He,
                rng,
            )?,
            bn1: BatchNorm2d::new(store, &format!("{name}.trunk.bn1"), c)?,
            up: ConvTranspose2d::new(store, &format!("{name}.trunk.up"), c, c, 4, 2, 1, rng)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.trunk.bn2"), c)?,
            landmark: Conv2d::new(
                store,
                &format!("{name}.landmark"),
                c,
                landmarks,
                1,
                1,
                0,
                OUTPUT_INIT,
                rng,
            )?,
            boundary: Conv2d::new(
                store,
                &format!("{name}.boundary"),
                c,
                boundaries,
                1,
                1,
                0,
                OUTPUT_INIT,
                rng,
            )?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, feat: Var) -> Result<HeatmapPrediction> {
        let h = self.conv.forward(f, feat)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.tape.relu(h);
        let h = self.up.forward(f, h)?;
        let h = self.bn2.forward(f, h)?;
        let h = f.tape.relu(h);
        Ok(HeatmapPrediction {
            landmark: self.landmark.forward(f, h)?,
            boundary: self.boundary.forward(f, h)?,
        })
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "heatmap sigma must be positive, got {sigma}"
        )));
    }
    Ok(())
}

fn clamp_point(p: Point, h: usize, w: usize, clamped: &mut usize) -> Point {
    let x = p.x.clamp(0.0, (w - 1) as f64);
    let y = p.y.clamp(0.0, (h - 1) as f64);
    if x != p.x || y != p.y || !p.x.is_finite() || !p.y.is_finite() {
        *clamped += 1;
    }
    Point::new(
        if x.is_nan() { 0.0 } else { x },
        if y.is_nan() { 0.0 } else { y },
    )
}

/// Quantized pixel of a point, used as the Gaussian centre.
pub fn quantize(p: Point) -> (usize, usize) {
    (p.x.round().max(0.0) as usize, p.y.round().max(0.0) as usize)
}

/// One Gaussian per landmark centred on its rounded pixel, so the peak is
/// exactly 1. Points outside the map are clamped onto it and counted in
/// `clamped`.
pub fn render_landmark_heatmaps(
    points: &[Point],
    sigma: f64,
    h: usize,
    w: usize,
    clamped: &mut usize,
) -> Result<Tensor> {
    check_sigma(sigma)?;
    if points.is_empty() {
        return Err(Error::Config("no landmarks to render".into()));
    }
    let denom = 2.0 * sigma * sigma;
    let mut out = Tensor::zeros(&[points.len(), h, w]);
    let data = out.data_mut();
    for (i, &p) in points.iter().enumerate() {
        let (cx, cy) = quantize(clamp_point(p, h, w, clamped));
        let map = &mut data[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx as f64;
                let dy = y as f64 - cy as f64;
                map[y * w + x] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    Ok(out)
}

/// Distance from `p` to the segment `a`–`b`.
pub fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

/// One map per chain: a Gaussian of the distance to the polyline through
/// the chain's landmarks.
pub fn render_boundary_heatmaps(
    points: &[Point],
    chains: &[Vec<usize>],
    sigma: f64,
    h: usize,
    w: usize,
    clamped: &mut usize,
) -> Result<Tensor> {
    check_sigma(sigma)?;
    if chains.is_empty() {
        return Err(Error::Config("no boundary chains to render".into()));
    }
    let denom = 2.0 * sigma * sigma;
    let mut out = Tensor::zeros(&[chains.len(), h, w]);
    let data = out.data_mut();
    for (b, chain) in chains.iter().enumerate() {
        if chain.len() < 2 {
            return Err(Error::Config(format!(
                "boundary {b} has {} points, needs at least 2",
                chain.len()
            )));
        }
        let mut poly = Vec::with_capacity(chain.len());
        for &i in chain {
            let p = points.get(i).ok_or_else(|| {
                Error::Config(format!(
                    "boundary {b} references landmark {i} of {}",
                    points.len()
                ))
            })?;
            poly.push(clamp_point(*p, h, w, clamped));
        }
        let map = &mut data[b * h * w..(b + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let q = Point::new(x as f64, y as f64);
                let d = poly
                    .windows(2)
                    .map(|s| segment_distance(q, s[0], s[1]))
                    .fold(f64::INFINITY, f64::min);
                map[y * w + x] = (-(d * d) / denom).exp();
            }
        }
    }
    Ok(out)
}

/// `MSE(landmark) + MSE(boundary)`.
pub fn l2_loss(f: &mut Forward<'_>, pred: &HeatmapPrediction, gt: &HeatmapSet) -> Result<Var> {
    let lm = f.input(gt.landmark.clone());
    let bd = f.input(gt.boundary.clone());
    let a = f.tape.mse(pred.landmark, lm)?;
    let b = f.tape.mse(pred.boundary, bd)?;
    f.tape.add(a, b)
}

/// Writes a rank-4 tensor as four little-endian `i32` extents followed by
/// `f32` values.
pub fn write_heatmaps(path: &Path, maps: &Tensor) -> Result<()> {
    if maps.rank() != 4 {
        return Err(Error::Rank {
            op: "write_heatmaps",
            expected: 4,
            shape: maps.shape().to_vec(),
        });
    }
    let mut bytes = Vec::with_capacity(16 + 4 * maps.numel());
    for &d in maps.shape() {
        let d = i32::try_from(d).map_err(|_| Error::Contract(format!("extent {d} exceeds i32")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for &v in maps.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_heatmaps(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Contract(format!(
            "{} is too short for a heatmap header",
            path.display()
        )));
    }
    let mut shape = [0usize; 4];
    for (i, s) in shape.iter_mut().enumerate() {
        let d = i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        *s = usize::try_from(d).map_err(|_| Error::Contract(format!("negative extent {d}")))?;
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&shape, data)
}
