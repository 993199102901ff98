use super::shape::nchw;
use crate::error::{Error, Result};
use crate::numerics::tape::{Backward, GradSink, Tape, Var};
use crate::numerics::tensor::Tensor;

struct ScatterBack {
    input: Var,
    /// Source offset for each output element.
    argmax: Vec<usize>,
}
impl Backward for ScatterBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        if let Some(slot) = sink.slot(self.input) {
            for (g, &i) in grad.iter().zip(&self.argmax) {
                slot[i] += g;
            }
        }
    }
}

struct AvgPoolBack {
    input: Var,
    plane: usize,
}
impl Backward for AvgPoolBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let inv = 1.0 / self.plane as f64;
        if let Some(slot) = sink.slot(self.input) {
            for (p, g) in slot.chunks_exact_mut(self.plane).zip(grad) {
                p.iter_mut().for_each(|s| *s += g * inv);
            }
        }
    }
}

impl Tape {
    /// Non-overlapping max pooling with a `k × k` window.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self, "max_pool2d", x)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!(
                "max_pool2d window {k} does not tile {h}x{w}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + i * k * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let at = base + (i * k + di) * w + j * k + dj;
                            if src[at] > src[best] {
                                best = at;
                            }
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], data);
        Ok(self.push_op(value, &[x], ScatterBack { input: x, argmax }))
    }

    /// Global average over each channel plane: NCHW to `[N, C]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self, "adaptive_avg_pool", x)?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::from_parts(vec![n, c], data);
        Ok(self.push_op(value, &[x], AvgPoolBack { input: x, plane }))
    }

    /// Nearest-neighbour upsampling by an integer factor on both axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self, "upsample_nearest", x)?;
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut src_index = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    src_index.push(plane * h * w + (i / factor) * w + j / factor);
                }
            }
        }
        let src = self.value(x).data();
        let data = src_index.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_parts(vec![n, c, ho, wo], data);
        Ok(self.push_op(
            value,
            &[x],
            ScatterBack {
                input: x,
                argmax: src_index,
            },
        ))
    }
}
