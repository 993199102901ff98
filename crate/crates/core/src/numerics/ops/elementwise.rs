use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Backward, GradSink, Tape, Var};
use crate::numerics::tensor::Tensor;

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn zip_with(tape: &Tape, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (x, y) = (tape.value(a), tape.value(b));
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &q)| f(p, q))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

struct AddBack(Var, Var);
impl Backward for AddBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        sink.add(self.0, grad);
        sink.add(self.1, grad);
    }
}

struct SubBack(Var, Var);
impl Backward for SubBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        sink.add(self.0, grad);
        if let Some(slot) = sink.slot(self.1) {
            slot.iter_mut().zip(grad).for_each(|(s, g)| *s -= g);
        }
    }
}

struct MulBack(Var, Var);
impl Backward for MulBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let (a, b) = (tape.value(self.0).data(), tape.value(self.1).data());
        if let Some(slot) = sink.slot(self.0) {
            for ((s, g), y) in slot.iter_mut().zip(grad).zip(b) {
                *s += g * y;
            }
        }
        if let Some(slot) = sink.slot(self.1) {
            for ((s, g), x) in slot.iter_mut().zip(grad).zip(a) {
                *s += g * x;
            }
        }
    }
}

struct ScaleBack(Var, f64);
impl Backward for ScaleBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        if let Some(slot) = sink.slot(self.0) {
            slot.iter_mut()
                .zip(grad)
                .for_each(|(s, g)| *s += g * self.1);
        }
    }
}

/// Shared by ReLU, sigmoid, dropout and other elementwise maps whose local
/// derivative is precomputed at forward time.
struct LocalGradBack {
    input: Var,
    local: Vec<f64>,
}
impl Backward for LocalGradBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        if let Some(slot) = sink.slot(self.input) {
            for ((s, g), d) in slot.iter_mut().zip(grad).zip(&self.local) {
                *s += g * d;
            }
        }
    }
}

struct BiasLastBack {
    x: Var,
    bias: Var,
}
impl Backward for BiasLastBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        sink.add(self.x, grad);
        let width = tape.value(self.bias).numel();
        if let Some(slot) = sink.slot(self.bias) {
            for row in grad.chunks_exact(width) {
                slot.iter_mut().zip(row).for_each(|(s, g)| *s += g);
            }
        }
    }
}

struct BroadcastLeadingBack {
    x: Var,
    y: Var,
}
impl Backward for BroadcastLeadingBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        sink.add(self.x, grad);
        let inner = tape.value(self.y).numel();
        if let Some(slot) = sink.slot(self.y) {
            for chunk in grad.chunks_exact(inner) {
                slot.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
            }
        }
    }
}

struct ChannelMaskBack {
    x: Var,
    gate: Var,
    plane: usize,
}
impl Backward for ChannelMaskBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let g = tape.value(self.gate).data();
        if let Some(slot) = sink.slot(self.x) {
            for (k, (s, gr)) in slot
                .chunks_exact_mut(self.plane)
                .zip(grad.chunks_exact(self.plane))
                .enumerate()
            {
                s.iter_mut().zip(gr).for_each(|(s, gr)| *s += gr * g[k]);
            }
        }
        if sink.wants(self.gate) {
            let x = tape.value(self.x).data();
            let local: Vec<f64> = x
                .chunks_exact(self.plane)
                .zip(grad.chunks_exact(self.plane))
                .map(|(xp, gp)| xp.iter().zip(gp).map(|(a, b)| a * b).sum())
                .collect();
            sink.add(self.gate, &local);
        }
    }
}

struct SumBack(Var, f64);
impl Backward for SumBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let g = grad[0] * self.1;
        if let Some(slot) = sink.slot(self.0) {
            slot.iter_mut().for_each(|s| *s += g);
        }
    }
}

struct MseBack(Var, Var);
impl Backward for MseBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let (a, b) = (tape.value(self.0).data(), tape.value(self.1).data());
        let scale = 2.0 * grad[0] / a.len() as f64;
        if let Some(slot) = sink.slot(self.0) {
            for ((s, x), y) in slot.iter_mut().zip(a).zip(b) {
                *s += scale * (x - y);
            }
        }
        if let Some(slot) = sink.slot(self.1) {
            for ((s, x), y) in slot.iter_mut().zip(a).zip(b) {
                *s -= scale * (x - y);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let value = zip_with(self, a, b, |x, y| x + y);
        Ok(self.push_op(value, &[a, b], AddBack(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let value = zip_with(self, a, b, |x, y| x - y);
        Ok(self.push_op(value, &[a, b], SubBack(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let value = zip_with(self, a, b, |x, y| x * y);
        Ok(self.push_op(value, &[a, b], MulBack(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push_op(value, &[a], ScaleBack(a, factor))
    }

    /// Sum of several same-shape values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x.map(|v| v.max(0.0));
        let local = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.push_op(value, &[a], LocalGradBack { input: a, local })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let local = value.data().iter().map(|&s| s * (1.0 - s)).collect();
        self.push_op(value, &[a], LocalGradBack { input: a, local })
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let local: Vec<f64> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&local).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push_op(value, &[a], LocalGradBack { input: a, local }))
    }

    /// `x[..., j] + bias[j]` for a bias of the trailing extent.
    pub fn add_bias_last(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap();
        if self.shape(bias) != [width] {
            return Err(Error::Dimension {
                op: "add_bias_last",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            row.iter_mut().zip(&b).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push_op(value, &[x, bias], BiasLastBack { x, bias }))
    }

    /// `x[n, ...] + y[...]`: adds `y` to every leading-axis slice of `x`.
    pub fn add_broadcast_leading(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.shape(x).len() < 2 || self.shape(x)[1..] != *self.shape(y) {
            return Err(Error::Dimension {
                op: "add_broadcast_leading",
                left: self.shape(x).to_vec(),
                right: self.shape(y).to_vec(),
            });
        }
        let yv = self.value(y).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_exact_mut(yv.len()) {
            chunk.iter_mut().zip(&yv).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push_op(value, &[x, y], BroadcastLeadingBack { x, y }))
    }

    /// Multiplies each `(n, c)` plane of an NCHW tensor by `gate[n, c]`.
    pub fn channel_mask(&mut self, x: Var, gate: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Rank {
                op: "channel_mask",
                expected: 4,
                shape,
            });
        }
        if self.shape(gate) != [shape[0], shape[1]] {
            return Err(Error::Dimension {
                op: "channel_mask",
                left: shape,
                right: self.shape(gate).to_vec(),
            });
        }
        let plane = shape[2] * shape[3];
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .zip(g)
            .flat_map(|(p, &k)| p.iter().map(move |v| v * k))
            .collect();
        let value = Tensor::from_parts(shape, data);
        Ok(self.push_op(value, &[x, gate], ChannelMaskBack { x, gate, plane }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, &[a], SumBack(a, 1.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.push_op(value, &[a], SumBack(a, 1.0 / n))
    }

    /// Mean squared error between two same-shape values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let total: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        let value = Tensor::scalar(total / x.len() as f64);
        Ok(self.push_op(value, &[a, b], MseBack(a, b)))
    }
}
