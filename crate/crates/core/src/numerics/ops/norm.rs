use super::shape::nchw;
use crate::error::{Error, Result};
use crate::numerics::tape::{Backward, GradSink, Tape, Var};
use crate::numerics::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over the normalized group.
    pub var: Vec<f64>,
    /// Number of elements per channel.
    pub count: usize,
}

struct BatchNormBack {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: usize,
    channels: usize,
    plane: usize,
}

impl Backward for BatchNormBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let (c_n, p) = (self.channels, self.plane);
        let m = (self.batch * p) as f64;
        let mut sum_dy = vec![0.0; c_n];
        let mut sum_dy_xhat = vec![0.0; c_n];
        for n in 0..self.batch {
            for c in 0..c_n {
                let base = (n * c_n + c) * p;
                for i in base..base + p {
                    sum_dy[c] += grad[i];
                    sum_dy_xhat[c] += grad[i] * self.xhat[i];
                }
            }
        }
        sink.add(self.beta, &sum_dy);
        sink.add(self.gamma, &sum_dy_xhat);
        if let Some(slot) = sink.slot(self.x) {
            let gamma = tape.value(self.gamma).data();
            for n in 0..self.batch {
                for c in 0..c_n {
                    let k = gamma[c] * self.inv_std[c] / m;
                    let base = (n * c_n + c) * p;
                    for i in base..base + p {
                        slot[i] += k * (m * grad[i] - sum_dy[c] - self.xhat[i] * sum_dy_xhat[c]);
                    }
                }
            }
        }
    }
}

struct AffineChannelBack {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    plane: usize,
}

impl Backward for AffineChannelBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let (c_n, p) = (self.channels, self.plane);
        let mut sum_dy = vec![0.0; c_n];
        let mut sum_dy_xhat = vec![0.0; c_n];
        for (i, g) in grad.iter().enumerate() {
            let c = (i / p) % c_n;
            sum_dy[c] += g;
            sum_dy_xhat[c] += g * self.xhat[i];
        }
        sink.add(self.beta, &sum_dy);
        sink.add(self.gamma, &sum_dy_xhat);
        if let Some(slot) = sink.slot(self.x) {
            let gamma = tape.value(self.gamma).data();
            for (i, (s, g)) in slot.iter_mut().zip(grad).enumerate() {
                let c = (i / p) % c_n;
                *s += g * gamma[c] * self.inv_std[c];
            }
        }
    }
}

struct LayerNormBack {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    width: usize,
}

impl Backward for LayerNormBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let d = self.width;
        let gamma = tape.value(self.gamma).data().to_vec();
        if sink.wants(self.gamma) || sink.wants(self.beta) {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for (gr, xh) in grad.chunks_exact(d).zip(self.xhat.chunks_exact(d)) {
                for j in 0..d {
                    dg[j] += gr[j] * xh[j];
                    db[j] += gr[j];
                }
            }
            sink.add(self.gamma, &dg);
            sink.add(self.beta, &db);
        }
        if let Some(slot) = sink.slot(self.x) {
            let mut dxhat = vec![0.0; d];
            for (r, ((s, gr), xh)) in slot
                .chunks_exact_mut(d)
                .zip(grad.chunks_exact(d))
                .zip(self.xhat.chunks_exact(d))
                .enumerate()
            {
                let mut sum = 0.0;
                let mut sum_x = 0.0;
                for j in 0..d {
                    dxhat[j] = gr[j] * gamma[j];
                    sum += dxhat[j];
                    sum_x += dxhat[j] * xh[j];
                }
                let k = self.inv_std[r] / d as f64;
                for j in 0..d {
                    s[j] += k * (d as f64 * dxhat[j] - sum - xh[j] * sum_x);
                }
            }
        }
    }
}

fn check_affine(
    tape: &Tape,
    op: &'static str,
    x: Var,
    gamma: Var,
    beta: Var,
    width: usize,
) -> Result<()> {
    for v in [gamma, beta] {
        if tape.shape(v) != [width] {
            return Err(Error::Dimension {
                op,
                left: tape.shape(x).to_vec(),
                right: tape.shape(v).to_vec(),
            });
        }
    }
    Ok(())
}

impl Tape {
    /// Batch normalization over `(N, H, W)` per channel using the batch's own
    /// statistics. Returns the output and those statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let [n, c_n, h, w] = nchw(self, "batch_norm", x)?;
        check_affine(self, "batch_norm", x, gamma, beta, c_n)?;
        let p = h * w;
        let m = (n * p) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c_n];
        let mut var = vec![0.0; c_n];
        for b in 0..n {
            for c in 0..c_n {
                let base = (b * c_n + c) * p;
                mean[c] += xv[base..base + p].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for c in 0..c_n {
                let base = (b * c_n + c) * p;
                var[c] += xv[base..base + p]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, &v) in xv.iter().enumerate() {
            let c = (i / p) % c_n;
            xhat[i] = (v - mean[c]) * inv_std[c];
            out[i] = g[c] * xhat[i] + bt[c];
        }
        let value = Tensor::from_parts(vec![n, c_n, h, w], out);
        let stats = BatchStats {
            mean,
            var,
            count: n * p,
        };
        let y = self.push_op(
            value,
            &[x, gamma, beta],
            BatchNormBack {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: n,
                channels: c_n,
                plane: p,
            },
        );
        Ok((y, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let [n, c_n, h, w] = nchw(self, "batch_norm", x)?;
        check_affine(self, "batch_norm", x, gamma, beta, c_n)?;
        if mean.len() != c_n || var.len() != c_n {
            return Err(Error::Dimension {
                op: "batch_norm",
                left: vec![c_n],
                right: vec![mean.len(), var.len()],
            });
        }
        let p = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, &v) in xv.iter().enumerate() {
            let c = (i / p) % c_n;
            xhat[i] = (v - mean[c]) * inv_std[c];
            out[i] = g[c] * xhat[i] + bt[c];
        }
        let value = Tensor::from_parts(vec![n, c_n, h, w], out);
        Ok(self.push_op(
            value,
            &[x, gamma, beta],
            AffineChannelBack {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c_n,
                plane: p,
            },
        ))
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        check_affine(self, "layer_norm", x, gamma, beta, d)?;
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (row[j] - mean) * inv;
                out[i] = g[j] * xhat[i] + bt[j];
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push_op(
            value,
            &[x, gamma, beta],
            LayerNormBack {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                width: d,
            },
        ))
    }
}
