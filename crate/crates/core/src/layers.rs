//! Parameterized building blocks shared by the model components, and the
//! per-pass [`Forward`] context they run in.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gate::{GateDecision, GateMode};
use crate::numerics::{init, ParamId, ParamStore, Tape, Tensor, Var};

/// Behaviour switches for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    /// Batch norm uses batch statistics and updates running averages.
    pub batch_stats: bool,
    pub dropout: bool,
    pub gate: GateMode,
}

impl Mode {
    pub fn train() -> Self {
        Self {
            batch_stats: true,
            dropout: true,
            gate: GateMode::train(),
        }
    }

    pub fn eval() -> Self {
        Self {
            batch_stats: false,
            dropout: false,
            gate: GateMode::eval(),
        }
    }

    /// Deterministic differentiable mode for gradient checks: batch
    /// statistics, no dropout, noise-free gates on the given path.
    pub fn pinned(gate: GateMode) -> Self {
        Self {
            batch_stats: true,
            dropout: false,
            gate,
        }
    }
}

/// Gate decisions emitted by one DSA instance during a pass.
#[derive(Clone, Debug)]
pub struct GateRecord {
    pub dsa_index: usize,
    pub decisions: Vec<GateDecision>,
}

/// State threaded through a forward pass.
pub struct Forward<'a> {
    pub tape: Tape,
    pub params: &'a mut ParamStore,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
    pub gates: Vec<GateRecord>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a mut ParamStore, mode: Mode, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            params,
            mode,
            rng,
            gates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.mode.dropout || rate == 0.0 {
            return Ok(x);
        }
        self.tape.dropout(x, rate, self.rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    He,
    Lecun,
    Zeros,
    /// Zero-mean normal with a fixed standard deviation.
    Normal(f64),
}

fn initial(shape: &[usize], fan_in: usize, how: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match how {
        Init::He => init::he_normal(shape, fan_in, rng),
        Init::Lecun => init::lecun_normal(shape, fan_in, rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Normal(std) => init::normal(shape, std, rng),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        how: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            initial(&shape, cin * kernel * kernel, how, rng),
        )?;
        Ok(Self {
            weight,
            stride,
            pad,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        f.tape.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape = [cin, cout, kernel, kernel];
        // Each output pixel sees about cin * (kernel / stride)^2 inputs.
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            init::he_normal(&shape, fan_in, rng),
        )?;
        Ok(Self {
            weight,
            stride,
            pad,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        f.tape.conv_transpose2d(x, w, self.stride, self.pad)
    }
}

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store
                .add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        if f.mode.batch_stats {
            let (y, stats) = f.tape.batch_norm_train(x, gamma, beta)?;
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            let rm = f.params.value_mut(self.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let rv = f.params.value_mut(self.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
            }
            Ok(y)
        } else {
            let mean = f.params.value(self.running_mean).data().to_vec();
            let var = f.params.value(self.running_var).data().to_vec();
            f.tape.batch_norm_eval(x, gamma, beta, &mean, &var)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        f.tape.layer_norm(x, gamma, beta)
    }
}

/// Row-wise affine map `x · W (+ b)` over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        how: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            initial(&[din, dout], din, how, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[dout]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.tape.linear(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.tape.add_bias_last(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Pre-activation residual block: `x + conv(relu(bn(conv(relu(bn(x))))))`
/// with 3×3 convolutions and unchanged channel count.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub bn1: BatchNorm2d,
    pub conv1: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), channels)?,
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                1,
                Init::He,
                rng,
            )?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), channels)?,
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                1,
                Init::He,
                rng,
            )?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.bn1.forward(f, x)?;
        let h = f.tape.relu(h);
        let h = self.conv1.forward(f, h)?;
        let h = self.bn2.forward(f, h)?;
        let h = f.tape.relu(h);
        let h = self.conv2.forward(f, h)?;
        f.tape.add(x, h)
    }
}
