//! Dynamic semantic-aware channel gating.
//!
//! A gate pools each sample's feature map into a channel descriptor `d`,
//! optionally perturbs it with unit Gaussian noise (`d' = d + ε`), and turns
//! it into a per-channel mask `d''` that multiplies the input channels.
//!
//! Two masks are derived from `d'`:
//!
//! * the soft gate `d_α = max(0, min(1, 1.2·σ(d') − 0.1))`, and
//! * the hard gate `d_β = 1[d' > 0]`.
//!
//! During training every sample independently takes the soft or the hard
//! gate with probability ½ each, and gradients arriving at the hard gate are
//! routed through the soft gate's derivative (straight-through). At
//! evaluation time there is no noise and every sample takes the hard gate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Forward, GateRecord};
use crate::numerics::ops::sigmoid;
use crate::numerics::{Backward, GradSink, Tape, Tensor, Var};

/// Which mask a sample used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatePath {
    Alpha,
    Beta,
    Eval,
}

/// One sample's gate vector and how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub gate: Vec<f64>,
    pub path: GatePath,
    pub noise_used: bool,
}

impl GateDecision {
    /// Fraction of channels switched on. Undefined for soft gates.
    pub fn activation_ratio(&self) -> Result<f64> {
        if self.path == GatePath::Alpha {
            return Err(Error::Contract(
                "activation ratio is undefined for a soft (alpha-path) gate".into(),
            ));
        }
        let on = self.gate.iter().filter(|&&g| g == 1.0).count();
        Ok(on as f64 / self.gate.len() as f64)
    }
}

/// Gate behaviour for a pass. The generator itself is owned by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateMode {
    pub training: bool,
    /// Add Gaussian noise to the descriptor (training only).
    pub noise: bool,
    /// Force every sample onto one path instead of the ½/½ split.
    pub pinned: Option<GatePath>,
}

impl GateMode {
    pub fn train() -> Self {
        Self {
            training: true,
            noise: true,
            pinned: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            noise: false,
            pinned: None,
        }
    }

    /// Training-mode gate without noise, fixed to `path`.
    pub fn pinned(path: GatePath) -> Self {
        Self {
            training: true,
            noise: false,
            pinned: Some(path),
        }
    }

    fn noise_on(&self) -> bool {
        self.training && self.noise
    }
}

pub fn saturating_sigmoid(v: f64) -> f64 {
    (1.2 * sigmoid(v) - 0.1).clamp(0.0, 1.0)
}

/// Derivative of [`saturating_sigmoid`]: zero where the clamp is active,
/// the interior value on the boundary itself.
pub fn saturating_sigmoid_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    let raw = 1.2 * s - 0.1;
    if (0.0..=1.0).contains(&raw) {
        1.2 * s * (1.0 - s)
    } else {
        0.0
    }
}

pub fn binary_activation(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Channel descriptor `d`: per-sample channel means, `[N, C]`.
pub fn pool_descriptor(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.adaptive_avg_pool(x)
}

/// `d' = d + ε` with ε ~ N(0, 1) drawn per entry when noise is on;
/// otherwise `d` itself.
pub fn add_noise(tape: &mut Tape, d: Var, mode: GateMode, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !mode.noise_on() {
        return Ok(d);
    }
    let noise = Tensor::from_fn(tape.shape(d), |_| StandardNormal.sample(rng));
    let noise = tape.constant(noise);
    tape.add(d, noise)
}

/// Draws each sample's path: ½/½ in training, hard gate at evaluation.
pub fn select_paths(samples: usize, mode: GateMode, rng: &mut ChaCha8Rng) -> Vec<GatePath> {
    if let Some(path) = mode.pinned {
        return vec![path; samples];
    }
    if !mode.training {
        return vec![GatePath::Eval; samples];
    }
    (0..samples)
        .map(|_| {
            if rng.random_bool(0.5) {
                GatePath::Alpha
            } else {
                GatePath::Beta
            }
        })
        .collect()
}

/// Combines precomputed soft and hard gates into per-sample decisions.
pub fn select_gate(
    d_alpha: &Tensor,
    d_beta: &Tensor,
    mode: GateMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GateDecision>> {
    if d_alpha.shape() != d_beta.shape() || d_alpha.rank() != 2 {
        return Err(Error::Dimension {
            op: "select_gate",
            left: d_alpha.shape().to_vec(),
            right: d_beta.shape().to_vec(),
        });
    }
    let c = d_alpha.shape()[1];
    let paths = select_paths(d_alpha.shape()[0], mode, rng);
    Ok(paths
        .into_iter()
        .enumerate()
        .map(|(n, path)| {
            let src = if path == GatePath::Alpha {
                d_alpha
            } else {
                d_beta
            };
            GateDecision {
                gate: src.data()[n * c..(n + 1) * c].to_vec(),
                path,
                noise_used: mode.noise_on(),
            }
        })
        .collect())
}

struct SemhashBack {
    input: Var,
}

impl Backward for SemhashBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let d = tape.value(self.input).data();
        if let Some(slot) = sink.slot(self.input) {
            // Both paths share the soft gate's Jacobian.
            for ((s, g), &v) in slot.iter_mut().zip(grad).zip(d) {
                *s += g * saturating_sigmoid_grad(v);
            }
        }
    }
}

impl Tape {
    /// Per-sample gate `d''` from the noisy descriptor `d'` (`[N, C]`):
    /// soft gate on alpha rows, hard gate elsewhere, with the soft gate's
    /// derivative on every row.
    pub fn semhash(&mut self, d_noisy: Var, paths: &[GatePath]) -> Result<Var> {
        let shape = self.shape(d_noisy).to_vec();
        if shape.len() != 2 || shape[0] != paths.len() {
            return Err(Error::Dimension {
                op: "semhash",
                left: shape,
                right: vec![paths.len()],
            });
        }
        let c = shape[1];
        let data = self
            .value(d_noisy)
            .data()
            .chunks_exact(c)
            .zip(paths)
            .flat_map(|(row, path)| {
                row.iter().map(move |&v| match path {
                    GatePath::Alpha => saturating_sigmoid(v),
                    GatePath::Beta | GatePath::Eval => binary_activation(v),
                })
            })
            .collect();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push_op(value, &[d_noisy], SemhashBack { input: d_noisy }))
    }
}

/// `X' = X * d''`, scaling each channel plane by its gate entry.
pub fn apply_gate(tape: &mut Tape, x: Var, gate: Var) -> Result<Var> {
    tape.channel_mask(x, gate)
}

/// Intermediate values of one gate application.
#[derive(Clone, Copy, Debug)]
pub struct GateTrace {
    pub descriptor: Var,
    pub noisy: Var,
    pub gate: Var,
    pub output: Var,
}

/// A parameter-free gate instance at a fixed position in the model.
#[derive(Clone, Copy, Debug)]
pub struct DsaGate {
    pub index: usize,
}

impl DsaGate {
    pub fn new(index: usize) -> Self {
        Self { index }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        Ok(self.trace(f, x)?.output)
    }

    /// Forward pass exposing the descriptor, noisy descriptor and gate.
    pub fn trace(&self, f: &mut Forward<'_>, x: Var) -> Result<GateTrace> {
        let mode = f.mode.gate;
        let descriptor = pool_descriptor(&mut f.tape, x)?;
        let noisy = add_noise(&mut f.tape, descriptor, mode, f.rng)?;
        let paths = select_paths(f.tape.shape(noisy)[0], mode, f.rng);
        let gate = f.tape.semhash(noisy, &paths)?;
        let output = apply_gate(&mut f.tape, x, gate)?;

        let c = f.tape.shape(gate)[1];
        let decisions = f
            .tape
            .value(gate)
            .data()
            .chunks_exact(c)
            .zip(&paths)
            .map(|(g, &path)| GateDecision {
                gate: g.to_vec(),
                path,
                noise_used: mode.noise_on(),
            })
            .collect();
        f.gates.push(GateRecord {
            dsa_index: self.index,
            decisions,
        });
        Ok(GateTrace {
            descriptor,
            noisy,
            gate,
            output,
        })
    }
}
