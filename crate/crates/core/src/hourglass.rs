//! The four-scale hourglass with cross-channel attention between encoder
//! and decoder.
//!
//! Encoder: `Y_0 = block_0(x)`, `Y_t = block_t(maxpool(Y_{t-1}))`.
//! Decoder: starting from `D̄_3`, `u = up(block(u)) + D̄_t` for `t = 2, 1, 0`.
//! There are no plain skip connections; `D̄_t` already contains `Y_t`.

use rand_chacha::ChaCha8Rng;

use crate::cca::{CcaConfig, CrossChannelAttention, SCALES};
use crate::error::{Error, Result};
use crate::layers::{Forward, ResidualBlock};
use crate::numerics::{ParamStore, Var};

/// Encoder outputs `Y_0..Y_3`, each `[N, C, H/2^t, W/2^t]`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub scales: [Var; SCALES],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DssConfig {
    pub channels: usize,
    /// Input extent `(H, W)`; both must be divisible by 8.
    pub size: (usize, usize),
    /// `None` runs the plain hourglass with `D̄_t = Y_t`.
    pub cca: Option<CcaConfig>,
    /// Token dropout inside the attention module.
    pub dropout: f64,
}

impl DssConfig {
    pub fn new(
        channels: usize,
        size: (usize, usize),
        cca: Option<CcaConfig>,
        dropout: f64,
    ) -> Self {
        Self {
            channels,
            size,
            cca,
            dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if self.channels == 0 {
            return Err(Error::Config("hourglass needs at least one channel".into()));
        }
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "hourglass input {h}x{w} must have extents divisible by 8"
            )));
        }
        if let Some(cca) = &self.cca {
            cca.validate()?;
        }
        Ok(())
    }

    /// Token grid of the coarsest scale.
    pub fn grid(&self) -> (usize, usize) {
        (self.size.0 / 8, self.size.1 / 8)
    }
}

#[derive(Clone, Debug)]
pub struct DssModel {
    pub cfg: DssConfig,
    pub encoder: Vec<ResidualBlock>,
    pub decoder: Vec<ResidualBlock>,
    pub cca: Option<CrossChannelAttention>,
}

impl DssModel {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: DssConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let encoder = (0..SCALES)
            .map(|t| ResidualBlock::new(store, &format!("{name}.enc{t}"), c, rng))
            .collect::<Result<Vec<_>>>()?;
        let cca = match cfg.cca {
            Some(cca_cfg) => Some(CrossChannelAttention::new(
                store,
                &format!("{name}.cca"),
                c,
                cfg.grid(),
                cca_cfg,
                cfg.dropout,
                rng,
            )?),
            None => None,
        };
        let decoder = (0..SCALES - 1)
            .map(|t| ResidualBlock::new(store, &format!("{name}.dec{t}"), c, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            encoder,
            decoder,
            cca,
        })
    }

    fn check_input(&self, f: &Forward<'_>, x: Var) -> Result<()> {
        let shape = f.tape.shape(x);
        if shape.len() != 4 {
            return Err(Error::Rank {
                op: "encode",
                expected: 4,
                shape: shape.to_vec(),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "hourglass input {h}x{w} must have extents divisible by 8"
            )));
        }
        if shape[1] != self.cfg.channels || (h, w) != self.cfg.size {
            return Err(Error::Dimension {
                op: "encode",
                left: shape.to_vec(),
                right: vec![
                    shape[0],
                    self.cfg.channels,
                    self.cfg.size.0,
                    self.cfg.size.1,
                ],
            });
        }
        Ok(())
    }

    pub fn encode(&self, f: &mut Forward<'_>, x: Var) -> Result<PyramidFeatures> {
        self.check_input(f, x)?;
        let mut scales = [x; SCALES];
        let mut h = x;
        for (t, block) in self.encoder.iter().enumerate() {
            if t > 0 {
                h = f.tape.max_pool2d(h, 2)?;
            }
            h = block.forward(f, h)?;
            scales[t] = h;
        }
        Ok(PyramidFeatures { scales })
    }

    /// Bottom-up decoder fed by the injected maps.
    pub fn decode(&self, f: &mut Forward<'_>, injected: &[Var; SCALES]) -> Result<Var> {
        let mut u = injected[SCALES - 1];
        for t in (0..SCALES - 1).rev() {
            let h = self.decoder[t].forward(f, u)?;
            let h = f.tape.upsample_nearest(h, 2)?;
            if f.tape.shape(h) != f.tape.shape(injected[t]) {
                return Err(Error::Dimension {
                    op: "decode",
                    left: f.tape.shape(h).to_vec(),
                    right: f.tape.shape(injected[t]).to_vec(),
                });
            }
            u = f.tape.add(h, injected[t])?;
        }
        Ok(u)
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.encode(f, x)?;
        let injected = match &self.cca {
            Some(cca) => cca.forward(f, &y)?,
            None => y.scales,
        };
        self.decode(f, &injected)
    }
}
