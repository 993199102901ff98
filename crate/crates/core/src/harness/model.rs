//! Full landmark model: preprocessing, gated hourglass stacks and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gate::DsaGate;
use crate::heads::{l2_loss, Heads, HeatmapPrediction, HeatmapSet};
use crate::hourglass::{DssConfig, DssModel};
use crate::layers::{BatchNorm2d, Conv2d, Forward, Init, ResidualBlock};
use crate::numerics::{ParamStore, Var};

/// `conv7×7 → BN → ReLU → maxpool → residual block`, reducing the image to
/// the feature grid.
#[derive(Clone, Debug)]
pub struct Preprocess {
    conv: Conv2d,
    bn: BatchNorm2d,
    pool: usize,
    block: ResidualBlock,
}

impl Preprocess {
    fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (stride, pool) = match cfg.downsample() {
            4 => (2, 2),
            2 => (2, 1),
            1 => (1, 1),
            f => {
                return Err(Error::Config(format!(
                    "unsupported downsampling factor {f}"
                )))
            }
        };
        let c = cfg.channels;
        Ok(Self {
            conv: Conv2d::new(store, "pre.conv", 1, c, 7, stride, 3, Init::He, rng)?,
            bn: BatchNorm2d::new(store, "pre.bn", c)?,
            pool,
            block: ResidualBlock::new(store, "pre.block", c, rng)?,
        })
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.conv.forward(f, x)?;
        let h = self.bn.forward(f, h)?;
        let mut h = f.tape.relu(h);
        if self.pool > 1 {
            h = f.tape.max_pool2d(h, self.pool)?;
        }
        self.block.forward(f, h)
    }
}

#[derive(Clone, Debug)]
pub struct Stack {
    pub gate: Option<DsaGate>,
    pub dss: DssModel,
    pub heads: Heads,
}

#[derive(Clone, Debug)]
pub struct DsatModel {
    pub cfg: TrainConfig,
    pub preprocess: Preprocess,
    pub stacks: Vec<Stack>,
}

impl DsatModel {
    /// Registers every parameter in `store`, drawing initial values from
    /// `rng`.
    pub fn new(cfg: &TrainConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let preprocess = Preprocess::new(store, cfg, rng)?;
        let grid = cfg.feature_size();
        let dss_cfg = DssConfig::new(
            cfg.channels,
            (grid, grid),
            cfg.enable_cca.then(|| cfg.cca()),
            cfg.dropout,
        );
        let mut stacks = Vec::with_capacity(cfg.stacks);
        for i in 0..cfg.stacks {
            stacks.push(Stack {
                gate: cfg.gated(i).then(|| DsaGate::new(i)),
                dss: DssModel::new(store, &format!("stack{i}.dss"), dss_cfg, rng)?,
                heads: Heads::new(
                    store,
                    &format!("stack{i}.heads"),
                    cfg.channels,
                    cfg.landmarks,
                    cfg.boundaries,
                    rng,
                )?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            preprocess,
            stacks,
        })
    }

    /// Predictions of every stack for `images` (`N×1×S×S`).
    pub fn forward(&self, f: &mut Forward<'_>, images: Var) -> Result<Vec<HeatmapPrediction>> {
        let shape = f.tape.shape(images);
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Dimension {
                op: "model input",
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(0), 1, s, s],
            });
        }
        let mut x = self.preprocess.forward(f, images)?;
        let mut out = Vec::with_capacity(self.stacks.len());
        for stack in &self.stacks {
            if let Some(gate) = &stack.gate {
                x = gate.forward(f, x)?;
            }
            x = stack.dss.forward(f, x)?;
            out.push(stack.heads.forward(f, x)?);
        }
        Ok(out)
    }

    /// Sum over stacks of the heatmap loss.
    pub fn loss(
        &self,
        f: &mut Forward<'_>,
        preds: &[HeatmapPrediction],
        gt: &HeatmapSet,
    ) -> Result<Var> {
        let terms = preds
            .iter()
            .map(|p| l2_loss(f, p, gt))
            .collect::<Result<Vec<_>>>()?;
        f.tape.add_all(&terms)
    }
}

/// Random stream used for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds the model and a fresh parameter store seeded by `cfg.seed`.
pub fn build_model(cfg: &TrainConfig) -> Result<(ParamStore, DsatModel)> {
    let mut store = ParamStore::new();
    let model = DsatModel::new(cfg, &mut store, &mut init_rng(cfg.seed))?;
    Ok((store, model))
}
