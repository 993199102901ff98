//! The four ablation variants and a seed sweep over them.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::evaluate::evaluate;
use super::model::build_model;
use super::synth::{generate_set, Mix, SyntheticSample};
use super::train::train;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain stacked hourglass.
    #[serde(rename = "shn")]
    Shn,
    #[serde(rename = "shn+dsa")]
    ShnDsa,
    #[serde(rename = "shn+dss")]
    ShnDss,
    #[serde(rename = "dsat")]
    Dsat,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Shn,
        Variant::ShnDsa,
        Variant::ShnDss,
        Variant::Dsat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Shn => "shn",
            Variant::ShnDsa => "shn+dsa",
            Variant::ShnDss => "shn+dss",
            Variant::Dsat => "dsat",
        }
    }

    /// `cfg` with the gate and attention switches of this variant.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        out.enable_dsa = matches!(self, Variant::ShnDsa | Variant::Dsat);
        out.enable_cca = matches!(self, Variant::ShnDss | Variant::Dsat);
        out
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub seed: u64,
    pub nme: f64,
    pub failure_rate: f64,
    pub final_loss: f64,
}

/// Training and held-out sets for a seed. The held-out set uses a disjoint
/// seed range.
pub fn ablation_data(
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let mix = Mix::default();
    let train = generate_set(seed, cfg.train_samples, &mix, cfg.image_size)?;
    let heldout = generate_set(
        seed ^ 0x5E_ED0F_4E1D_0000,
        cfg.heldout_samples.max(1),
        &mix,
        cfg.image_size,
    )?;
    Ok((train, heldout))
}

/// Trains and evaluates every variant for every seed. Within one seed all
/// variants share data and initialization seed.
pub fn run_ablation(
    cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for &seed in seeds {
        let (train_set, heldout) = ablation_data(cfg, seed)?;
        for &variant in variants {
            let mut vcfg = variant.apply(cfg);
            vcfg.seed = seed;
            let (mut store, model) = build_model(&vcfg)?;
            let outcome = train(&vcfg, &model, &mut store, &train_set, |_, _| {})?;
            let report = evaluate(&vcfg, &model, &mut store, &heldout)?;
            let result = AblationResult {
                variant,
                seed,
                nme: report.overall.nme,
                failure_rate: report.overall.failure_rate,
                final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
            };
            progress(&result);
            results.push(result);
        }
    }
    Ok(results)
}

/// Mean NME of each variant over seeds, in `variants` order.
pub fn mean_nme(results: &[AblationResult], variants: &[Variant]) -> Vec<(Variant, f64)> {
    variants
        .iter()
        .map(|&v| {
            let xs: Vec<f64> = results
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| r.nme)
                .collect();
            (v, xs.iter().sum::<f64>() / xs.len().max(1) as f64)
        })
        .collect()
}
