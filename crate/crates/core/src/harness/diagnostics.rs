//! Whole-model gradient check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::build_model;
use super::synth::{generate_set, Mix};
use super::train::{batch_images, targets};
use crate::error::Result;
use crate::gate::{GateMode, GatePath};
use crate::heads::HeatmapSet;
use crate::layers::{Forward, Mode};
use crate::numerics::{grad_check, GradCheckReport};

/// Smallest configuration the model supports: 16×16 images, 4 channels,
/// one gated stack, one attention block with two heads.
pub fn grad_check_config() -> TrainConfig {
    TrainConfig {
        image_size: 16,
        heatmap_size: 16,
        channels: 4,
        stacks: 1,
        dsa_placement: vec![0],
        cca_depth: 1,
        cca_heads: 2,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

/// Central-difference check of every trainable parameter of the model built
/// from `cfg`, on a batch of `cfg.batch_size` synthetic samples. Gates run
/// noise-free on the alpha path and batch norm uses batch statistics, so the
/// loss is a smooth deterministic function of the parameters.
pub fn model_grad_check(cfg: &TrainConfig, eps: f64, tol: f64) -> Result<(usize, GradCheckReport)> {
    let (mut store, model) = build_model(cfg)?;
    let samples = generate_set(
        cfg.seed,
        cfg.batch_size.max(1),
        &Mix::default(),
        cfg.image_size,
    )?;
    let refs: Vec<_> = samples.iter().collect();
    let images = batch_images(&refs)?;
    let sets = samples
        .iter()
        .map(|s| targets(s, cfg).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    let gt = HeatmapSet::batch(&sets)?;
    let count = store.trainable_scalars();
    let buffers: Vec<_> = store.ids().filter(|&id| !store.is_trainable(id)).collect();
    let frozen: Vec<_> = buffers.iter().map(|&id| store.value(id).clone()).collect();
    let mode = Mode::pinned(GateMode::pinned(GatePath::Alpha));
    let report = grad_check(
        &mut store,
        |store| {
            // Running statistics are restored so every evaluation sees the
            // same store.
            for (&id, t) in buffers.iter().zip(&frozen) {
                *store.value_mut(id) = t.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut f = Forward::new(store, mode, &mut rng);
            let x = f.input(images.clone());
            let preds = model.forward(&mut f, x)?;
            let loss = model.loss(&mut f, &preds, &gt)?;
            Ok((f.tape, loss))
        },
        eps,
        tol,
    )?;
    Ok((count, report))
}
