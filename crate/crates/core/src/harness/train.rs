//! Adam training with step-halving learning rate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::augment;
use super::config::TrainConfig;
use super::model::DsatModel;
use super::synth::SyntheticSample;
use crate::error::{Error, Result};
use crate::heads::{render_boundary_heatmaps, render_landmark_heatmaps, HeatmapSet};
use crate::landmarks::{face, Point};
use crate::layers::{Forward, Mode};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Landmarks in heatmap pixel coordinates.
pub fn heatmap_points(sample: &SyntheticSample, cfg: &TrainConfig) -> Vec<Point> {
    let scale = cfg.heatmap_size as f64 / sample.image_size() as f64;
    sample
        .landmarks
        .points
        .iter()
        .map(|p| p.scale(scale))
        .collect()
}

/// Ground-truth landmark and boundary maps of one sample. Returns the
/// number of clamped points alongside.
pub fn targets(sample: &SyntheticSample, cfg: &TrainConfig) -> Result<(HeatmapSet, usize)> {
    let points = heatmap_points(sample, cfg);
    let h = cfg.heatmap_size;
    let mut clamped = 0;
    let landmark = render_landmark_heatmaps(&points, cfg.sigma_gt, h, h, &mut clamped)?;
    let boundary = render_boundary_heatmaps(
        &points,
        &face::boundaries(),
        cfg.sigma_gt,
        h,
        h,
        &mut clamped,
    )?;
    Ok((HeatmapSet { landmark, boundary }, clamped))
}

/// Stacks sample images into `N×1×S×S`.
pub fn batch_images(samples: &[&SyntheticSample]) -> Result<Tensor> {
    let s = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?
        .image_size();
    let mut data = Vec::with_capacity(samples.len() * s * s);
    for x in samples {
        if x.image_size() != s {
            return Err(Error::Contract("mixed image sizes in one batch".into()));
        }
        data.extend_from_slice(x.image.data());
    }
    Tensor::new(&[samples.len(), 1, s, s], data)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|p| p.value.numel()).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected update of every trainable parameter from its
    /// accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let k = id.index();
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    /// Landmarks clamped onto the heatmap while rendering targets.
    pub clamped: usize,
}

/// Random streams of a training run.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Trains `store` in place for `cfg.iterations` steps. Each epoch visits
/// the samples in a fresh random order; `on_step` sees every iteration's
/// loss. A non-finite loss aborts with [`Error::Diverged`] and leaves
/// `store` at the parameters (and batch-norm statistics) that produced the
/// last finite loss.
pub fn train(
    cfg: &TrainConfig,
    model: &DsatModel,
    store: &mut ParamStore,
    samples: &[SyntheticSample],
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let mut outcome = TrainOutcome::default();
    let mut cached = Vec::with_capacity(samples.len());
    if !cfg.augment {
        for s in samples {
            let (t, c) = targets(s, cfg)?;
            outcome.clamped += c;
            cached.push(t);
        }
    }
    let mut order_rng = stream(cfg.seed, 1);
    let mut forward_rng = stream(cfg.seed, 2);
    let mut augment_rng = stream(cfg.seed, 3);
    let mut adam = Adam::new(cfg, store);
    let ids: Vec<ParamId> = store.ids().collect();
    let snapshot = |store: &ParamStore| -> Vec<Tensor> {
        ids.iter().map(|&id| store.value(id).clone()).collect()
    };
    let mut last_good: Option<Vec<Tensor>> = None;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for iteration in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, order_rng.random_range(0..=i));
                }
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let (images, gt) = if cfg.augment {
            let augmented: Vec<SyntheticSample> = batch
                .iter()
                .map(|&i| augment(&samples[i], &mut augment_rng))
                .collect();
            let mut sets = Vec::with_capacity(augmented.len());
            for s in &augmented {
                let (t, c) = targets(s, cfg)?;
                outcome.clamped += c;
                sets.push(t);
            }
            (
                batch_images(&augmented.iter().collect::<Vec<_>>())?,
                HeatmapSet::batch(&sets)?,
            )
        } else {
            let refs: Vec<&SyntheticSample> = batch.iter().map(|&i| &samples[i]).collect();
            let sets: Vec<HeatmapSet> = batch.iter().map(|&i| cached[i].clone()).collect();
            (batch_images(&refs)?, HeatmapSet::batch(&sets)?)
        };

        let current = snapshot(store);
        store.zero_grads();
        let mut f = Forward::new(store, Mode::train(), &mut forward_rng);
        let x = f.input(images);
        let loss = match model
            .forward(&mut f, x)
            .and_then(|preds| model.loss(&mut f, &preds, &gt))
        {
            Ok(loss) => Some(loss),
            Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };
        let tape = f.tape;
        let value = loss.map_or(f64::NAN, |l| tape.value(l).data()[0]);
        let loss = match loss {
            Some(l) if value.is_finite() => l,
            _ => {
                drop(tape);
                for (&id, t) in ids.iter().zip(last_good.unwrap_or(current)) {
                    *store.value_mut(id) = t;
                }
                return Err(Error::Diverged {
                    iteration,
                    loss: value,
                });
            }
        };
        tape.backward(loss)?.accumulate_into(&tape, store);
        drop(tape);
        adam.step(store, cfg.learning_rate(iteration));
        last_good = Some(current);
        outcome.losses.push(value);
        on_step(iteration, value);
    }
    Ok(outcome)
}
