//! Evaluation: per-sample NME and gate ratios, aggregated per difficulty.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::DsatModel;
use super::synth::{Difficulty, SyntheticSample};
use super::train::heatmap_points;
use crate::error::{Error, Result};
use crate::landmarks::{face, NormKind};
use crate::layers::{Forward, Mode};
use crate::metrics::{decode, failure_rate, gate_report, landmark_set, EvalRecord, GateReport};
use crate::numerics::{ParamStore, Tensor};

/// NME threshold (percent) above which a sample counts as a failure.
pub const FAILURE_THRESHOLD: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub label: String,
    pub count: usize,
    pub nme: f64,
    pub failure_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub failure_threshold: f64,
    pub overall: ClusterSummary,
    pub clusters: Vec<ClusterSummary>,
    pub gates: GateReport,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn cluster(&self, label: &str) -> Option<&ClusterSummary> {
        self.clusters.iter().find(|c| c.label == label)
    }

    /// One row per sample and gate: `sample_id,dsa_index,ratio,channels`.
    pub fn gates_csv(&self, channels: usize) -> String {
        let mut out = String::from("sample_id,dsa_index,ratio,channels\n");
        for r in &self.records {
            for &(i, ratio) in &r.activation_ratios {
                let _ = writeln!(out, "{},{},{},{}", r.sample_id, i, ratio, channels);
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn summary(label: &str, records: &[&EvalRecord]) -> Result<ClusterSummary> {
    let nmes: Vec<f64> = records.iter().map(|r| r.nme_percent).collect();
    Ok(ClusterSummary {
        label: label.to_owned(),
        count: nmes.len(),
        nme: nmes.iter().sum::<f64>() / nmes.len() as f64,
        failure_rate: failure_rate(&nmes, FAILURE_THRESHOLD)?,
    })
}

/// Aggregates per-sample records into a report.
pub fn summarize(config_hash: &str, records: Vec<EvalRecord>) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let all: Vec<&EvalRecord> = records.iter().collect();
    let overall = summary("all", &all)?;
    let mut clusters = Vec::new();
    for name in Difficulty::names() {
        let members: Vec<&EvalRecord> = records.iter().filter(|r| r.label == name).collect();
        if !members.is_empty() {
            clusters.push(summary(name, &members)?);
        }
    }
    let gates = gate_report(&records, &Difficulty::names())?;
    Ok(EvalReport {
        config_hash: config_hash.to_owned(),
        failure_threshold: FAILURE_THRESHOLD,
        overall,
        clusters,
        gates,
        records,
    })
}

/// Record for one sample given its predicted `L×h×h` landmark maps.
pub fn record_from_heatmaps(
    sample: &SyntheticSample,
    cfg: &TrainConfig,
    heatmaps: &Tensor,
    activation_ratios: Vec<(usize, f64)>,
) -> Result<EvalRecord> {
    let gt = landmark_set(
        heatmap_points(sample, cfg),
        NormKind::InterOcular,
        &face::NORM_PAIRS,
    )?;
    let decoded = decode(heatmaps, false)?;
    EvalRecord::new(
        sample.id,
        sample.label.name(),
        &decoded.points,
        &gt,
        activation_ratios,
    )
}

/// Eval-mode prediction of one sample: final-stack landmark maps and the
/// activation ratio of every gate.
pub fn predict(
    model: &DsatModel,
    store: &mut ParamStore,
    sample: &SyntheticSample,
) -> Result<(Tensor, Vec<(usize, f64)>)> {
    // Eval mode draws no random numbers; the generator only satisfies the
    // forward context.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut f = Forward::new(store, Mode::eval(), &mut rng);
    let s = sample.image_size();
    let x = f.input(sample.image.clone().reshape(&[1, 1, s, s])?);
    let preds = model.forward(&mut f, x)?;
    let last = preds
        .last()
        .ok_or_else(|| Error::Contract("model has no stacks".into()))?;
    let maps = f.tape.value(last.landmark).clone();
    let shape = maps.shape().to_vec();
    let maps = maps.reshape(&shape[1..])?;
    let mut ratios = Vec::with_capacity(f.gates.len());
    for g in &f.gates {
        ratios.push((g.dsa_index, g.decisions[0].activation_ratio()?));
    }
    Ok((maps, ratios))
}

/// Evaluates every sample one at a time in eval mode.
pub fn evaluate(
    cfg: &TrainConfig,
    model: &DsatModel,
    store: &mut ParamStore,
    samples: &[SyntheticSample],
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let (maps, ratios) = predict(model, store, s)?;
        records.push(record_from_heatmaps(s, cfg, &maps, ratios)?);
    }
    summarize(&cfg.hash(), records)
}
