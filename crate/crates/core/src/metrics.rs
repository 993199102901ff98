//! Heatmap decoding, normalized mean error, failure rate and gate
//! statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSet, NormKind, NormPairs, Point};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub points: Vec<Point>,
    /// Set for maps whose values are all equal; the point is then `(0, 0)`.
    pub degenerate: Vec<bool>,
}

/// Per-channel argmax of an `L×h×w` stack. Ties go to the lowest row-major
/// index. With `refine`, each coordinate moves a quarter pixel toward the
/// larger of its two axis neighbours.
pub fn decode(hm: &Tensor, refine: bool) -> Result<Decoded> {
    if hm.rank() != 3 {
        return Err(Error::Rank {
            op: "decode",
            expected: 3,
            shape: hm.shape().to_vec(),
        });
    }
    if !hm.is_finite() {
        return Err(Error::NonFinite("heatmap passed to decode".into()));
    }
    let [l, h, w] = [hm.shape()[0], hm.shape()[1], hm.shape()[2]];
    let mut points = Vec::with_capacity(l);
    let mut degenerate = Vec::with_capacity(l);
    for map in hm.data().chunks(h * w) {
        let mut best = 0;
        for (i, &v) in map.iter().enumerate() {
            if v > map[best] {
                best = i;
            }
        }
        let flat = map.iter().all(|&v| v == map[0]);
        degenerate.push(flat);
        if flat {
            points.push(Point::new(0.0, 0.0));
            continue;
        }
        let (row, col) = (best / w, best % w);
        let mut p = Point::new(col as f64, row as f64);
        if refine {
            if col > 0 && col + 1 < w {
                p.x += quarter_step(map[best - 1], map[best + 1]);
            }
            if row > 0 && row + 1 < h {
                p.y += quarter_step(map[best - w], map[best + w]);
            }
        }
        points.push(p);
    }
    Ok(Decoded { points, degenerate })
}

fn quarter_step(before: f64, after: f64) -> f64 {
    if after > before {
        0.25
    } else if before > after {
        -0.25
    } else {
        0.0
    }
}

/// Euclidean error of every landmark.
pub fn landmark_errors(pred: &[Point], gt: &[Point]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Contract(format!(
            "landmark counts differ or are empty: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| p.distance(*g)).collect())
}

/// Mean landmark error over `gt.norm_distance`, in percent.
pub fn nme(pred: &[Point], gt: &LandmarkSet) -> Result<f64> {
    let d = gt.norm_distance;
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Contract(format!(
            "normalization distance must be positive, got {d}"
        )));
    }
    let errors = landmark_errors(pred, &gt.points)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64 / d * 100.0)
}

/// Percentage of entries strictly above `threshold`.
pub fn failure_rate(nmes: &[f64], threshold: f64) -> Result<f64> {
    if nmes.is_empty() {
        return Err(Error::Contract("failure rate of an empty list".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Contract(format!(
            "failure threshold must be positive, got {threshold}"
        )));
    }
    let failed = nmes.iter().filter(|&&v| v > threshold).count();
    Ok(100.0 * failed as f64 / nmes.len() as f64)
}

/// Distance between the configured pair, or the bounding-box diagonal.
pub fn norm_distance(points: &[Point], kind: NormKind, pairs: &NormPairs) -> Result<f64> {
    let pair = |(a, b): (usize, usize)| -> Result<f64> {
        match (points.get(a), points.get(b)) {
            (Some(p), Some(q)) => Ok(p.distance(*q)),
            _ => Err(Error::Contract(format!(
                "normalization pair ({a}, {b}) outside {} landmarks",
                points.len()
            ))),
        }
    };
    let d = match kind {
        NormKind::InterOcular => pair(pairs.ocular)?,
        NormKind::InterPupil => pair(pairs.pupil)?,
        NormKind::Diagonal => {
            if points.is_empty() {
                return Err(Error::Contract("diagonal of an empty point set".into()));
            }
            let (mut lo, mut hi) = (points[0], points[0]);
            for p in points {
                lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
            }
            lo.distance(hi)
        }
    };
    if !(d > 0.0) {
        return Err(Error::Contract(format!(
            "{kind:?} normalization distance is zero"
        )));
    }
    Ok(d)
}

/// Builds a [`LandmarkSet`] whose distance is computed from its own points.
pub fn landmark_set(points: Vec<Point>, kind: NormKind, pairs: &NormPairs) -> Result<LandmarkSet> {
    let norm_distance = norm_distance(&points, kind, pairs)?;
    Ok(LandmarkSet {
        points,
        norm_distance,
        norm_kind: kind,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: u64,
    pub label: String,
    pub nme_percent: f64,
    pub norm_distance: f64,
    pub per_landmark_errors: Vec<f64>,
    /// `(dsa_index, ratio)` for every gate in the model.
    pub activation_ratios: Vec<(usize, f64)>,
}

impl EvalRecord {
    pub fn new(
        sample_id: u64,
        label: impl Into<String>,
        pred: &[Point],
        gt: &LandmarkSet,
        activation_ratios: Vec<(usize, f64)>,
    ) -> Result<Self> {
        Ok(Self {
            sample_id,
            label: label.into(),
            nme_percent: nme(pred, gt)?,
            norm_distance: gt.norm_distance,
            per_landmark_errors: landmark_errors(pred, &gt.points)?,
            activation_ratios,
        })
    }

    /// NME recomputed from the stored per-landmark errors.
    pub fn recomputed_nme(&self) -> f64 {
        let n = self.per_landmark_errors.len() as f64;
        self.per_landmark_errors.iter().sum::<f64>() / n / self.norm_distance * 100.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub cluster: String,
    pub dsa_index: usize,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub rows: Vec<GateRow>,
}

impl GateReport {
    pub fn mean(&self, cluster: &str, dsa_index: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.cluster == cluster && r.dsa_index == dsa_index)
            .map(|r| r.mean)
    }

    /// Mean over all DSA indices of a cluster's mean ratio.
    pub fn cluster_mean(&self, cluster: &str) -> Option<f64> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.cluster == cluster).collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster,dsa_index,count,mean,std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.cluster, r.dsa_index, r.count, r.mean, r.std
            );
        }
        out
    }
}

/// Mean and standard deviation of the activation ratio per cluster and gate.
/// Clusters appear in the order of `clusters`; those without records are
/// skipped.
pub fn gate_report(records: &[EvalRecord], clusters: &[&str]) -> Result<GateReport> {
    let indices: Vec<usize> = records
        .first()
        .map(|r| r.activation_ratios.iter().map(|&(i, _)| i).collect())
        .unwrap_or_default();
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        let c = clusters
            .iter()
            .position(|&c| c == r.label)
            .ok_or_else(|| Error::Contract(format!("unknown cluster label `{}`", r.label)))?;
        let these: Vec<usize> = r.activation_ratios.iter().map(|&(i, _)| i).collect();
        if these != indices {
            return Err(Error::Contract(format!(
                "sample {} reports gates {these:?}, expected {indices:?}",
                r.sample_id
            )));
        }
        for &(i, ratio) in &r.activation_ratios {
            groups.entry((c, i)).or_default().push(ratio);
        }
    }
    let rows = groups
        .into_iter()
        .map(|((c, i), values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            GateRow {
                cluster: clusters[c].to_owned(),
                dsa_index: i,
                count: values.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(GateReport { rows })
}
