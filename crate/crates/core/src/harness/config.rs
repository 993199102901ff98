//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::cca::CcaConfig;
use crate::error::{Error, Result};
use crate::landmarks::face;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub heatmap_size: usize,
    pub channels: usize,
    pub stacks: usize,
    /// Stacks preceded by a gate.
    pub dsa_placement: Vec<usize>,
    pub cca_depth: usize,
    pub cca_heads: usize,
    /// Width of one attention head; defaults to `channels`.
    pub cca_head_dim: Option<usize>,
    pub sigma_gt: f64,
    pub landmarks: usize,
    pub boundaries: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub halve_every: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub enable_dsa: bool,
    pub enable_cca: bool,
    pub dropout: f64,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub augment: bool,
    pub data_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            heatmap_size: 32,
            channels: 16,
            stacks: 2,
            dsa_placement: vec![0, 1],
            cca_depth: 2,
            cca_heads: 4,
            cca_head_dim: None,
            sigma_gt: 1.5,
            landmarks: face::LANDMARKS,
            boundaries: face::BOUNDARIES.len(),
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halve_every: 200,
            iterations: 1000,
            batch_size: 4,
            seed: 0,
            enable_dsa: true,
            enable_cca: true,
            dropout: 0.0,
            train_samples: 200,
            heldout_samples: 100,
            augment: false,
            data_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_owned(), T::to_string)
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse_num(key, v)?,
            "heatmap_size" => self.heatmap_size = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "stacks" => self.stacks = parse_num(key, v)?,
            "dsa_placement" => self.dsa_placement = parse_list(key, v)?,
            "cca_depth" => self.cca_depth = parse_num(key, v)?,
            "cca_heads" => self.cca_heads = parse_num(key, v)?,
            "cca_head_dim" => self.cca_head_dim = parse_optional(key, v)?,
            "sigma_gt" => self.sigma_gt = parse_num(key, v)?,
            "landmarks" => self.landmarks = parse_num(key, v)?,
            "boundaries" => self.boundaries = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "eps" => self.eps = parse_num(key, v)?,
            "halve_every" => self.halve_every = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "enable_dsa" => self.enable_dsa = parse_bool(key, v)?,
            "enable_cca" => self.enable_cca = parse_bool(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "train_samples" => self.train_samples = parse_num(key, v)?,
            "heldout_samples" => self.heldout_samples = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "data_dir" => {
                self.data_dir = if v == "none" {
                    None
                } else {
                    Some(v.to_owned())
                }
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let placement: Vec<String> = self.dsa_placement.iter().map(usize::to_string).collect();
        let placement = if placement.is_empty() {
            "none".to_owned()
        } else {
            placement.join(",")
        };
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("image_size", self.image_size.to_string());
        put("heatmap_size", self.heatmap_size.to_string());
        put("channels", self.channels.to_string());
        put("stacks", self.stacks.to_string());
        put("dsa_placement", placement);
        put("cca_depth", self.cca_depth.to_string());
        put("cca_heads", self.cca_heads.to_string());
        put("cca_head_dim", show_optional(&self.cca_head_dim));
        put("sigma_gt", format!("{:?}", self.sigma_gt));
        put("landmarks", self.landmarks.to_string());
        put("boundaries", self.boundaries.to_string());
        put("lr", format!("{:?}", self.lr));
        put("beta1", format!("{:?}", self.beta1));
        put("beta2", format!("{:?}", self.beta2));
        put("eps", format!("{:?}", self.eps));
        put("halve_every", self.halve_every.to_string());
        put("iterations", self.iterations.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("enable_dsa", self.enable_dsa.to_string());
        put("enable_cca", self.enable_cca.to_string());
        put("dropout", format!("{:?}", self.dropout));
        put("train_samples", self.train_samples.to_string());
        put("heldout_samples", self.heldout_samples.to_string());
        put("augment", self.augment.to_string());
        put("data_dir", show_optional(&self.data_dir));
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Spatial reduction from image to feature grid (1, 2 or 4).
    pub fn downsample(&self) -> usize {
        2 * self.image_size / self.heatmap_size.max(1)
    }

    pub fn feature_size(&self) -> usize {
        self.heatmap_size / 2
    }

    pub fn cca(&self) -> CcaConfig {
        CcaConfig {
            heads: self.cca_heads,
            depth: self.cca_depth,
            head_dim: self.cca_head_dim.unwrap_or(self.channels),
        }
    }

    /// Whether stack `i` is preceded by a gate.
    pub fn gated(&self, stack: usize) -> bool {
        self.enable_dsa && self.dsa_placement.contains(&stack)
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let halvings = (iteration / self.halve_every.max(1)).min(1000);
        self.lr * 0.5f64.powi(halvings as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.heatmap_size == 0 || !self.heatmap_size.is_multiple_of(2) {
            return bad(format!(
                "image_size {} and heatmap_size {} must be positive, heatmap_size even",
                self.image_size, self.heatmap_size
            ));
        }
        if !(2 * self.image_size).is_multiple_of(self.heatmap_size)
            || ![1, 2, 4].contains(&self.downsample())
        {
            return bad(format!(
                "image_size {} must be 0.5, 1 or 2 times heatmap_size {}",
                self.image_size, self.heatmap_size
            ));
        }
        if !self.feature_size().is_multiple_of(8) {
            return bad(format!(
                "feature grid {} (heatmap_size / 2) must be divisible by 8",
                self.feature_size()
            ));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if !(1..=4).contains(&self.stacks) {
            return bad(format!(
                "stacks must be between 1 and 4, got {}",
                self.stacks
            ));
        }
        for (i, &s) in self.dsa_placement.iter().enumerate() {
            if s >= self.stacks {
                return bad(format!(
                    "dsa_placement index {s} is not a stack (0..{})",
                    self.stacks
                ));
            }
            if self.dsa_placement[..i].contains(&s) {
                return bad(format!("dsa_placement lists stack {s} twice"));
            }
        }
        self.cca().validate()?;
        if self.landmarks != face::LANDMARKS || self.boundaries != face::BOUNDARIES.len() {
            return bad(format!(
                "the synthetic face layout has {} landmarks and {} boundaries, got {} and {}",
                face::LANDMARKS,
                face::BOUNDARIES.len(),
                self.landmarks,
                self.boundaries
            ));
        }
        if !(self.sigma_gt > 0.0) {
            return bad(format!("sigma_gt must be positive, got {}", self.sigma_gt));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return bad("lr and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.halve_every == 0 || self.batch_size == 0 || self.train_samples == 0 {
            return bad("halve_every, batch_size and train_samples must be positive".into());
        }
        Ok(())
    }
}
