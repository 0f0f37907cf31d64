//! Flat `key = value` run configuration.

use std::path::Path;

use pyramidflow::flow::VnAxis;
use pyramidflow::model::ModelConfig;
use pyramidflow::train::LossKind;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub precision: Precision,
    pub loss: LossKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 2e-4,
            steps: 2000,
            seed: 0,
            precision: Precision::F32,
            loss: LossKind::Fourier,
        }
    }
}

pub const KEYS: [&str; 10] = ["L", "D", "C", "c_in", "vn_axis", "lr", "steps", "seed", "precision", "loss"];

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> CliResult<V> {
    v.parse().map_err(|_| usage(format!("config key {key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| usage(format!("config line {}: expected `key = value`", lineno + 1)))?;
            match key {
                "L" => cfg.model.levels = parse_num(key, value)?,
                "D" => cfg.model.depth = parse_num(key, value)?,
                "C" => cfg.model.channels = parse_num(key, value)?,
                "c_in" => cfg.model.c_in = parse_num(key, value)?,
                "vn_axis" => {
                    cfg.model.vn = VnAxis::parse(value)
                        .ok_or_else(|| usage(format!("config key vn_axis: expected channel, spatial or none, got {value:?}")))?
                }
                "lr" => cfg.lr = parse_num(key, value)?,
                "steps" => cfg.steps = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "precision" => {
                    cfg.precision = match value {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => return Err(usage(format!("config key precision: expected f32 or f64, got {value:?}"))),
                    }
                }
                "loss" => {
                    cfg.loss = LossKind::parse(value)
                        .ok_or_else(|| usage(format!("config key loss: expected fourier or spatial, got {value:?}")))?
                }
                other => {
                    return Err(usage(format!(
                        "unknown config key {other:?} (known: {})",
                        KEYS.join(", ")
                    )))
                }
            }
        }
        cfg.model.seed = cfg.seed;
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(usage(format!("config key lr must be positive, got {}", cfg.lr)));
        }
        cfg.model.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        format!(
            "L = {}\nD = {}\nC = {}\nc_in = {}\nvn_axis = {}\nlr = {:e}\nsteps = {}\nseed = {}\nprecision = {}\nloss = {}\n",
            m.levels,
            m.depth,
            m.channels,
            m.c_in,
            VnAxis::name(m.vn),
            self.lr,
            self.steps,
            self.seed,
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            },
            self.loss.name()
        )
    }
}
