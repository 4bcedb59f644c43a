//! Training configuration: a flat `key = value` document.
//!
//! Lines are `key = value` (or `key=value`); `#` starts a comment and values
//! may be quoted. Numbers accept ordinary decimal notation (`3e-4`) and a
//! natural-exponent form (`3e^-4` = 3·exp(−4), `e^5` = exp(5)).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{DEFAULT_DROPOUT, DEFAULT_HIDDEN, DEFAULT_LEAKY_SLOPE};

use super::loss::{LocalLoss, LossWeights};

/// How the default `beta`, `lambda` and learning rate are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Notation {
    /// 1e5, 1e-5, 3e-4
    #[default]
    Decimal,
    /// e^5, e^-5, 3·e^-4
    Natural,
}

impl fmt::Display for Notation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Notation::Decimal => "decimal",
            Notation::Natural => "natural",
        })
    }
}

impl FromStr for Notation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decimal" => Ok(Notation::Decimal),
            "natural" => Ok(Notation::Natural),
            _ => Err(Error::param(format!("unknown notation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub features: Option<String>,
    pub graph: Option<String>,
    /// Anchor codes appended to the features; absent means raw features.
    pub codes: Option<String>,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub batch: usize,
    pub epochs: usize,
    pub alpha_loss: f64,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub notation: Notation,
    pub local_loss: LocalLoss,
    /// Defaults to twice the layer count.
    pub hops: Option<usize>,
    pub node_budget: Option<usize>,
    /// Defaults to `ceil(N / (6 · batch))`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            features: None,
            graph: None,
            codes: None,
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout: DEFAULT_DROPOUT,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            batch: 64,
            epochs: 300,
            alpha_loss: 1.0,
            beta: None,
            lambda: None,
            lr: None,
            notation: Notation::Decimal,
            local_loss: LocalLoss::Clamp,
            hops: None,
            node_budget: None,
            steps_per_epoch: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Parses a number, also accepting `c e^x` / `c*e^x` for `c·exp(x)`.
pub fn parse_real(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::param(format!("not a number: {s:?}"));
    if let Some((coef, exp)) = s.split_once("e^") {
        let coef = coef.trim().trim_end_matches(['*', '×']).trim();
        let c = if coef.is_empty() { 1.0 } else { coef.parse::<f64>().map_err(|_| bad())? };
        let x = exp.trim().trim_matches(['{', '}']).parse::<f64>().map_err(|_| bad())?;
        return Ok(c * x.exp());
    }
    s.parse::<f64>().map_err(|_| bad())
}

fn parse_count(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::param(format!("{key}: expected a count, got {v:?}")))
}

fn parse_auto(key: &str, v: &str) -> Result<Option<usize>> {
    match v {
        "auto" | "none" | "" => Ok(None),
        _ => parse_count(key, v).map(Some),
    }
}

fn show_opt(v: Option<usize>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| x.to_string())
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::param(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Sets one key; used for file lines and command-line overrides alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim().trim_matches(|c| c == '"' || c == '\'');
        let real = |v: &str| parse_real(v).map_err(|e| Error::param(format!("{key}: {e}")));
        match key {
            "features" => self.features = Some(v.to_string()),
            "graph" => self.graph = Some(v.to_string()),
            "codes" => self.codes = (!v.is_empty()).then(|| v.to_string()),
            "hidden" => {
                self.hidden = v
                    .trim_matches(['[', ']'])
                    .split(',')
                    .map(|d| parse_count(key, d.trim()))
                    .collect::<Result<_>>()?
            }
            "dropout" => self.dropout = real(v)?,
            "leaky_slope" => self.leaky_slope = real(v)?,
            "batch" => self.batch = parse_count(key, v)?,
            "epochs" => self.epochs = parse_count(key, v)?,
            "alpha_loss" => self.alpha_loss = real(v)?,
            "beta" => self.beta = Some(real(v)?),
            "lambda" => self.lambda = Some(real(v)?),
            "lr" => self.lr = Some(real(v)?),
            "notation" => self.notation = v.parse()?,
            "local_loss" => self.local_loss = v.parse()?,
            "hops" => self.hops = parse_auto(key, v)?,
            "node_budget" => self.node_budget = parse_auto(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_auto(key, v)?,
            "seed" => self.seed = v.parse().map_err(|_| Error::param(format!("seed: bad value {v:?}")))?,
            "checkpoint_every" => self.checkpoint_every = parse_count(key, v)?,
            _ => return Err(Error::param(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(match self.notation {
            Notation::Decimal => 1e5,
            Notation::Natural => 5f64.exp(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.notation {
            Notation::Decimal => 1e-5,
            Notation::Natural => (-5f64).exp(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.notation {
            Notation::Decimal => 3e-4,
            Notation::Natural => 3.0 * (-4f64).exp(),
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha_loss: self.alpha_loss,
            beta: self.beta(),
            lambda: self.lambda(),
        }
    }

    pub fn hops(&self) -> usize {
        self.hops.unwrap_or(2 * self.hidden.len())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| n.div_ceil(6 * self.batch.max(1)).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param(format!("invalid hidden widths {:?}", self.hidden)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::param(format!("bad leaky_slope {}", self.leaky_slope)));
        }
        if self.batch == 0 {
            return Err(Error::param("batch must be at least 1"));
        }
        if !(self.lr().is_finite() && self.lr() > 0.0) {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.lr())));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::param("steps_per_epoch must be at least 1"));
        }
        self.weights().validate()
    }

    /// Effective values in a fixed order, for echoing into artifacts.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let hidden = self.hidden.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("features", self.features.clone().unwrap_or_default()),
            ("graph", self.graph.clone().unwrap_or_default()),
            ("codes", self.codes.clone().unwrap_or_default()),
            ("hidden", hidden),
            ("dropout", self.dropout.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("alpha_loss", self.alpha_loss.to_string()),
            ("beta", self.beta().to_string()),
            ("lambda", self.lambda().to_string()),
            ("lr", self.lr().to_string()),
            ("notation", self.notation.to_string()),
            ("local_loss", self.local_loss.to_string()),
            ("hops", show_opt(self.hops, "auto")),
            ("node_budget", show_opt(self.node_budget, "none")),
            ("steps_per_epoch", show_opt(self.steps_per_epoch, "auto")),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        out.retain(|(k, v)| !(v.is_empty() && matches!(*k, "features" | "graph" | "codes")));
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}
