use std::fmt::Write as _;

use crate::losses::{LossWeights, Reduction};

use super::TrainError;

/// Every hyperparameter of a run. Defaults follow the published settings;
/// schedule lengths are shortened for the small synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Prototype momentum.
    pub alpha: f64,
    /// Pseudo-label confidence-gap threshold.
    pub delta_th: f64,
    /// Angular margin in radians.
    pub m: f64,
    pub tau: f64,
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr_g: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_d: f64,
    pub phase1_iters: u64,
    pub phase2_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: u64,
    /// Per-image reduction of the contrastive terms.
    pub contrastive_reduction: Reduction,
    /// Also move prototypes toward pseudo-labeled target pixels.
    pub refine_with_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            delta_th: 0.25,
            m: 0.4,
            tau: 1.0,
            gamma: 1.0,
            beta: 0.1,
            lambda: 0.003,
            lr_g: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_d: 1e-4,
            phase1_iters: 500,
            phase2_iters: 1500,
            batch_size: 4,
            seed: 0,
            eval_every: 50,
            contrastive_reduction: Reduction::Mean,
            refine_with_target: false,
        }
    }
}

impl TrainConfig {
    /// Accepted keys, in snapshot order.
    pub const KEYS: [&'static str; 18] = [
        "alpha",
        "delta_th",
        "m",
        "tau",
        "gamma",
        "beta",
        "lambda",
        "lr_g",
        "momentum",
        "weight_decay",
        "lr_d",
        "phase1_iters",
        "phase2_iters",
        "batch_size",
        "seed",
        "eval_every",
        "contrastive_reduction",
        "refine_with_target",
    ];

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn total_iters(&self) -> u64 {
        self.phase1_iters + self.phase2_iters
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = |e: String| TrainError::Config(format!("{key} = {value:?}: {e}"));
        let f = || value.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        let u = || value.trim().parse::<u64>().map_err(|e| bad(e.to_string()));
        match key {
            "alpha" => self.alpha = f()?,
            "delta_th" => self.delta_th = f()?,
            "m" => self.m = f()?,
            "tau" => self.tau = f()?,
            "gamma" => self.gamma = f()?,
            "beta" => self.beta = f()?,
            "lambda" => self.lambda = f()?,
            "lr_g" => self.lr_g = f()?,
            "momentum" => self.momentum = f()?,
            "weight_decay" => self.weight_decay = f()?,
            "lr_d" => self.lr_d = f()?,
            "phase1_iters" => self.phase1_iters = u()?,
            "phase2_iters" => self.phase2_iters = u()?,
            "batch_size" => self.batch_size = u()? as usize,
            "seed" => self.seed = u()?,
            "eval_every" => self.eval_every = u()?,
            "contrastive_reduction" => self.contrastive_reduction = value.trim().parse().map_err(bad)?,
            "refine_with_target" => {
                self.refine_with_target = value
                    .trim()
                    .parse()
                    .map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?
            }
            other => return Err(TrainError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "alpha" => format!("{:?}", self.alpha),
            "delta_th" => format!("{:?}", self.delta_th),
            "m" => format!("{:?}", self.m),
            "tau" => format!("{:?}", self.tau),
            "gamma" => format!("{:?}", self.gamma),
            "beta" => format!("{:?}", self.beta),
            "lambda" => format!("{:?}", self.lambda),
            "lr_g" => format!("{:?}", self.lr_g),
            "momentum" => format!("{:?}", self.momentum),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "lr_d" => format!("{:?}", self.lr_d),
            "phase1_iters" => self.phase1_iters.to_string(),
            "phase2_iters" => self.phase2_iters.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "contrastive_reduction" => self.contrastive_reduction.to_string(),
            "refine_with_target" => self.refine_with_target.to_string(),
            _ => return None,
        })
    }

    /// Parse `key = value` lines; `#` starts a comment. Later lines win.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), TrainError> {
        for (key, value) in parse_kv(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Round-trippable `key = value` text with every key.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        let positive = [("tau", self.tau), ("lr_g", self.lr_g), ("lr_d", self.lr_d)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("m", self.m),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return err("alpha must lie in [0, 1]");
        }
        if !self.delta_th.is_finite() {
            return err("delta_th must be finite");
        }
        if self.phase1_iters == 0 {
            return err("phase1_iters must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1");
        }
        Ok(())
    }
}

/// Split `key = value` text into pairs, rejecting malformed lines.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(TrainError::Config(format!(
                "line {}: expected key = value, got {raw:?}",
                n + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(TrainError::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
