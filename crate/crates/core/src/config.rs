//! Training configuration and its flat `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{LossConfig, NegativePool};

/// Training regime: the full model, its ablations and the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lightgcn,
    SglEdgeDrop,
    SglcCurriculum,
    XsimgclUniform,
    Gaussian,
    AdvEpoch,
    AdvLayer,
    Avogcl,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Lightgcn,
        Mode::SglEdgeDrop,
        Mode::SglcCurriculum,
        Mode::XsimgclUniform,
        Mode::Gaussian,
        Mode::AdvEpoch,
        Mode::AdvLayer,
        Mode::Avogcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Lightgcn => "lightgcn",
            Mode::SglEdgeDrop => "sgl_edge_drop",
            Mode::SglcCurriculum => "sglc_curriculum",
            Mode::XsimgclUniform => "xsimgcl_uniform",
            Mode::Gaussian => "gaussian",
            Mode::AdvEpoch => "adv_epoch",
            Mode::AdvLayer => "adv_layer",
            Mode::Avogcl => "avogcl",
        }
    }

    pub fn code(self) -> u32 {
        Mode::ALL.iter().position(|&m| m == self).expect("listed") as u32
    }

    pub fn from_code(code: u32) -> Option<Mode> {
        Mode::ALL.get(code as usize).copied()
    }

    /// Modes trained with a contrastive term.
    pub fn is_contrastive(self) -> bool {
        self != Mode::Lightgcn
    }

    /// Modes driven by the trainable projection perturbator.
    pub fn is_adversarial(self) -> bool {
        matches!(self, Mode::AdvEpoch | Mode::AdvLayer | Mode::Avogcl)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Order of the structure perturbation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureOrder {
    /// Fit the discriminator first, then let it choose the edits.
    Guided,
    /// Random edits of the same budget; the discriminator is still fit.
    Random,
}

/// How often the projection matrices take an ascent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvCadence {
    /// One step per epoch on the gradient summed over its mini-batches.
    Epoch,
    /// One step after every mini-batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub layers: usize,
    pub lr: f64,
    pub adv_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub alpha: f64,
    pub omega: f64,
    pub select_fraction: f64,
    pub l_star: usize,
    pub mode: Mode,
    pub structure_perturb: bool,
    pub embed_perturb: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub topk: Vec<usize>,
    pub drop_ratio: f64,
    pub disc_lr: f64,
    pub disc_steps: usize,
    pub cl_pool: NegativePool,
    pub structure_order: StructureOrder,
    pub adv_cadence: AdvCadence,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            layers: 2,
            lr: 1e-3,
            adv_lr: 1e-3,
            batch_size: 4096,
            max_epochs: 300,
            patience: 10,
            lambda1: 0.2,
            lambda2: 1e-4,
            tau: 0.2,
            alpha: 0.03,
            omega: 0.02,
            select_fraction: 0.5,
            l_star: 1,
            mode: Mode::Avogcl,
            structure_perturb: true,
            embed_perturb: true,
            seed: 2024,
            eval_every: 1,
            topk: vec![10, 20],
            drop_ratio: 0.15,
            disc_lr: 1e-3,
            disc_steps: 1,
            cl_pool: NegativePool::InBatch,
            structure_order: StructureOrder::Guided,
            adv_cadence: AdvCadence::Epoch,
        }
    }
}

/// Early stopping and model selection always use this cutoff.
pub const VALIDATION_CUTOFF: usize = 20;

pub const KEYS: [&str; 26] = [
    "d",
    "layers",
    "lr",
    "adv_lr",
    "batch_size",
    "max_epochs",
    "patience",
    "lambda1",
    "lambda2",
    "tau",
    "alpha",
    "omega",
    "select_fraction",
    "l_star",
    "mode",
    "structure_perturb",
    "embed_perturb",
    "seed",
    "eval_every",
    "topk",
    "drop_ratio",
    "disc_lr",
    "disc_steps",
    "cl_pool",
    "structure_order",
    "adv_cadence",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects on|off, got `{value}`"))),
    }
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d" => self.d = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "adv_lr" => self.adv_lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "lambda1" => self.lambda1 = parse_num(key, v)?,
            "lambda2" => self.lambda2 = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "omega" => self.omega = parse_num(key, v)?,
            "select_fraction" => self.select_fraction = parse_num(key, v)?,
            "l_star" => self.l_star = parse_num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "structure_perturb" => self.structure_perturb = parse_switch(key, v)?,
            "embed_perturb" => self.embed_perturb = parse_switch(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "topk" => {
                self.topk = v
                    .split(',')
                    .map(|t| parse_num(key, t.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "drop_ratio" => self.drop_ratio = parse_num(key, v)?,
            "disc_lr" => self.disc_lr = parse_num(key, v)?,
            "disc_steps" => self.disc_steps = parse_num(key, v)?,
            "cl_pool" => {
                self.cl_pool = match v {
                    "in_batch" => NegativePool::InBatch,
                    "full" => NegativePool::Full,
                    _ => return Err(Error::Config(format!("`cl_pool` expects in_batch|full, got `{v}`"))),
                }
            }
            "structure_order" => {
                self.structure_order = match v {
                    "guided" => StructureOrder::Guided,
                    "random" => StructureOrder::Random,
                    _ => {
                        return Err(Error::Config(format!(
                            "`structure_order` expects guided|random, got `{v}`"
                        )))
                    }
                }
            }
            "adv_cadence" => {
                self.adv_cadence = match v {
                    "epoch" => AdvCadence::Epoch,
                    "batch" => AdvCadence::Batch,
                    _ => return Err(Error::Config(format!("`adv_cadence` expects epoch|batch, got `{v}`"))),
                }
            }
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Textual value of one key, in the form accepted by [`TrainConfig::set`].
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "d" => self.d.to_string(),
            "layers" => self.layers.to_string(),
            "lr" => self.lr.to_string(),
            "adv_lr" => self.adv_lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "tau" => self.tau.to_string(),
            "alpha" => self.alpha.to_string(),
            "omega" => self.omega.to_string(),
            "select_fraction" => self.select_fraction.to_string(),
            "l_star" => self.l_star.to_string(),
            "mode" => self.mode.name().to_string(),
            "structure_perturb" => switch(self.structure_perturb).to_string(),
            "embed_perturb" => switch(self.embed_perturb).to_string(),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "topk" => self.topk.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
            "drop_ratio" => self.drop_ratio.to_string(),
            "disc_lr" => self.disc_lr.to_string(),
            "disc_steps" => self.disc_steps.to_string(),
            "cl_pool" => match self.cl_pool {
                NegativePool::InBatch => "in_batch",
                NegativePool::Full => "full",
            }
            .to_string(),
            "structure_order" => match self.structure_order {
                StructureOrder::Guided => "guided",
                StructureOrder::Random => "random",
            }
            .to_string(),
            "adv_cadence" => match self.adv_cadence {
                AdvCadence::Epoch => "epoch",
                AdvCadence::Batch => "batch",
            }
            .to_string(),
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        })
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in a form [`TrainConfig::parse`] reads back.
    pub fn to_kv_string(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 {
            return fail("d must be at least 1".into());
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.adv_lr >= 0.0 && self.adv_lr.is_finite()) {
            return fail(format!("adv_lr must be non-negative, got {}", self.adv_lr));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return fail(format!("omega must be non-negative, got {}", self.omega));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return fail("lambda1 and lambda2 must be non-negative".into());
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return fail(format!("select_fraction must lie in (0, 1], got {}", self.select_fraction));
        }
        if !(0.0..=1.0).contains(&self.drop_ratio) {
            return fail(format!("drop_ratio must lie in [0, 1], got {}", self.drop_ratio));
        }
        if self.l_star < 1 || self.l_star > self.layers {
            return fail(format!("l_star must lie in [1, {}], got {}", self.layers, self.l_star));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return fail("batch_size, max_epochs and eval_every must be at least 1".into());
        }
        if self.topk.is_empty() || self.topk.contains(&0) {
            return fail("topk must list positive cutoffs".into());
        }
        if !(self.disc_lr > 0.0) {
            return fail(format!("disc_lr must be positive, got {}", self.disc_lr));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda1: if self.mode.is_contrastive() { self.lambda1 } else { 0.0 },
            lambda2: self.lambda2,
            tau: self.tau,
            pool: self.cl_pool,
        }
    }

    /// Cutoffs reported during training, always including the validation one.
    pub fn report_cutoffs(&self) -> Vec<usize> {
        let mut ks = self.topk.clone();
        ks.push(VALIDATION_CUTOFF);
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.mode = Mode::SglcCurriculum;
        cfg.lambda1 = 0.5;
        cfg.topk = vec![5, 10, 50];
        cfg.structure_perturb = false;
        cfg.cl_pool = NegativePool::Full;
        let back = TrainConfig::parse(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrainConfig::parse("# run\n\nmode = lightgcn  # floor\nd=8\nl_star = 1\n").unwrap();
        assert_eq!(cfg.mode, Mode::Lightgcn);
        assert_eq!(cfg.d, 8);
    }

    #[test]
    fn unknown_key_is_named() {
        match TrainConfig::parse("d = 8\nlearning_rate = 0.1\n") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lambda_grid_accepted() {
        for v in ["0.1", "0.2", "0.5", "2", "5"] {
            let cfg = TrainConfig::parse(&format!("lambda1 = {v}\n")).unwrap();
            assert_eq!(cfg.lambda1, v.parse::<f64>().unwrap());
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "lr = 0",
            "tau = -1",
            "alpha = 1.5",
            "omega = -0.1",
            "l_star = 0",
            "l_star = 3",
            "mode = bogus",
            "structure_perturb = maybe",
            "d = x",
            "just a line",
        ] {
            assert!(TrainConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn mode_codes_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::from_code(m.code()), Some(m));
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!(Mode::from_code(99), None);
    }

    #[test]
    fn lightgcn_drops_contrastive_weight() {
        let cfg = TrainConfig {
            mode: Mode::Lightgcn,
            lambda1: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.loss_config().lambda1, 0.0);
    }
}
