//! Sequential sweeps over modes, ablation switches and hyper-parameter grids.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{Mode, TrainConfig};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::eval::{evaluate_full_ranking, EvalReport, Phase};
use crate::train::{EpochReport, Trainer};

/// A named way of deriving a run configuration from the base one.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub mode: Mode,
    pub structure_perturb: Option<bool>,
    pub embed_perturb: Option<bool>,
}

impl Variant {
    /// A mode name, or one of `wo_sp`, `wo_ep`, `wo_both` for the full
    /// model without the structure perturbator, the embedding perturbator,
    /// or both.
    pub fn parse(name: &str) -> Result<Self> {
        let (mode, sp, ep) = match name {
            "wo_sp" => (Mode::Avogcl, Some(false), Some(true)),
            "wo_ep" => (Mode::Avogcl, Some(true), Some(false)),
            "wo_both" => (Mode::Avogcl, Some(false), Some(false)),
            other => (other.parse()?, None, None),
        };
        Ok(Variant {
            label: name.to_string(),
            mode,
            structure_perturb: sp,
            embed_perturb: ep,
        })
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.mode = self.mode;
        if let Some(sp) = self.structure_perturb {
            cfg.structure_perturb = sp;
        }
        if let Some(ep) = self.embed_perturb {
            cfg.embed_perturb = ep;
        }
        cfg
    }
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Variant::parse)
        .collect()
}

/// One assignment of grid keys.
pub type GridPoint = Vec<(String, String)>;

/// Parses `key=v1,v2;key2=w1,w2` into the cartesian product of settings.
/// An empty string yields a single empty setting.
pub fn parse_grid(spec: &str) -> Result<Vec<GridPoint>> {
    let mut points: Vec<GridPoint> = vec![Vec::new()];
    for part in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid entry `{part}` is not key=values")))?;
        let key = key.trim();
        TrainConfig::default().get(key)?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid key `{key}` has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.to_string(), v.to_string()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

pub fn setting_label(point: &GridPoint) -> String {
    if point.is_empty() {
        return "default".into();
    }
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub setting: String,
    pub seed: u64,
    pub n: usize,
    pub metric: String,
    pub value: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

pub const CSV_HEADER: &str = "variant,setting,seed,n,metric,value,best_epoch,epochs";

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{},{}",
            r.variant, r.setting, r.seed, r.n, r.metric, r.value, r.best_epoch, r.epochs
        );
    }
    out
}

/// Finished run of one sweep cell.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub variant: String,
    pub setting: String,
    pub config: TrainConfig,
    pub reports: Vec<EpochReport>,
    pub test: EvalReport,
    pub best_epoch: usize,
}

impl RunSummary {
    pub fn rows(&self) -> Vec<AblationRow> {
        let mut rows = Vec::new();
        for m in &self.test.metrics {
            for (metric, value) in [("recall", m.recall), ("ndcg", m.ndcg)] {
                rows.push(AblationRow {
                    variant: self.variant.clone(),
                    setting: self.setting.clone(),
                    seed: self.config.seed,
                    n: m.n,
                    metric: metric.into(),
                    value,
                    best_epoch: self.best_epoch,
                    epochs: self.reports.len(),
                });
            }
        }
        rows
    }
}

/// Trains one configuration and evaluates its selected model on the test set.
pub fn run_one(variant: &str, setting: &str, config: TrainConfig, split: &DatasetSplit) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config.clone(), split)?;
    let reports = trainer.run(|_, _| Ok(()))?;
    let emb = trainer.best_embeddings()?;
    let test = evaluate_full_ranking(&emb, &trainer.index, Phase::Test, &config.topk);
    let best_epoch = trainer.state.best.as_ref().map_or(0, |b| b.epoch);
    Ok(RunSummary {
        variant: variant.to_string(),
        setting: setting.to_string(),
        config,
        reports,
        test,
        best_epoch,
    })
}

/// Runs variants x grid x seeds in order, calling `on_run` after each run.
pub fn run_sweep(
    base: &TrainConfig,
    split: &DatasetSplit,
    variants: &[Variant],
    grid: &[GridPoint],
    seeds: &[u64],
    mut on_run: impl FnMut(&RunSummary),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in variants {
        for point in grid {
            for &seed in seeds {
                let mut cfg = variant.apply(base);
                for (k, v) in point {
                    cfg.set(k, v)?;
                }
                cfg.seed = seed;
                cfg.validate()?;
                let summary = run_one(&variant.label, &setting_label(point), cfg, split)?;
                on_run(&summary);
                rows.extend(summary.rows());
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product() {
        let g = parse_grid("drop_ratio=0.05,0.1;lambda1=0.2,0.5,2").unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(setting_label(&g[0]), "drop_ratio=0.05;lambda1=0.2");
        assert_eq!(parse_grid("").unwrap(), vec![Vec::new()]);
        assert!(parse_grid("nope=1").is_err());
        assert!(parse_grid("drop_ratio").is_err());
    }

    #[test]
    fn variants() {
        let v = parse_variants("lightgcn, wo_sp,wo_both").unwrap();
        assert_eq!(v[0].mode, Mode::Lightgcn);
        let cfg = v[1].apply(&TrainConfig::default());
        assert!(!cfg.structure_perturb && cfg.embed_perturb);
        let cfg = v[2].apply(&TrainConfig::default());
        assert!(!cfg.structure_perturb && !cfg.embed_perturb);
        assert!(parse_variants("avogcl,bogus").is_err());
    }
}
