//! Batch deraining, proxy evaluation and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{check_dim, Error, Result};
use crate::features::{Domain, FeatureEncoder, PromptPair};
use crate::report::{mean, median, psnr, AblationRow, EvalReport, ImageMetrics};
use crate::rng::derive_seed;
use crate::sample::Sample;
use crate::sampler::{sample, Components, SamplerConfig, TraceRow};
use crate::score::ScoreFn;
use crate::sde::DiffusionSchedule;

/// Runs the sampler on every input; image `i` uses seed `config.seed ^ i`, so
/// each output depends only on its own input and index.
pub fn derain_batch(
    inputs: &[Sample],
    parts: &Components<'_>,
    config: &SamplerConfig,
) -> Result<Vec<(Sample, Vec<TraceRow>)>> {
    config.validate(parts.schedule)?;
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let cfg = SamplerConfig { seed: derive_seed(config.seed, i as u64), ..config.clone() };
            sample(x, parts, &cfg)
        })
        .collect()
}

pub fn clean_probability(y: &Sample, encoder: &FeatureEncoder, prompts: &PromptPair) -> Result<f64> {
    prompts.probability(&encoder.embed(y)?, Domain::Positive)
}

pub fn image_metrics(
    name: &str,
    pred: &Sample,
    truth: &Sample,
    encoder: &FeatureEncoder,
    prompts: &PromptPair,
) -> Result<ImageMetrics> {
    let mse = pred.mse(truth)?;
    Ok(ImageMetrics { name: name.to_string(), mse, psnr: psnr(mse), clean_prob: clean_probability(pred, encoder, prompts)? })
}

pub fn evaluate(
    items: &[(String, Sample, Sample)],
    encoder: &FeatureEncoder,
    prompts: &PromptPair,
    config: BTreeMap<String, String>,
) -> Result<EvalReport> {
    let rows = items
        .iter()
        .map(|(name, pred, truth)| image_metrics(name, pred, truth, encoder, prompts))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(rows, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Lambda,
    Ts,
    EnergyInput,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Sweep::Lambda),
            "ts" => Ok(Sweep::Ts),
            "energy-input" => Ok(Sweep::EnergyInput),
            other => Err(Error::Config(format!("unknown sweep {other:?}; expected lambda, ts or energy-input"))),
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sweep::Lambda => "lambda",
            Sweep::Ts => "ts",
            Sweep::EnergyInput => "energy-input",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridPoint {
    Lambda(f64, f64),
    Ts(f64),
    /// Compare against a perturbed reference `x_t` (true) or the raw input.
    Reference(bool),
}

impl GridPoint {
    pub fn label(&self) -> String {
        match *self {
            GridPoint::Lambda(a, b) => format!("lambda1={a},lambda2={b}"),
            GridPoint::Ts(t) => format!("ts={t}"),
            GridPoint::Reference(true) => "reference=x_t".into(),
            GridPoint::Reference(false) => "reference=x0".into(),
        }
    }

    pub fn apply(&self, base: &SamplerConfig) -> SamplerConfig {
        let mut c = base.clone();
        match *self {
            GridPoint::Lambda(a, b) => {
                c.energy.lambda1 = a;
                c.energy.lambda2 = b;
            }
            GridPoint::Ts(t) => c.ts_fraction = t,
            GridPoint::Reference(p) => c.energy.perturb_reference = p,
        }
        c
    }
}

pub fn default_grid(sweep: Sweep) -> Vec<GridPoint> {
    match sweep {
        Sweep::Lambda => vec![
            GridPoint::Lambda(0.0, 0.0),
            GridPoint::Lambda(73.0, 0.0),
            GridPoint::Lambda(0.0, 0.72),
            GridPoint::Lambda(73.0, 0.72),
        ],
        Sweep::Ts => [0.2, 0.4, 0.5, 0.6, 0.8].into_iter().map(GridPoint::Ts).collect(),
        Sweep::EnergyInput => vec![GridPoint::Reference(false), GridPoint::Reference(true)],
    }
}

/// Comma-separated grid: `l1:l2` pairs for `lambda`, fractions of the horizon
/// for `ts`, `x0` / `xt` for `energy-input`.
pub fn parse_grid(sweep: Sweep, text: &str) -> Result<Vec<GridPoint>> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("grid value {s:?}: {e}")));
    let points = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| match sweep {
            Sweep::Lambda => {
                let (a, b) = item
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("lambda grid entry {item:?} is not l1:l2")))?;
                Ok(GridPoint::Lambda(num(a)?, num(b)?))
            }
            Sweep::Ts => Ok(GridPoint::Ts(num(item)?)),
            Sweep::EnergyInput => match item.trim() {
                "x0" => Ok(GridPoint::Reference(false)),
                "xt" => Ok(GridPoint::Reference(true)),
                other => Err(Error::Config(format!("energy-input grid entry {other:?}; expected x0 or xt"))),
            },
        })
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(points)
}

/// Derains `inputs` once per grid point and summarizes against `truths`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    inputs: &[Sample],
    truths: &[Sample],
    schedule: &DiffusionSchedule,
    score: &dyn ScoreFn,
    encoder: &FeatureEncoder,
    prompts: &PromptPair,
    base: &SamplerConfig,
    grid: &[GridPoint],
) -> Result<Vec<AblationRow>> {
    check_dim(inputs.len(), truths.len())?;
    if inputs.is_empty() {
        return Err(Error::EmptyData("no ablation inputs"));
    }
    let parts = Components { schedule, score, guidance: Some((encoder, prompts)) };
    let mut rows = Vec::with_capacity(grid.len());
    for point in grid {
        let cfg = point.apply(base);
        let outputs = derain_batch(inputs, &parts, &cfg)?;
        let mut mses = Vec::with_capacity(inputs.len());
        let mut psnrs = Vec::with_capacity(inputs.len());
        let mut probs = Vec::with_capacity(inputs.len());
        for ((y, _), truth) in outputs.iter().zip(truths) {
            let mse = y.mse(truth)?;
            mses.push(mse);
            psnrs.push(psnr(mse));
            probs.push(clean_probability(y, encoder, prompts)?);
        }
        rows.push(AblationRow {
            setting: point.label(),
            lambda1: cfg.energy.lambda1,
            lambda2: cfg.energy.lambda2,
            ts: cfg.ts_fraction,
            perturb_reference: cfg.energy.perturb_reference,
            mean_mse: mean(&mses),
            median_mse: median(&mses),
            mean_psnr: mean(&psnrs),
            mean_clean_prob: mean(&probs),
            clean_fraction: probs.iter().filter(|&&p| p > 0.5).count() as f64 / probs.len() as f64,
        });
    }
    Ok(rows)
}
