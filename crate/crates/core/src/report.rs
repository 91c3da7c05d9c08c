//! Evaluation and ablation reports, written as TOML.
//!
//! All numbers are proxy metrics: `mse` and `psnr` against the hidden ground
//! truth, `clean_prob` from the learned prompts. PSNR uses the `[-1, 1]`
//! range, so `psnr = 10 log10(4 / mse)`; an exact match reports `inf`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str = "\
# Proxy metrics, not perceptual scores.
# mse: mean squared error to ground truth on the [-1, 1] pixel range.
# psnr: 10 * log10(4 / mse) dB; inf when mse = 0.
# clean_prob: probability of the clean prompt for the output embedding.
";

pub const METRIC_KIND: &str = "proxy";

pub fn psnr(mse: f64) -> f64 {
    if mse > 0.0 {
        10.0 * (4.0 / mse).log10()
    } else {
        f64::INFINITY
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mse: f64,
    pub psnr: f64,
    pub clean_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    fn of(v: &[f64]) -> Self {
        Self { mean: mean(v), median: median(v) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mse: Stat,
    pub psnr: Stat,
    pub clean_prob: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: String,
    pub config: BTreeMap<String, String>,
    pub summary: Summary,
    pub images: Vec<ImageMetrics>,
}

impl EvalReport {
    /// Rows are sorted by name first, so aggregates do not depend on the
    /// order the inputs were enumerated in.
    pub fn new(mut images: Vec<ImageMetrics>, config: BTreeMap<String, String>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyData("no images to report"));
        }
        images.sort_by(|a, b| a.name.cmp(&b.name));
        let col = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).collect::<Vec<_>>();
        let summary = Summary {
            count: images.len(),
            mse: Stat::of(&col(|m| m.mse)),
            psnr: Stat::of(&col(|m| m.psnr)),
            clean_prob: Stat::of(&col(|m| m.clean_prob)),
        };
        Ok(Self { metrics: METRIC_KIND.into(), config, summary, images })
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format { path: "<report>".into(), reason: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ts: f64,
    pub perturb_reference: bool,
    pub mean_mse: f64,
    pub median_mse: f64,
    pub mean_psnr: f64,
    pub mean_clean_prob: f64,
    pub clean_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub metrics: String,
    pub sweep: String,
    pub config: BTreeMap<String, String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn new(sweep: &str, rows: Vec<AblationRow>, config: BTreeMap<String, String>) -> Self {
        Self { metrics: METRIC_KIND.into(), sweep: sweep.into(), config, rows }
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format { path: "<report>".into(), reason: e.to_string() })
    }

    /// Plot-ready table: `setting`, `mean_mse`, `mean_clean_prob`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("setting\tmean_mse\tmean_clean_prob\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{:?}\t{:?}\n", r.setting, r.mean_mse, r.mean_clean_prob));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    let body = toml::to_string(value).map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
    Ok(format!("{HEADER}\n{body}"))
}
