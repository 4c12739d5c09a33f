use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::frechet::{frechet_proxy, FeatureExtractor, DEFAULT_FEATURE_DIM};
use super::ssim::{mse, psnr, ssim};
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub ssim_window: usize,
    pub data_range: f64,
    pub feature_dim: usize,
    pub projection_seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ssim_window: 7,
            data_range: 2.0,
            feature_dim: DEFAULT_FEATURE_DIM,
            projection_seed: 0,
        }
    }
}

/// A generated volume and the reference it should match.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub name: String,
    pub delta: Option<f64>,
    pub generated: Volume,
    pub reference: Volume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub delta: Option<f64>,
    pub ssim: f64,
    pub mse: f64,
    /// Absent when the volumes are identical.
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub delta: f64,
    pub count: usize,
    pub mean_ssim: f64,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricConfig,
    pub pair_count: usize,
    pub mean_ssim: f64,
    pub mean_mse: f64,
    /// Mean over pairs with a finite PSNR.
    pub mean_psnr: Option<f64>,
    pub per_delta: Vec<DeltaSummary>,
    /// `None` when a set has fewer than `feature_dim + 1` volumes.
    pub frechet_proxy: Option<f64>,
    pub pairs: Vec<PairMetrics>,
}

/// Interval encoded in a `visit-NN` path component, relative to visit 0.
pub fn delta_from_name(name: &str) -> Option<f64> {
    let start = name.rfind("visit-")? + "visit-".len();
    let digits: String = name[start..].chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse::<u32>().ok().map(f64::from)
}

pub fn evaluate(pairs: &[EvalPair], config: &MetricConfig) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples { found: 0, needed: 1 });
    }
    let metrics = pairs
        .iter()
        .map(|p| {
            Ok(PairMetrics {
                name: p.name.clone(),
                delta: p.delta,
                ssim: ssim(&p.generated, &p.reference, config.ssim_window, config.data_range)?,
                mse: mse(&p.generated, &p.reference)?,
                psnr: psnr(&p.generated, &p.reference, config.data_range)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups: BTreeMap<u64, Vec<&PairMetrics>> = BTreeMap::new();
    for m in &metrics {
        if let Some(d) = m.delta {
            groups.entry(d.to_bits()).or_default().push(m);
        }
    }
    let mut per_delta: Vec<DeltaSummary> = groups
        .into_values()
        .map(|g| DeltaSummary {
            delta: g[0].delta.unwrap_or_default(),
            count: g.len(),
            mean_ssim: g.iter().map(|m| m.ssim).sum::<f64>() / g.len() as f64,
            mean_mse: g.iter().map(|m| m.mse).sum::<f64>() / g.len() as f64,
        })
        .collect();
    per_delta.sort_by(|a, b| a.delta.total_cmp(&b.delta));

    let n = metrics.len() as f64;
    let finite_psnr: Vec<f64> = metrics.iter().filter_map(|m| m.psnr).collect();
    let frechet = if pairs.len() > config.feature_dim {
        let extractor = FeatureExtractor::new(
            pairs[0].reference.shape(),
            config.feature_dim,
            config.projection_seed,
        )?;
        let generated: Vec<Volume> = pairs.iter().map(|p| p.generated.clone()).collect();
        let reference: Vec<Volume> = pairs.iter().map(|p| p.reference.clone()).collect();
        Some(frechet_proxy(&generated, &reference, &extractor)?)
    } else {
        None
    };
    Ok(MetricReport {
        config: config.clone(),
        pair_count: metrics.len(),
        mean_ssim: metrics.iter().map(|m| m.ssim).sum::<f64>() / n,
        mean_mse: metrics.iter().map(|m| m.mse).sum::<f64>() / n,
        mean_psnr: (!finite_psnr.is_empty())
            .then(|| finite_psnr.iter().sum::<f64>() / finite_psnr.len() as f64),
        per_delta,
        frechet_proxy: frechet,
        pairs: metrics,
    })
}

impl MetricReport {
    /// Summary table: one method row, then the per-interval breakdown.
    pub fn to_table(&self, method: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>16} {:>10}", "method", "frechet-proxy", "ssim");
        let _ = writeln!(
            out,
            "{:<20} {:>16} {:>10.4}",
            method,
            fmt(self.frechet_proxy),
            self.mean_ssim
        );
        if !self.per_delta.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:>8} {:>8} {:>10} {:>12}", "delta", "pairs", "ssim", "mse");
            for d in &self.per_delta {
                let _ = writeln!(
                    out,
                    "{:>8} {:>8} {:>10.4} {:>12.6}",
                    d.delta, d.count, d.mean_ssim, d.mean_mse
                );
            }
        }
        let _ = writeln!(
            out,
            "\n{} pairs, mean mse {:.6}, mean psnr {}",
            self.pair_count,
            self.mean_mse,
            fmt(self.mean_psnr)
        );
        out
    }

    /// One JSON object per pair, then a final `summary` record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&json_line(&Tagged {
                record: "pair",
                body: p,
            })?);
            out.push('\n');
        }
        let summary = Summary {
            pair_count: self.pair_count,
            mean_ssim: self.mean_ssim,
            mean_mse: self.mean_mse,
            mean_psnr: self.mean_psnr,
            frechet_proxy: self.frechet_proxy,
            per_delta: &self.per_delta,
            config: &self.config,
        };
        out.push_str(&json_line(&Tagged {
            record: "summary",
            body: &summary,
        })?);
        out.push('\n');
        Ok(out)
    }
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    record: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct Summary<'a> {
    pair_count: usize,
    mean_ssim: f64,
    mean_mse: f64,
    mean_psnr: Option<f64>,
    frechet_proxy: Option<f64>,
    per_delta: &'a [DeltaSummary],
    config: &'a MetricConfig,
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::InvalidArgument(e.to_string()))
}
