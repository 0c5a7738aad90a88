//! Report assembly and persistence: JSON is the source of truth, CSV and SVG
//! are projections for plotting. Every report embeds the noise-matrix
//! normalization convention and the quadrature order.

use anyhow::Context;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregates {
    pub median: f64,
    pub p05: f64,
    pub p95: f64,
}

/// Percentiles by nearest-rank over a copy of the values.
pub fn aggregate(values: &[f64]) -> Aggregates {
    assert!(!values.is_empty());
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |q: f64| {
        let idx = ((q * v.len() as f64).floor() as usize).min(v.len() - 1);
        v[idx]
    };
    Aggregates {
        median: at(0.5),
        p05: at(0.05),
        p95: at(0.95),
    }
}

pub fn median(values: &[f64]) -> f64 {
    aggregate(values).median
}

/// One acceptance-style check with its measured value and threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    /// direction of the comparison, e.g. "<=" or ">"
    pub cmp: String,
    pub detail: String,
    pub runtime_ms: u128,
    /// advisory runtime budget; exceeding it is reported, not failed
    pub budget_ms: Option<u128>,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        let budget = match self.budget_ms {
            Some(b) if self.runtime_ms > b => format!(" [over budget {}ms]", b),
            _ => String::new(),
        };
        format!(
            "criterion {:<28} {}  value {:>12.4e} {} {:<9.1e}  ({} ms){}  {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.value,
            self.cmp,
            self.threshold,
            self.runtime_ms,
            budget,
            self.detail
        )
    }
}

pub fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{secs}")
}

/// Write a report in the requested formats; missing directories are created.
pub fn write_outputs(
    dir: &Path,
    stem: &str,
    json: &serde_json::Value,
    csv: Option<&str>,
    svg: Option<&str>,
    formats: &[String],
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for f in formats {
        match f.as_str() {
            "json" => {
                let path = dir.join(format!("{stem}.json"));
                std::fs::write(&path, serde_json::to_string_pretty(json)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            "csv" => {
                if let Some(c) = csv {
                    let path = dir.join(format!("{stem}.csv"));
                    std::fs::write(&path, c)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
            }
            "svg" => {
                if let Some(s) = svg {
                    let path = dir.join(format!("{stem}.svg"));
                    std::fs::write(&path, s)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
            }
            other => anyhow::bail!("unknown format {other}"),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregates_are_order_statistics() {
        let vals: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let a = aggregate(&vals);
        assert_eq!(a.median, 50.0);
        assert_eq!(a.p05, 5.0);
        assert_eq!(a.p95, 95.0);
    }
}
