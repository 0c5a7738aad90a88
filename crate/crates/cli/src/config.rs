//! Experiment configuration: one versioned TOML document, round-trippable,
//! validated against module preconditions before any computation runs, and
//! echoed verbatim into every report.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tapscope_core::model::{ModelParams, Variant};
use tapscope_core::tap::Eigensolver;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub n: usize,
    pub lambda: f64,
    pub gamma0: f64,
    /// "fmm" or "ams"
    pub variant: String,
    #[serde(default = "default_true")]
    pub fix_spike_to_ones: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List { list: Vec<u64> },
    Range { start: u64, count: u64 },
}

impl SeedSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::List { list } => list.clone(),
            SeedSpec::Range { start, count } => (*start..start + count).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_probe_points")]
    pub probe_points: usize,
    pub seeds: SeedSpec,
    #[serde(default = "default_quad_order")]
    pub quadrature_order: usize,
    /// "dense", "lanczos", or "auto"
    #[serde(default = "default_eigensolver")]
    pub eigensolver: String,
    /// iterations used when the constraint pair feeds the n-sweep
    #[serde(default = "default_sf_k")]
    pub sf_k: usize,
    #[serde(default = "default_sf_grid")]
    pub sf_n_grid: Vec<usize>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_se_samples")]
    pub se_samples: usize,
}

fn default_k() -> usize {
    12
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_probe_points() -> usize {
    50
}
fn default_quad_order() -> usize {
    200
}
fn default_eigensolver() -> String {
    "dense".into()
}
fn default_sf_k() -> usize {
    3
}
fn default_sf_grid() -> Vec<usize> {
    vec![500, 1000, 2000]
}
fn default_restarts() -> usize {
    20
}
fn default_se_samples() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<String> {
    vec!["json".into(), "csv".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelSection,
    pub run: RunSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            model: ModelSection {
                n: 2000,
                lambda: 1.5,
                gamma0: 0.3,
                variant: "ams".into(),
                fix_spike_to_ones: true,
            },
            run: RunSection {
                k: default_k(),
                epsilon: default_epsilon(),
                probe_points: default_probe_points(),
                seeds: SeedSpec::Range { start: 0, count: 20 },
                quadrature_order: default_quad_order(),
                eigensolver: default_eigensolver(),
                sf_k: default_sf_k(),
                sf_n_grid: default_sf_grid(),
                restarts: default_restarts(),
                se_samples: default_se_samples(),
            },
            output: OutputSection {
                dir: default_out_dir(),
                formats: default_formats(),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text).context("parsing config")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn variant(&self) -> anyhow::Result<Variant> {
        Ok(self.model.variant.parse::<Variant>()?)
    }

    pub fn eigensolver(&self) -> anyhow::Result<Eigensolver> {
        match self.run.eigensolver.as_str() {
            "dense" => Ok(Eigensolver::Dense),
            "lanczos" => Ok(Eigensolver::Lanczos { iters: 200 }),
            "auto" => Ok(Eigensolver::Auto),
            other => bail!("unknown eigensolver '{other}' (expected dense|lanczos|auto)"),
        }
    }

    pub fn model_params(&self) -> anyhow::Result<ModelParams> {
        Ok(ModelParams {
            n: self.model.n,
            lambda: self.model.lambda,
            gamma0: self.model.gamma0,
            variant: self.variant()?,
            fix_spike_to_ones: self.model.fix_spike_to_ones,
        })
    }

    /// Validate against module preconditions before any computation.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("unsupported config version {}", self.version);
        }
        self.model_params()?.validate().map_err(anyhow::Error::from)?;
        self.eigensolver()?;
        if self.run.k < 1 {
            bail!("k must be >= 1");
        }
        if self.run.epsilon < 0.0 {
            bail!("epsilon must be nonnegative");
        }
        if self.run.quadrature_order < 2 {
            bail!("quadrature order must be >= 2");
        }
        if self.run.seeds.seeds().is_empty() {
            bail!("seed specification is empty");
        }
        if self.run.sf_k < 2 {
            bail!("sf_k must be >= 2");
        }
        for f in &self.output.formats {
            if !matches!(f.as_str(), "json" | "csv" | "svg") {
                bail!("unknown output format '{f}'");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_config() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn seed_specs_expand() {
        let r = SeedSpec::Range { start: 3, count: 4 };
        assert_eq!(r.seeds(), vec![3, 4, 5, 6]);
        let l = SeedSpec::List { list: vec![9, 1] };
        assert_eq!(l.seeds(), vec![9, 1]);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.variant = "bogus".into();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.output.formats = vec!["pdf".into()];
        assert!(cfg.validate().is_err());
    }
}
