//! Run artifacts: manifests, history tables, and delimited output with a
//! fixed 17-significant-digit float format.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use dfkan::data::Provenance;
use dfkan::optim::TrainHistory;

/// 17 significant digits, scientific notation; round-trips f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_hash: String,
    pub tool_version: String,
    pub metrics: ManifestMetrics,
    pub dataset: ManifestDataset,
    /// Canonical config text this run's hash was computed over.
    pub config_canonical: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestMetrics {
    pub test_mse: f64,
    pub test_r2: f64,
    pub total_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_params: Option<usize>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestDataset {
    pub generator: String,
    pub seed: u64,
    pub noise_sigma: f64,
    pub n: usize,
    pub feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Per-column (lo, hi) of the min-max feature scaling, when applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_scaling: Option<Vec<[f64; 2]>>,
    /// (mean, std) of the target z-scoring, when applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_scaling: Option<[f64; 2]>,
}

impl ManifestDataset {
    pub fn from_provenance(p: &Provenance, feature_names: &[String]) -> Self {
        Self {
            generator: p.generator.clone(),
            seed: p.seed,
            noise_sigma: p.noise_sigma,
            n: p.n,
            feature_names: feature_names.to_vec(),
            notes: p.notes.clone(),
            feature_scaling: p
                .feature_scaling
                .as_ref()
                .map(|s| s.per_column.iter().map(|&(lo, hi)| [lo, hi]).collect()),
            target_scaling: p.target_scaling.map(|t| [t.mean, t.std]),
        }
    }
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("manifest serialization")?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).context("manifest parse error")
    }
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut out = String::from("epoch,train_mse,val_mse,seconds\n");
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch,
            fmt_f64(e.train_mse),
            e.val_mse.map(fmt_f64).unwrap_or_default(),
            fmt_f64(e.seconds),
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Comma-delimited table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Default output directory: `--out`, else `DFKAN_OUT`, else `./dfkan-out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("DFKAN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dfkan-out"))
}
