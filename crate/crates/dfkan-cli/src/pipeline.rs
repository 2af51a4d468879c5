//! Shared run pipeline: resolve a config into dataset/model/optimizer,
//! train, evaluate, and write the run artifacts (checkpoint, manifest,
//! history).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dfkan::analysis::effective_params;
use dfkan::data::{auto_sigma, default_sigma, gen_by_name, load_delimited, Dataset};
use dfkan::model::{Model, ModelConfig};
use dfkan::optim::{mse, r2, split_indices, train, SplitIndices, TrainConfig, TrainHistory};
use dfkan::Tensor;

use crate::config::{NoiseSpec, RunConfig};
use crate::runio::{write_history, Manifest, ManifestDataset, ManifestMetrics};

pub struct PreparedRun {
    pub canonical: String,
    pub hash: [u8; 32],
    pub run_id: String,
    pub model_config: ModelConfig,
    /// Dataset in model units (after any normalization).
    pub data: Dataset,
    /// Dataset in original units.
    pub raw: Dataset,
    pub split: SplitIndices,
    pub train_config: TrainConfig,
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let section = &config.dataset;
    match (&section.kind, &section.path) {
        (Some(kind), None) => {
            let sigma = match &section.noise {
                NoiseSpec::Sigma(s) => {
                    if *s < 0.0 {
                        bail!("noise sigma must be non-negative");
                    }
                    *s
                }
                NoiseSpec::Named(name) => match name.as_str() {
                    "auto" => auto_sigma(kind, section.n, config.seed).map_err(anyhow::Error::new)?,
                    "default" => {
                        default_sigma(kind, section.n, config.seed).map_err(anyhow::Error::new)?
                    }
                    other => bail!("unknown noise spec `{other}`"),
                },
            };
            gen_by_name(kind, section.n, sigma, config.seed).map_err(anyhow::Error::new)
        }
        (None, Some(path)) => {
            let delimiter = section.delimiter.as_bytes().first().copied().unwrap_or(b',');
            let target = section.target.as_deref().expect("validated");
            load_delimited(path, target, delimiter).map_err(anyhow::Error::new)
        }
        _ => unreachable!("validated at parse time"),
    }
}

pub fn prepare(config: RunConfig) -> Result<PreparedRun> {
    let canonical = config.canonical()?;
    let hash = config.hash()?;
    let run_id = config.run_id()?;
    let model_config = config.model_config()?;
    let raw = load_dataset(&config)?;
    if raw.dims() != model_config.n_features() {
        bail!(
            "dataset has {} features but the model expects {}",
            raw.dims(),
            model_config.n_features()
        );
    }
    let [ft, fv, fs] = config.dataset.split;
    let split =
        split_indices(raw.n(), (ft, fv, fs), config.seed).map_err(anyhow::Error::new)?;

    let mut data = raw.clone();
    if config.wants_feature_scaling(&model_config)? {
        data = data.scale_features(&split.train);
    }
    if config.wants_target_scaling()? {
        data = data.scale_target(&split.train);
    }

    let train_config = config.train_config()?;
    Ok(PreparedRun {
        canonical,
        hash,
        run_id,
        model_config,
        data,
        raw,
        split,
        train_config,
    })
}

pub struct RunOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub metrics: ManifestMetrics,
}

/// Predictions over `x` rows, mapped back to original target units.
pub fn predict_original_units(model: &Model, data: &Dataset, rows: &[usize]) -> Result<Tensor> {
    let x = data.x.select_rows(rows);
    let pred = model.predict(&x).map_err(anyhow::Error::new)?;
    Ok(match &data.provenance.target_scaling {
        Some(t) => t.invert(&pred),
        None => pred,
    })
}

pub fn execute(prepared: &mut PreparedRun) -> Result<RunOutcome> {
    let mut model = Model::build(prepared.model_config.clone()).map_err(anyhow::Error::new)?;
    let history = train(
        &mut model,
        &prepared.data,
        &prepared.split,
        &prepared.train_config,
    )
    .map_err(anyhow::Error::new)?;
    let train_seconds: f64 = history.epochs.iter().map(|e| e.seconds).sum();

    let eval_rows = if prepared.split.test.is_empty() {
        &prepared.split.train
    } else {
        &prepared.split.test
    };
    let pred = predict_original_units(&model, &prepared.data, eval_rows)?;
    let y_true = prepared.raw.y.select_rows(eval_rows);
    let test_mse = mse(&pred, &y_true).map_err(anyhow::Error::new)?;
    let test_r2 = r2(&pred, &y_true).map_err(anyhow::Error::new)?;

    let x_test = prepared.data.x.select_rows(eval_rows);
    let y_test = prepared.data.y.select_rows(eval_rows);
    let effective = effective_params(&model, &x_test, &y_test, 0.9)
        .map_err(anyhow::Error::new)?
        .effective_params;

    Ok(RunOutcome {
        metrics: ManifestMetrics {
            test_mse,
            test_r2,
            total_params: prepared.model_config.param_total(),
            effective_params: effective,
            train_seconds,
        },
        model,
        history,
    })
}

pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub history: PathBuf,
}

pub fn run_paths(out_dir: &Path, run_id: &str) -> RunPaths {
    RunPaths {
        checkpoint: out_dir.join(format!("{run_id}.ckpt")),
        manifest: out_dir.join(format!("{run_id}.manifest.toml")),
        history: out_dir.join(format!("{run_id}.history.csv")),
    }
}

/// Write the three run artifacts and return the manifest path.
pub fn write_run(out_dir: &Path, prepared: &PreparedRun, outcome: &RunOutcome) -> Result<RunPaths> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let paths = run_paths(out_dir, &prepared.run_id);
    outcome
        .model
        .save_checkpoint(&paths.checkpoint, &prepared.hash)
        .map_err(anyhow::Error::new)?;
    let manifest = Manifest {
        run_id: prepared.run_id.clone(),
        config_hash: crate::config::hex_of(&prepared.hash),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        metrics: outcome.metrics.clone(),
        dataset: ManifestDataset::from_provenance(
            &prepared.data.provenance,
            &prepared.data.feature_names,
        ),
        config_canonical: prepared.canonical.clone(),
    };
    manifest.save(&paths.manifest)?;
    write_history(&paths.history, &outcome.history)?;
    Ok(paths)
}

/// Rebuild the prepared run and trained model from a manifest + checkpoint.
pub fn restore(manifest_path: &Path) -> Result<(PreparedRun, Model, Manifest)> {
    let manifest = Manifest::load(manifest_path)?;
    let config = RunConfig::parse(&manifest.config_canonical)?;
    let mut prepared = prepare(config)?;
    if crate::config::hex_of(&prepared.hash) != manifest.config_hash {
        bail!("manifest config hash does not match its canonical config text");
    }
    let ckpt = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(format!("{}.ckpt", manifest.run_id));
    let mut model = Model::build(prepared.model_config.clone()).map_err(anyhow::Error::new)?;
    model
        .load_checkpoint(&ckpt, &prepared.hash)
        .map_err(anyhow::Error::new)?;
    prepared.run_id = manifest.run_id.clone();
    Ok((prepared, model, manifest))
}
