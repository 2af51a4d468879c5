//! Subcommand implementations. Each returns a process exit code: 0 on
//! success, 1 on a failed check, with configuration and numeric failures
//! surfaced as errors and mapped in `main`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};

use dfkan::analysis::{
    attention_report, decompose_activations, effective_params, extract_symbolic, gradient_field,
    linspace,
};
use dfkan::gradcheck::{gradcheck_model, GRADCHECK_H, GRADCHECK_TOL};
use dfkan::model::Model;

use crate::config::{NoiseSpec, RunConfig, SuiteConfig};
use crate::pipeline::{self, PreparedRun};
use crate::runio::{fmt_f64, resolve_out_dir, write_table};

pub fn cmd_train(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<i32> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let mut config = RunConfig::parse(&text)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let out_dir = resolve_out_dir(out);
    let mut prepared = pipeline::prepare(config)?;
    let outcome = pipeline::execute(&mut prepared)?;
    let paths = pipeline::write_run(&out_dir, &prepared, &outcome)?;
    println!("run {}", prepared.run_id);
    println!("  test_mse {}", fmt_f64(outcome.metrics.test_mse));
    println!("  test_r2 {}", fmt_f64(outcome.metrics.test_r2));
    println!("  total_params {}", outcome.metrics.total_params);
    match outcome.metrics.effective_params {
        Some(e) => println!("  effective_params {e}"),
        None => println!("  effective_params n/a (baseline r2 <= 0)"),
    }
    println!("  manifest {}", paths.manifest.display());
    Ok(0)
}

struct CellRun {
    cell: usize,
    mse: f64,
    r2: f64,
    params: usize,
    seconds: f64,
}

pub fn cmd_benchmark(
    suite_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: usize,
) -> Result<i32> {
    let text = fs::read_to_string(suite_path)
        .with_context(|| format!("reading {}", suite_path.display()))?;
    let mut suite = SuiteConfig::parse(&text)?;
    if let Some(seed) = seed {
        suite.seed = seed;
    }
    let out_dir = resolve_out_dir(out);
    fs::create_dir_all(&out_dir)?;

    // One job per (cell, repeat); repeats vary the full pipeline seed.
    let jobs: Vec<(usize, u64)> = (0..suite.cells.len())
        .flat_map(|c| (0..suite.repeats).map(move |r| (c, suite.seed + r as u64)))
        .collect();
    let results: Mutex<Vec<std::result::Result<CellRun, String>>> = Mutex::new(Vec::new());
    let next: AtomicUsize = AtomicUsize::new(0);

    let worker = |_: usize| {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            if i >= jobs.len() {
                break;
            }
            let (cell_idx, run_seed) = jobs[i];
            let run = suite.cells[cell_idx].as_run(run_seed);
            let outcome = (|| -> Result<CellRun> {
                let mut prepared = pipeline::prepare(run)?;
                let outcome = pipeline::execute(&mut prepared)?;
                pipeline::write_run(&out_dir, &prepared, &outcome)?;
                Ok(CellRun {
                    cell: cell_idx,
                    mse: outcome.metrics.test_mse,
                    r2: outcome.metrics.test_r2,
                    params: outcome.metrics.total_params,
                    seconds: outcome.metrics.train_seconds,
                })
            })();
            results
                .lock()
                .unwrap()
                .push(outcome.map_err(|e| format!("cell {cell_idx} seed {run_seed}: {e:#}")));
        }
    };

    let workers = threads.max(1).min(jobs.len().max(1));
    if workers <= 1 {
        worker(0);
    } else {
        std::thread::scope(|scope| {
            for w in 0..workers {
                scope.spawn(move || worker(w));
            }
        });
    }

    let results = results.into_inner().unwrap();
    let mut failures: Vec<String> = Vec::new();
    let mut per_cell: Vec<Vec<&CellRun>> = vec![Vec::new(); suite.cells.len()];
    for r in &results {
        match r {
            Ok(run) => per_cell[run.cell].push(run),
            Err(e) => failures.push(e.clone()),
        }
    }
    for f in &failures {
        eprintln!("benchmark failure: {f}");
    }

    let stats = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };

    let mut rows: Vec<(String, String, Vec<String>)> = Vec::new();
    for (cell_idx, cell) in suite.cells.iter().enumerate() {
        let runs = &per_cell[cell_idx];
        let dataset = cell.dataset_label();
        let label = cell.label();
        let fail_count = suite.repeats - runs.len();
        let row = if runs.is_empty() {
            vec![
                dataset.clone(),
                label.clone(),
                "0".into(),
                fail_count.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]
        } else {
            let mses: Vec<f64> = runs.iter().map(|r| r.mse).collect();
            let r2s: Vec<f64> = runs.iter().map(|r| r.r2).collect();
            let secs: Vec<f64> = runs.iter().map(|r| r.seconds).collect();
            let (mse_m, mse_s) = stats(&mses);
            let (r2_m, r2_s) = stats(&r2s);
            let (sec_m, sec_s) = stats(&secs);
            vec![
                dataset.clone(),
                label.clone(),
                runs.len().to_string(),
                fail_count.to_string(),
                fmt_f64(mse_m),
                fmt_f64(mse_s),
                fmt_f64(r2_m),
                fmt_f64(r2_s),
                runs[0].params.to_string(),
                fmt_f64(sec_m),
                fmt_f64(sec_s),
            ]
        };
        rows.push((dataset, label, row));
    }
    rows.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let table: Vec<Vec<String>> = rows.into_iter().map(|r| r.2).collect();
    let table_path = out_dir.join("suite.csv");
    write_table(
        &table_path,
        &[
            "dataset",
            "model",
            "repeats",
            "failures",
            "test_mse_mean",
            "test_mse_std",
            "test_r2_mean",
            "test_r2_std",
            "params",
            "train_seconds_mean",
            "train_seconds_std",
        ],
        &table,
    )?;
    println!("suite table {}", table_path.display());
    Ok(if failures.is_empty() { 0 } else { 1 })
}

pub fn cmd_gradcheck(config_path: &Path, seed: Option<u64>) -> Result<i32> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let mut config = RunConfig::parse(&text)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let prepared = pipeline::prepare(config)?;
    let model = Model::build(prepared.model_config.clone()).map_err(anyhow::Error::new)?;

    // Small deterministic batch drawn from the model-unit dataset.
    let batch = 8.min(prepared.data.n());
    let rows: Vec<usize> = prepared.split.train.iter().copied().take(batch).collect();
    let x = prepared.data.x.select_rows(&rows);
    let y = prepared.data.y.select_rows(&rows);

    let report = gradcheck_model(&model, &x, &y, GRADCHECK_H).map_err(anyhow::Error::new)?;
    for group in &report.groups {
        println!(
            "{}: worst_rel_err {} over {} scalars",
            group.group,
            fmt_f64(group.worst_rel_err),
            group.scalars
        );
    }
    let worst = report.worst();
    if report.passed(GRADCHECK_TOL) {
        println!("gradcheck PASS (worst {})", fmt_f64(worst));
        Ok(0)
    } else {
        println!("gradcheck FAIL (worst {}, tolerance {GRADCHECK_TOL})", fmt_f64(worst));
        Ok(1)
    }
}

pub struct AnalyzeArgs {
    pub retain: f64,
    pub max_degree: usize,
    pub layer: Option<usize>,
    pub grid_n: usize,
}

fn train_range(prepared: &PreparedRun, column: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &r in &prepared.split.train {
        let v = prepared.data.x.get(r, column);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || hi <= lo {
        (-1.0, 1.0)
    } else {
        (lo, hi)
    }
}

pub fn cmd_analyze(
    manifest_path: &Path,
    instrument: &str,
    out: Option<PathBuf>,
    args: AnalyzeArgs,
) -> Result<i32> {
    let (prepared, model, manifest) = pipeline::restore(manifest_path)?;
    let out_dir = out
        .or_else(|| std::env::var_os("DFKAN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| {
            manifest_path
                .parent()
                .unwrap_or(Path::new("."))
                .to_path_buf()
        });
    fs::create_dir_all(&out_dir)?;
    let artifact = out_dir.join(format!("{}.{}.csv", manifest.run_id, instrument));
    let summary_path = out_dir.join(format!("{}.{}.summary.toml", manifest.run_id, instrument));

    match instrument {
        "decompose" => {
            let layer = args
                .layer
                .unwrap_or(prepared.model_config.layers.len().saturating_sub(2));
            let (lo, hi) = train_range(&prepared, 0);
            let grid = linspace(lo, hi, args.grid_n);
            let d = decompose_activations(&model, layer, &grid).map_err(anyhow::Error::new)?;
            let mut header: Vec<String> = vec!["x".into()];
            for n in &d.neurons {
                header.push(format!("neuron_{}", n.neuron));
            }
            header.push("reconstruction".into());
            header.push("prediction".into());
            let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let mut rows = Vec::new();
            for (i, &x) in d.grid.iter().enumerate() {
                let mut row = vec![fmt_f64(x)];
                for n in &d.neurons {
                    row.push(fmt_f64(n.values[i]));
                }
                row.push(fmt_f64(d.reconstruction[i]));
                row.push(fmt_f64(d.prediction[i]));
                rows.push(row);
            }
            write_table(&artifact, &header_refs, &rows)?;
            let identity_err = d
                .reconstruction
                .iter()
                .zip(&d.prediction)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let weights: Vec<String> = d
                .neurons
                .iter()
                .map(|n| format!("neuron_{} = {}", n.neuron, fmt_f64(n.weight)))
                .collect();
            fs::write(
                &summary_path,
                format!(
                    "instrument = \"decompose\"\nlayer = {layer}\nbias = {}\nidentity_max_abs_err = {}\n\n[weights]\n{}\n",
                    fmt_f64(d.bias),
                    fmt_f64(identity_err),
                    weights.join("\n")
                ),
            )?;
        }
        "prune" => {
            let rows_idx = if prepared.split.test.is_empty() {
                &prepared.split.train
            } else {
                &prepared.split.test
            };
            let x_test = prepared.data.x.select_rows(rows_idx);
            let y_test = prepared.data.y.select_rows(rows_idx);
            let report = effective_params(&model, &x_test, &y_test, args.retain)
                .map_err(anyhow::Error::new)?;
            let rows: Vec<Vec<String>> = report
                .sweep
                .iter()
                .map(|&(frac, r2)| {
                    vec![
                        fmt_f64(frac),
                        ((frac * report.total_params as f64).round() as usize).to_string(),
                        fmt_f64(r2),
                    ]
                })
                .collect();
            write_table(&artifact, &["kept_fraction", "kept_count", "test_r2"], &rows)?;
            fs::write(
                &summary_path,
                format!(
                    "instrument = \"prune\"\nbaseline_r2 = {}\nretain = {}\ntotal_params = {}\neffective_params = {}\napplicable = {}\n",
                    fmt_f64(report.baseline_r2),
                    fmt_f64(report.retain),
                    report.total_params,
                    report.effective_params.map_or_else(|| "-1".into(), |e| e.to_string()),
                    report.effective_params.is_some(),
                ),
            )?;
        }
        "extract" => {
            let (lo, hi) = train_range(&prepared, 0);
            let mut formula = extract_symbolic(&model, args.max_degree, (lo, hi))
                .map_err(anyhow::Error::new)?;
            // Re-express in original data units.
            if let Some(scaling) = &prepared.data.provenance.feature_scaling {
                let (a, b) = scaling.affine(0);
                formula = formula.compose_input_affine(a, b);
            }
            if let Some(t) = &prepared.data.provenance.target_scaling {
                formula = formula.scale_output(t.std, t.mean);
            }
            let rows: Vec<Vec<String>> = formula
                .coefficients
                .iter()
                .enumerate()
                .map(|(d, &c)| vec![d.to_string(), fmt_f64(c)])
                .collect();
            write_table(&artifact, &["degree", "coefficient"], &rows)?;
            fs::write(
                &summary_path,
                format!(
                    "instrument = \"extract\"\neligible = true\nresidual = {}\ncomposed_degree = {}\nprobe_lo = {}\nprobe_hi = {}\n",
                    fmt_f64(formula.residual),
                    formula.composed_degree,
                    fmt_f64(lo),
                    fmt_f64(hi),
                ),
            )?;
        }
        "attention" => {
            let entries = attention_report(&model).map_err(anyhow::Error::new)?;
            let names = &prepared.data.feature_names;
            let rows: Vec<Vec<String>> = entries
                .iter()
                .enumerate()
                .map(|(rank, e)| {
                    vec![
                        rank.to_string(),
                        e.feature.to_string(),
                        names
                            .get(e.feature)
                            .cloned()
                            .unwrap_or_else(|| format!("f{}", e.feature)),
                        fmt_f64(e.alpha),
                        fmt_f64(e.logit),
                    ]
                })
                .collect();
            write_table(
                &artifact,
                &["rank", "feature_index", "feature_name", "alpha", "logit"],
                &rows,
            )?;
            let total: f64 = entries.iter().map(|e| e.alpha).sum();
            fs::write(
                &summary_path,
                format!(
                    "instrument = \"attention\"\nfeatures = {}\nalpha_sum = {}\n",
                    entries.len(),
                    fmt_f64(total)
                ),
            )?;
        }
        "gradfield" => {
            let (x_lo, x_hi) = train_range(&prepared, 0);
            let (y_lo, y_hi) = train_range(&prepared, 1.min(prepared.data.dims() - 1));
            let xs = linspace(x_lo, x_hi, args.grid_n);
            let ys = linspace(y_lo, y_hi, args.grid_n);
            let field = gradient_field(&model, &xs, &ys).map_err(anyhow::Error::new)?;
            let mut rows = Vec::new();
            for (iy, &y) in ys.iter().enumerate() {
                for (ix, &x) in xs.iter().enumerate() {
                    let idx = iy * xs.len() + ix;
                    rows.push(vec![
                        fmt_f64(x),
                        fmt_f64(y),
                        fmt_f64(field.z[idx]),
                        fmt_f64(field.gx[idx]),
                        fmt_f64(field.gy[idx]),
                        fmt_f64(field.magnitude[idx]),
                    ]);
                }
            }
            write_table(
                &artifact,
                &["x", "y", "z", "gx", "gy", "grad_magnitude"],
                &rows,
            )?;
            fs::write(
                &summary_path,
                format!(
                    "instrument = \"gradfield\"\ngrid_n = {}\nx_lo = {}\nx_hi = {}\ny_lo = {}\ny_hi = {}\nunits = \"model\"\n",
                    args.grid_n,
                    fmt_f64(x_lo),
                    fmt_f64(x_hi),
                    fmt_f64(y_lo),
                    fmt_f64(y_hi),
                ),
            )?;
        }
        other => bail!("unknown instrument `{other}` (expected decompose|prune|extract|attention|gradfield)"),
    }
    println!("wrote {}", artifact.display());
    Ok(0)
}

pub fn cmd_gen_data(
    kind: &str,
    n: usize,
    noise: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<i32> {
    let noise_spec = match noise {
        None => NoiseSpec::Named("default".into()),
        Some(s) => match s.parse::<f64>() {
            Ok(v) => NoiseSpec::Sigma(v),
            Err(_) => NoiseSpec::Named(s.to_string()),
        },
    };
    let sigma = match &noise_spec {
        NoiseSpec::Sigma(s) => *s,
        NoiseSpec::Named(name) => match name.as_str() {
            "auto" => dfkan::data::auto_sigma(kind, n, seed).map_err(anyhow::Error::new)?,
            "default" => dfkan::data::default_sigma(kind, n, seed).map_err(anyhow::Error::new)?,
            other => bail!("unknown noise spec `{other}`"),
        },
    };
    let ds = dfkan::data::gen_by_name(kind, n, sigma, seed).map_err(anyhow::Error::new)?;

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut text = String::new();
    text.push_str(&ds.feature_names.join(","));
    text.push_str(",y\n");
    for r in 0..ds.n() {
        let mut row: Vec<String> = (0..ds.dims()).map(|c| fmt_f64(ds.x.get(r, c))).collect();
        row.push(fmt_f64(ds.y.get(r, 0)));
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;

    let sidecar = PathBuf::from(format!("{}.provenance.toml", out.display()));
    let p = &ds.provenance;
    fs::write(
        &sidecar,
        format!(
            "generator = \"{}\"\nseed = {}\nnoise_sigma = {}\nn = {}\nfeature_names = [{}]\n",
            p.generator,
            p.seed,
            fmt_f64(p.noise_sigma),
            p.n,
            ds.feature_names
                .iter()
                .map(|n| format!("\"{n}\""))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )?;
    println!("wrote {} and {}", out.display(), sidecar.display());
    Ok(0)
}

/// Returns err exit code for an anyhow error chain: numeric aborts map to
/// 3, everything else to 2.
pub fn classify_error(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<dfkan::Error>() {
        if matches!(core, dfkan::Error::Numeric(_)) {
            return 3;
        }
    }
    2
}
