//! Deterministic synthetic benchmark generators and delimited-text
//! ingestion.
//!
//! Every generator is a pure function of (seed, N): features and noise draw
//! from separate derived streams, so the same seed yields identical
//! features at any noise level and the clean target is recoverable by
//! regenerating with sigma = 0.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Per-column min-max scaling fitted on a row subset; maps [lo, hi] to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaling {
    pub per_column: Vec<(f64, f64)>,
}

impl FeatureScaling {
    pub fn fit(x: &Tensor, rows: &[usize]) -> Self {
        let mut per_column = Vec::with_capacity(x.cols());
        for c in 0..x.cols() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &r in rows {
                lo = lo.min(x.get(r, c));
                hi = hi.max(x.get(r, c));
            }
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                // constant or empty column: identity mapping around its value
                let v = if lo.is_finite() { lo } else { 0.0 };
                per_column.push((v - 1.0, v + 1.0));
            } else {
                per_column.push((lo, hi));
            }
        }
        Self { per_column }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let (lo, hi) = self.per_column[c];
                out.set(r, c, 2.0 * (x.get(r, c) - lo) / (hi - lo) - 1.0);
            }
        }
        out
    }

    /// Affine form of column c as scaled = a * raw + b.
    pub fn affine(&self, c: usize) -> (f64, f64) {
        let (lo, hi) = self.per_column[c];
        let a = 2.0 / (hi - lo);
        (a, -1.0 - a * lo)
    }
}

/// Target z-scoring fitted on a row subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScaling {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaling {
    pub fn fit(y: &Tensor, rows: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = rows.iter().map(|&r| y.get(r, 0)).sum::<f64>() / n;
        let var = rows.iter().map(|&r| (y.get(r, 0) - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, y: &Tensor) -> Tensor {
        y.map(|v| (v - self.mean) / self.std)
    }

    pub fn invert(&self, y: &Tensor) -> Tensor {
        y.map(|v| v * self.std + self.mean)
    }
}

/// Where a dataset came from and how it was transformed.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub noise_sigma: f64,
    pub n: usize,
    pub notes: Vec<String>,
    pub feature_scaling: Option<FeatureScaling>,
    pub target_scaling: Option<TargetScaling>,
}

impl Provenance {
    fn new(generator: &str, seed: u64, noise_sigma: f64, n: usize) -> Self {
        Self {
            generator: generator.to_string(),
            seed,
            noise_sigma,
            n,
            notes: Vec::new(),
            feature_scaling: None,
            target_scaling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub feature_names: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.x.rows() == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if self.y.shape() != (self.x.rows(), 1) {
            return Err(Error::Data(format!(
                "target shape {:?} does not match {} rows",
                self.y.shape(),
                self.x.rows()
            )));
        }
        if self.feature_names.len() != self.x.cols() {
            return Err(Error::Data(format!(
                "{} feature names for {} columns",
                self.feature_names.len(),
                self.x.cols()
            )));
        }
        if !self.x.all_finite() || !self.y.all_finite() {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    /// Min-max scale features to [-1, 1] using statistics from `fit_rows`,
    /// recording the scaling in provenance.
    pub fn scale_features(&self, fit_rows: &[usize]) -> Dataset {
        let scaling = FeatureScaling::fit(&self.x, fit_rows);
        let mut out = self.clone();
        out.x = scaling.apply(&self.x);
        out.provenance.feature_scaling = Some(scaling);
        out
    }

    /// Z-score the target using statistics from `fit_rows`, recording the
    /// scaling in provenance.
    pub fn scale_target(&self, fit_rows: &[usize]) -> Dataset {
        let scaling = TargetScaling::fit(&self.y, fit_rows);
        let mut out = self.clone();
        out.y = scaling.apply(&self.y);
        out.provenance.target_scaling = Some(scaling);
        out
    }
}

// ---------------------------------------------------------------------------
// Closed-form target laws, exposed for direct testing.

pub fn friedman1_formula(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin()
        + 20.0 * (x[2] - 0.5).powi(2)
        + 10.0 * x[3]
        + 5.0 * x[4]
}

pub fn friedman2_formula(x: &[f64]) -> f64 {
    (x[0] * x[0] + (x[1] * x[2] - 1.0 / (x[1] * x[3])).powi(2)).sqrt()
}

pub fn feynman_i_18_12_formula(x: &[f64]) -> f64 {
    x[0] * x[1] * x[2] * x[3].sin()
}

pub fn feynman_ii_6_11_formula(x: &[f64]) -> f64 {
    x[0] * x[1].cos() / (x[2] * x[2])
}

pub fn damped_oscillator_formula(x: &[f64]) -> f64 {
    // features (t, gamma, omega), phase fixed at zero
    (-x[1] * x[0]).exp() * (x[2] * x[0]).sin()
}

pub fn franke_formula(x: f64, y: f64) -> f64 {
    0.75 * (-((9.0 * x - 2.0).powi(2) + (9.0 * y - 2.0).powi(2)) / 4.0).exp()
        + 0.75 * (-(9.0 * x + 1.0).powi(2) / 49.0 - (9.0 * y + 1.0) / 10.0).exp()
        + 0.5 * (-((9.0 * x - 7.0).powi(2) + (9.0 * y - 3.0).powi(2)) / 4.0).exp()
        - 0.2 * (-(9.0 * x - 4.0).powi(2) - (9.0 * y - 7.0).powi(2)).exp()
}

// ---------------------------------------------------------------------------
// Generators.

fn generate(
    id: &str,
    names: &[&str],
    ranges: &[(f64, f64)],
    n: usize,
    sigma: f64,
    seed: u64,
    formula: impl Fn(&[f64]) -> f64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Data("generator needs n >= 1".into()));
    }
    let d = ranges.len();
    let mut rng_x = rng::stream(seed, &[0xda7a, 1]);
    let mut rng_noise = rng::stream(seed, &[0xda7a, 2]);
    let mut x = Tensor::zeros(n, d);
    let mut y = Tensor::zeros(n, 1);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for r in 0..n {
        for (c, &(lo, hi)) in ranges.iter().enumerate() {
            x.set(r, c, rng_x.random_range(lo..hi));
        }
        let mut target = formula(x.row_slice(r));
        if sigma > 0.0 {
            target += sigma * normal.sample(&mut rng_noise);
        }
        y.set(r, 0, target);
    }
    let ds = Dataset {
        x,
        y,
        feature_names: names.iter().map(|s| s.to_string()).collect(),
        provenance: Provenance::new(id, seed, sigma, n),
    };
    ds.validate()?;
    Ok(ds)
}

/// Friedman #1: ten uniform features, five relevant.
pub fn gen_friedman1(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    generate(
        "friedman1",
        &["x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9", "x10"],
        &[(0.0, 1.0); 10],
        n,
        sigma,
        seed,
        friedman1_formula,
    )
}

/// Friedman #2, the impedance-like law over its canonical ranges.
pub fn gen_friedman2(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    generate(
        "friedman2",
        &["x1", "x2", "x3", "x4"],
        &[
            (0.0, 100.0),
            (40.0 * std::f64::consts::PI, 560.0 * std::f64::consts::PI),
            (0.0, 1.0),
            (1.0, 11.0),
        ],
        n,
        sigma,
        seed,
        friedman2_formula,
    )
}

/// Multiplicative torque-like law with one nuisance feature.
pub fn gen_feynman_i_18_12(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    generate(
        "feynman_i_18_12",
        &["x1", "x2", "x3", "x4", "x5"],
        &[
            (0.5, 2.0),
            (0.5, 2.0),
            (0.5, 2.0),
            (0.5, 2.0),
            (0.0, 1.0),
        ],
        n,
        sigma,
        seed,
        feynman_i_18_12_formula,
    )
}

/// Dipole-potential law, physical constants dropped.
pub fn gen_feynman_ii_6_11(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    generate(
        "feynman_ii_6_11",
        &["x1", "x2", "x3"],
        &[(0.5, 2.0), (0.0, std::f64::consts::PI), (0.5, 2.0)],
        n,
        sigma,
        seed,
        feynman_ii_6_11_formula,
    )
}

/// Damped oscillation over (t, gamma, omega) with zero phase.
pub fn gen_damped_oscillator(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    generate(
        "damped_oscillator",
        &["t", "gamma", "omega"],
        &[
            (0.0, 4.0 * std::f64::consts::PI),
            (0.1, 1.0),
            (1.0, 8.0),
        ],
        n,
        sigma,
        seed,
        damped_oscillator_formula,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositionalKind {
    SinExp,
    NestedTrig,
    GaussSin,
    SymQuadratic,
    ManifoldSincos,
    Franke,
}

impl CompositionalKind {
    pub fn id(&self) -> &'static str {
        match self {
            CompositionalKind::SinExp => "sin_exp",
            CompositionalKind::NestedTrig => "nested_trig",
            CompositionalKind::GaussSin => "gauss_sin",
            CompositionalKind::SymQuadratic => "sym_quadratic",
            CompositionalKind::ManifoldSincos => "manifold_sincos",
            CompositionalKind::Franke => "franke",
        }
    }
}

/// Compositional / surface-fitting targets.
pub fn gen_compositional(
    kind: CompositionalKind,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    use std::f64::consts::PI;
    match kind {
        CompositionalKind::SinExp => generate(
            kind.id(),
            &["x1"],
            &[(0.0, 2.0)],
            n,
            sigma,
            seed,
            |x| x[0].exp().sin(),
        ),
        CompositionalKind::NestedTrig => generate(
            kind.id(),
            &["x1"],
            &[(-PI, PI)],
            n,
            sigma,
            seed,
            |x| x[0].sin().cos().sin(),
        ),
        CompositionalKind::GaussSin => generate(
            kind.id(),
            &["x1"],
            &[(-2.0, 2.0)],
            n,
            sigma,
            seed,
            |x| (-x[0] * x[0]).exp() + 0.5 * (3.0 * x[0]).sin(),
        ),
        CompositionalKind::SymQuadratic => generate(
            kind.id(),
            &["x1"],
            &[(-2.0, 2.0)],
            n,
            sigma,
            seed,
            |x| 2.0 * x[0] * x[0] - x[0] + 0.5,
        ),
        CompositionalKind::ManifoldSincos => generate(
            kind.id(),
            &["x1", "x2"],
            &[(-PI, PI), (-PI, PI)],
            n,
            sigma,
            seed,
            |x| (2.0 * x[0]).sin() * (2.0 * x[1]).cos(),
        ),
        CompositionalKind::Franke => generate(
            kind.id(),
            &["x1", "x2"],
            &[(0.0, 1.0), (0.0, 1.0)],
            n,
            sigma,
            seed,
            |x| franke_formula(x[0], x[1]),
        ),
    }
}

/// Generator lookup by id string.
pub fn gen_by_name(kind: &str, n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    match kind {
        "friedman1" => gen_friedman1(n, sigma, seed),
        "friedman2" => gen_friedman2(n, sigma, seed),
        "feynman_i_18_12" => gen_feynman_i_18_12(n, sigma, seed),
        "feynman_ii_6_11" => gen_feynman_ii_6_11(n, sigma, seed),
        "damped_oscillator" => gen_damped_oscillator(n, sigma, seed),
        "sin_exp" => gen_compositional(CompositionalKind::SinExp, n, sigma, seed),
        "nested_trig" => gen_compositional(CompositionalKind::NestedTrig, n, sigma, seed),
        "gauss_sin" => gen_compositional(CompositionalKind::GaussSin, n, sigma, seed),
        "sym_quadratic" => gen_compositional(CompositionalKind::SymQuadratic, n, sigma, seed),
        "manifold_sincos" => gen_compositional(CompositionalKind::ManifoldSincos, n, sigma, seed),
        "franke" => gen_compositional(CompositionalKind::Franke, n, sigma, seed),
        other => Err(Error::Data(format!("unknown dataset kind `{other}`"))),
    }
}

/// Default noise for a generator: 5% of the clean target's standard
/// deviation for the symbolic-recovery task, zero elsewhere.
pub fn default_sigma(kind: &str, n: usize, seed: u64) -> Result<f64> {
    if kind != "sym_quadratic" {
        return Ok(0.0);
    }
    auto_sigma(kind, n, seed)
}

/// 5% of the clean target standard deviation.
pub fn auto_sigma(kind: &str, n: usize, seed: u64) -> Result<f64> {
    let clean = gen_by_name(kind, n, 0.0, seed)?;
    let data = clean.y.data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64;
    Ok(0.05 * var.sqrt())
}

// ---------------------------------------------------------------------------
// Delimited-text ingestion.

/// Load a delimited text file with a header row. Numeric columns are used
/// as-is; columns with any non-numeric cells are one-hot encoded over their
/// sorted distinct values. Rows with empty cells are dropped. The target
/// column must be fully numeric.
pub fn load_delimited(path: impl AsRef<Path>, target: &str, delimiter: u8) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header row: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::Data(format!("target column `{target}` not found in header")))?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {e}", i + 2)))?;
        let cells: Vec<String> = record.iter().map(|c| c.trim().to_string()).collect();
        if cells.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {} has {} cells, header has {}",
                i + 2,
                cells.len(),
                headers.len()
            )));
        }
        if cells.iter().any(|c| c.is_empty()) {
            continue; // missing value: drop the row
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(Error::Data("no usable data rows".into()));
    }

    // Column typing: numeric iff every cell parses.
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != target_idx).collect();
    let is_numeric: Vec<bool> = (0..headers.len())
        .map(|c| rows.iter().all(|r| r[c].parse::<f64>().is_ok()))
        .collect();

    let mut y = Tensor::zeros(rows.len(), 1);
    for (r, row) in rows.iter().enumerate() {
        let v: f64 = row[target_idx].parse().map_err(|_| {
            Error::Data(format!(
                "unparseable target cell at row {}, column `{}`: `{}`",
                r + 2,
                headers[target_idx],
                row[target_idx]
            ))
        })?;
        y.set(r, 0, v);
    }

    let mut feature_names: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut notes = Vec::new();
    for &c in &feature_cols {
        if is_numeric[c] {
            feature_names.push(headers[c].clone());
            columns.push(rows.iter().map(|r| r[c].parse::<f64>().unwrap()).collect());
        } else {
            let values: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
            notes.push(format!(
                "column `{}` one-hot encoded over {} values",
                headers[c],
                values.len()
            ));
            for value in values {
                feature_names.push(format!("{}={}", headers[c], value));
                columns.push(
                    rows.iter()
                        .map(|r| if r[c] == value { 1.0 } else { 0.0 })
                        .collect(),
                );
            }
        }
    }

    let d = columns.len();
    let mut x = Tensor::zeros(rows.len(), d);
    for (c, col) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            x.set(r, c, v);
        }
    }
    let mut provenance = Provenance::new(&format!("csv:{}", path.display()), 0, 0.0, rows.len());
    provenance.notes = notes;
    let ds = Dataset {
        x,
        y,
        feature_names,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}
