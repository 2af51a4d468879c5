//! Explainability instruments: activation decomposition, magnitude-pruning
//! effective-parameter counts, symbolic extraction, attention reporting,
//! and gradient-field evaluation. All instruments are read-only on the
//! model.

pub mod symbolic;

pub use symbolic::{extract_symbolic, SymbolicFormula};

use crate::error::{Error, Result};
use crate::layer::{FixedFn, InputStrategy, OutputStrategy};
use crate::model::Model;
use crate::optim::r2;
use crate::reg::{BatchNormState, BN_EPS};
use crate::tensor::Tensor;

/// Per-column scale/shift of a batch-norm position in inference mode.
pub(crate) fn bn_infer_affine(bn: &BatchNormState) -> (Vec<f64>, Vec<f64>) {
    let n = bn.width();
    let mut scale = Vec::with_capacity(n);
    let mut shift = Vec::with_capacity(n);
    for c in 0..n {
        let s = bn.gamma.get(0, c) / (bn.running_var.get(0, c) + BN_EPS).sqrt();
        scale.push(s);
        shift.push(bn.beta.get(0, c) - s * bn.running_mean.get(0, c));
    }
    (scale, shift)
}

fn is_identity_output(strategy: &OutputStrategy) -> bool {
    matches!(
        strategy,
        OutputStrategy::None | OutputStrategy::Fixed(FixedFn::Identity)
    )
}

// ---------------------------------------------------------------------------
// Activation decomposition.

#[derive(Debug, Clone)]
pub struct NeuronCurve {
    pub neuron: usize,
    /// Effective output weight (inference-mode affine tail folded in).
    pub weight: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub grid: Vec<f64>,
    /// Curves ranked by descending |weight|, ties by neuron index.
    pub neurons: Vec<NeuronCurve>,
    /// Effective output bias of the affine tail.
    pub bias: f64,
    /// Sum of all curves plus the bias; equals the model prediction.
    pub reconstruction: Vec<f64>,
    pub prediction: Vec<f64>,
}

/// Weighted per-neuron output curves of a hidden layer on a 1-D probe grid.
///
/// Every layer after `layer_index` must be purely affine (no input
/// transformation, no output activation) so the final prediction is an
/// exact linear combination of the probed layer's neuron outputs.
pub fn decompose_activations(
    model: &Model,
    layer_index: usize,
    grid: &[f64],
) -> Result<Decomposition> {
    if model.n_features() != 1 {
        return Err(Error::Ineligible(
            "activation decomposition requires a single-input model".into(),
        ));
    }
    let n_layers = model.config.layers.len();
    if n_layers < 2 {
        return Err(Error::Ineligible(
            "model needs at least one hidden layer".into(),
        ));
    }
    if layer_index >= n_layers - 1 {
        return Err(Error::Ineligible(
            "probe layer must be followed by at least one affine layer".into(),
        ));
    }
    if model.config.n_outputs() != 1 {
        return Err(Error::Ineligible(
            "activation decomposition requires a single output".into(),
        ));
    }
    for l in layer_index + 1..n_layers {
        let cfg = &model.config.layers[l];
        let affine_in = matches!(
            cfg.input_strategy,
            InputStrategy::None | InputStrategy::Fixed(FixedFn::Identity)
        );
        if !affine_in || !is_identity_output(&cfg.output_strategy) {
            return Err(Error::Ineligible(format!(
                "layer {l} after the probe layer is not affine"
            )));
        }
    }

    let x = Tensor::new(grid.len(), 1, grid.to_vec())?;
    let layer_outputs = model.predict_layers(&x)?;
    let probed = &layer_outputs[layer_index];
    let prediction = layer_outputs.last().unwrap().data().to_vec();

    // Fold the affine tail into one row vector and bias.
    let h = model.config.layers[layer_index].n_out;
    let mut matrix: Vec<Vec<f64>> = (0..h)
        .map(|j| (0..h).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut offset = vec![0.0; h];
    for l in layer_index + 1..n_layers {
        let cfg = &model.config.layers[l];
        let params = &model.layers[l];
        let (n_in, n_out) = (cfg.n_in, cfg.n_out);
        // s = W z + b
        let mut new_matrix: Vec<Vec<f64>> = vec![vec![0.0; h]; n_out];
        let mut new_offset = vec![0.0; n_out];
        for j in 0..n_out {
            for i in 0..n_in {
                let w = params.weight.get(j, i);
                for c in 0..h {
                    new_matrix[j][c] += w * matrix[i][c];
                }
                new_offset[j] += w * offset[i];
            }
            if let Some(b) = &params.bias {
                new_offset[j] += b.get(0, j);
            }
        }
        // inference-mode regularization affines
        for bn in [&params.bn_pre, &params.bn_post].into_iter().flatten() {
            let (scale, shift) = bn_infer_affine(bn);
            for j in 0..n_out {
                for c in 0..h {
                    new_matrix[j][c] *= scale[j];
                }
                new_offset[j] = new_offset[j] * scale[j] + shift[j];
            }
        }
        matrix = new_matrix;
        offset = new_offset;
    }
    let weights = matrix.remove(0);
    let bias = offset[0];

    let mut neurons: Vec<NeuronCurve> = (0..h)
        .map(|j| {
            let values = (0..grid.len())
                .map(|r| weights[j] * probed.get(r, j))
                .collect();
            NeuronCurve {
                neuron: j,
                weight: weights[j],
                values,
            }
        })
        .collect();
    neurons.sort_by(|a, b| {
        b.weight
            .abs()
            .partial_cmp(&a.weight.abs())
            .unwrap()
            .then(a.neuron.cmp(&b.neuron))
    });

    let mut reconstruction = vec![bias; grid.len()];
    for n in &neurons {
        for (s, v) in reconstruction.iter_mut().zip(&n.values) {
            *s += v;
        }
    }

    Ok(Decomposition {
        grid: grid.to_vec(),
        neurons,
        bias,
        reconstruction,
        prediction,
    })
}

// ---------------------------------------------------------------------------
// Magnitude pruning.

#[derive(Debug, Clone)]
pub struct PruneReport {
    pub baseline_r2: f64,
    pub retain: f64,
    pub total_params: usize,
    /// (kept fraction, test R^2) with strictly decreasing kept fraction.
    pub sweep: Vec<(f64, f64)>,
    /// Smallest kept-count whose R^2 stays above retain * baseline;
    /// None when the baseline R^2 is non-positive.
    pub effective_params: Option<usize>,
}

/// Global magnitude pruning sweep: learnable scalars are ranked by |value|,
/// the smallest are zeroed, and the halving grid is refined by bisection to
/// the smallest kept-count retaining `retain` of the baseline test R^2.
pub fn effective_params(
    model: &Model,
    x_test: &Tensor,
    y_test: &Tensor,
    retain: f64,
) -> Result<PruneReport> {
    let flat = model.flat_params();
    let total = flat.len();
    let baseline = r2(&model.predict(x_test)?, y_test)?;

    // Scalar ranking: descending |value|, index-ascending tie break.
    let mut rank: Vec<usize> = (0..total).collect();
    rank.sort_by(|&a, &b| {
        flat[b]
            .abs()
            .partial_cmp(&flat[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });

    let metric = |kept: usize| -> Result<f64> {
        let mut pruned = flat.clone();
        for &idx in rank.iter().skip(kept) {
            pruned[idx] = 0.0;
        }
        let mut m = model.clone();
        m.set_flat_params(&pruned)?;
        r2(&m.predict(x_test)?, y_test)
    };

    let mut evaluated: Vec<(usize, f64)> = vec![(total, baseline)];
    if baseline <= 0.0 {
        return Ok(PruneReport {
            baseline_r2: baseline,
            retain,
            total_params: total,
            sweep: vec![(1.0, baseline)],
            effective_params: None,
        });
    }
    let threshold = retain * baseline;

    // Halving grid until the metric fails.
    let mut pass_count = total;
    let mut fail_count = 0usize; // kept = 0 removes every scalar: treated as failing
    let mut fraction = 0.5;
    loop {
        let kept = ((total as f64 * fraction).round() as usize).max(1);
        if kept >= pass_count {
            fraction /= 2.0;
            if kept == 1 {
                break;
            }
            continue;
        }
        let m = metric(kept)?;
        evaluated.push((kept, m));
        if m >= threshold {
            pass_count = kept;
            if kept == 1 {
                break;
            }
            fraction /= 2.0;
        } else {
            fail_count = kept;
            break;
        }
    }

    // Bisection to the smallest passing kept-count.
    let mut lo = fail_count;
    let mut hi = pass_count;
    while hi > lo + 1 {
        let mid = lo + (hi - lo) / 2;
        let m = metric(mid)?;
        evaluated.push((mid, m));
        if m >= threshold {
            hi = mid;
        } else {
            lo = mid;
        }
    }

    evaluated.sort_by_key(|e| std::cmp::Reverse(e.0));
    evaluated.dedup_by_key(|e| e.0);
    let sweep = evaluated
        .iter()
        .map(|&(kept, m)| (kept as f64 / total as f64, m))
        .collect();

    Ok(PruneReport {
        baseline_r2: baseline,
        retain,
        total_params: total,
        sweep,
        effective_params: Some(hi),
    })
}

// ---------------------------------------------------------------------------
// Attention reporting.

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEntry {
    pub feature: usize,
    pub alpha: f64,
    pub logit: f64,
}

/// Softmax attention weights ranked descending, with raw logits.
pub fn attention_report(model: &Model) -> Result<Vec<AttentionEntry>> {
    let logits = model
        .attention_logits
        .as_ref()
        .ok_or_else(|| Error::Ineligible("attention gate is off".into()))?;
    let alpha = model.attention_weights().expect("gate on");
    let mut entries: Vec<AttentionEntry> = alpha
        .iter()
        .zip(logits.data())
        .enumerate()
        .map(|(feature, (&alpha, &logit))| AttentionEntry {
            feature,
            alpha,
            logit,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.alpha
            .partial_cmp(&a.alpha)
            .unwrap()
            .then(a.feature.cmp(&b.feature))
    });
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Gradient field.

#[derive(Debug, Clone)]
pub struct GradientField {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major over (iy, ix): index = iy * xs.len() + ix.
    pub z: Vec<f64>,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub magnitude: Vec<f64>,
}

/// Evaluate the model surface and its exact reverse-mode input gradients
/// over a 2-D grid.
pub fn gradient_field(model: &Model, xs: &[f64], ys: &[f64]) -> Result<GradientField> {
    if model.n_features() != 2 {
        return Err(Error::Ineligible(format!(
            "gradient field requires a 2-input model, this one has {} inputs",
            model.n_features()
        )));
    }
    if model.config.n_outputs() != 1 {
        return Err(Error::Ineligible(
            "gradient field requires a single output".into(),
        ));
    }
    let (nx, ny) = (xs.len(), ys.len());
    let mut batch = Tensor::zeros(nx * ny, 2);
    for (iy, &y) in ys.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            let r = iy * nx + ix;
            batch.set(r, 0, x);
            batch.set(r, 1, y);
        }
    }
    let (z, grad) = model.predict_with_input_grad(&batch)?;
    let mut gx = Vec::with_capacity(nx * ny);
    let mut gy = Vec::with_capacity(nx * ny);
    let mut magnitude = Vec::with_capacity(nx * ny);
    for r in 0..nx * ny {
        let dx = grad.get(r, 0);
        let dy = grad.get(r, 1);
        gx.push(dx);
        gy.push(dy);
        magnitude.push((dx * dx + dy * dy).sqrt());
    }
    Ok(GradientField {
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        z: z.data().to_vec(),
        gx,
        gy,
        magnitude,
    })
}

/// Evenly spaced probe grid, inclusive of both end points.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}
