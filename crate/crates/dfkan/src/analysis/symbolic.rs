//! Symbolic formula extraction for polynomial-eligible models.
//!
//! Eligible models are pure polynomial pipelines: a single input, every
//! learnable function drawn from a polynomial family with no domain
//! squashing, fixed functions limited to the identity, and regularization
//! reduced to its inference-mode affine form. The extraction converts every
//! orthogonal expansion to monomial coefficients through recurrence-built
//! conversion matrices, then composes the whole network as polynomial
//! algebra; it fits nothing.

use crate::basis::{BasisFamily, BasisSpec, DomainMap};
use crate::error::{Error, Result};
use crate::layer::{FixedFn, InputStrategy, OutputStrategy};
use crate::model::Model;
use crate::tensor::Tensor;

use super::{bn_infer_affine, linspace};

/// Composed polynomials larger than this are rejected rather than silently
/// truncated mid-pipeline.
const MAX_COMPOSED_LEN: usize = 2049;

/// Dense univariate polynomial, ascending monomial coefficients.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Poly(pub Vec<f64>);

impl Poly {
    pub fn constant(c: f64) -> Self {
        Poly(vec![c])
    }

    pub fn degree(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.0.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly(self.0.iter().map(|&c| c * s).collect())
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.0.len().max(other.0.len());
        let mut out = vec![0.0; n];
        for (i, &c) in self.0.iter().enumerate() {
            out[i] += c;
        }
        for (i, &c) in other.0.iter().enumerate() {
            out[i] += c;
        }
        Poly(out)
    }

    pub fn add_const(&self, c: f64) -> Poly {
        let mut out = self.0.clone();
        if out.is_empty() {
            out.push(0.0);
        }
        out[0] += c;
        Poly(out)
    }

    pub fn mul(&self, other: &Poly) -> Result<Poly> {
        let n = self.0.len() + other.0.len() - 1;
        if n > MAX_COMPOSED_LEN {
            return Err(Error::Ineligible(format!(
                "composed polynomial degree {} exceeds the extraction cap",
                n - 1
            )));
        }
        let mut out = vec![0.0; n];
        for (i, &a) in self.0.iter().enumerate() {
            for (j, &b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Ok(Poly(out))
    }

    /// Compose `outer` (monomial coefficients) with this polynomial:
    /// returns `sum_k outer[k] * self^k` by Horner's rule.
    pub fn compose_into(&self, outer: &[f64]) -> Result<Poly> {
        let mut acc = Poly::constant(0.0);
        for &c in outer.iter().rev() {
            acc = acc.mul(self)?.add_const(c);
        }
        Ok(acc)
    }
}

/// Monomial coefficient rows of the family's first `order` basis functions.
/// Row k holds the ascending monomial coefficients of `B_k`.
pub fn to_monomial_rows(family: &BasisFamily, order: usize) -> Result<Vec<Vec<f64>>> {
    let x = Poly(vec![0.0, 1.0]);
    let mut rows: Vec<Poly> = Vec::with_capacity(order);
    match family {
        BasisFamily::StandardPoly => {
            let mut p = Poly::constant(1.0);
            for _ in 0..order {
                rows.push(p.clone());
                p = p.mul(&x)?;
            }
        }
        BasisFamily::Legendre => {
            rows.push(Poly::constant(1.0));
            if order > 1 {
                rows.push(x.clone());
            }
            for n in 1..order.saturating_sub(1) {
                let nf = n as f64;
                let a = rows[n].mul(&x)?.scale((2.0 * nf + 1.0) / (nf + 1.0));
                let b = rows[n - 1].scale(-nf / (nf + 1.0));
                rows.push(a.add(&b));
            }
        }
        BasisFamily::Chebyshev => {
            rows.push(Poly::constant(1.0));
            if order > 1 {
                rows.push(x.clone());
            }
            for n in 1..order.saturating_sub(1) {
                let a = rows[n].mul(&x)?.scale(2.0);
                let b = rows[n - 1].scale(-1.0);
                rows.push(a.add(&b));
            }
        }
        BasisFamily::Gegenbauer { alpha } => {
            let a0 = *alpha;
            rows.push(Poly::constant(1.0));
            if order > 1 {
                rows.push(x.scale(2.0 * a0));
            }
            for n in 1..order.saturating_sub(1) {
                let nf = n as f64;
                let a = rows[n]
                    .mul(&x)?
                    .scale(2.0 * (nf + a0) / (nf + 1.0));
                let b = rows[n - 1].scale(-(nf + 2.0 * a0 - 1.0) / (nf + 1.0));
                rows.push(a.add(&b));
            }
        }
        BasisFamily::Jacobi { alpha, beta } => {
            let (a0, b0) = (*alpha, *beta);
            rows.push(Poly::constant(1.0));
            if order > 1 {
                rows.push(Poly(vec![0.5 * (a0 - b0), 0.5 * (a0 + b0 + 2.0)]));
            }
            for n in 1..order.saturating_sub(1) {
                let nf = n as f64;
                let s = 2.0 * nf + a0 + b0;
                let c1 = 2.0 * (nf + 1.0) * (nf + a0 + b0 + 1.0) * s;
                let c2 = (s + 1.0) * (a0 * a0 - b0 * b0);
                let c3 = s * (s + 1.0) * (s + 2.0);
                let c4 = 2.0 * (nf + a0) * (nf + b0) * (s + 2.0);
                let t1 = rows[n].mul(&x)?.scale(c3 / c1);
                let t2 = rows[n].scale(c2 / c1);
                let t3 = rows[n - 1].scale(-c4 / c1);
                rows.push(t1.add(&t2).add(&t3));
            }
        }
        other => {
            return Err(Error::Ineligible(format!(
                "non-polynomial family `{}`",
                other.name()
            )));
        }
    }
    Ok(rows.into_iter().map(|p| p.0).collect())
}

/// Monomial coefficients of one learnable function from its bank row.
fn function_to_monomial(spec: &BasisSpec, coeffs: &[f64]) -> Result<Vec<f64>> {
    let rows = to_monomial_rows(&spec.family, spec.order)?;
    let mut out = vec![0.0; spec.order];
    for (k, row) in rows.iter().enumerate() {
        for (i, &c) in row.iter().enumerate() {
            out[i] += coeffs[k] * c;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicFormula {
    /// Monomial coefficients, index = degree, truncated at the requested
    /// maximum degree.
    pub coefficients: Vec<f64>,
    /// Max |model(x) - poly(x)| over the probe grid.
    pub residual: f64,
    /// Full composed degree before truncation.
    pub composed_degree: usize,
}

impl SymbolicFormula {
    /// Substitute `x -> a x + b`, re-expressing the polynomial in the
    /// pre-transform variable (used to undo feature scaling).
    pub fn compose_input_affine(&self, a: f64, b: f64) -> SymbolicFormula {
        let inner = Poly(vec![b, a]);
        let composed = inner
            .compose_into(&self.coefficients)
            .expect("affine composition preserves degree");
        SymbolicFormula {
            coefficients: composed.0,
            residual: self.residual,
            composed_degree: self.composed_degree,
        }
    }

    /// Map the output `y -> s y + t` (used to undo target scaling; the
    /// residual scales with |s|).
    pub fn scale_output(&self, s: f64, t: f64) -> SymbolicFormula {
        let mut coefficients: Vec<f64> = self.coefficients.iter().map(|&c| c * s).collect();
        if coefficients.is_empty() {
            coefficients.push(0.0);
        }
        coefficients[0] += t;
        SymbolicFormula {
            coefficients,
            residual: self.residual * s.abs(),
            composed_degree: self.composed_degree,
        }
    }
}

fn check_eligibility(model: &Model) -> Result<()> {
    let mut reasons: Vec<String> = Vec::new();
    if model.n_features() != 1 {
        reasons.push(format!(
            "symbolic extraction needs a single input feature, model has {}",
            model.n_features()
        ));
    }
    if model.config.n_outputs() != 1 {
        reasons.push("model must have a single output".into());
    }
    fn check_spec(reasons: &mut Vec<String>, spec: &BasisSpec, l: usize, side: &str) {
        if !spec.family.is_polynomial() {
            reasons.push(format!(
                "layer {l} {side}: non-polynomial family `{}`",
                spec.family.name()
            ));
        }
        if spec.domain_map != DomainMap::None {
            reasons.push(format!(
                "layer {l} {side}: domain map `{}` makes the composition non-polynomial",
                spec.domain_map.name()
            ));
        }
    }
    for (l, cfg) in model.config.layers.iter().enumerate() {
        match &cfg.input_strategy {
            InputStrategy::None => {}
            InputStrategy::Fixed(FixedFn::Identity) => {}
            InputStrategy::Fixed(f) => {
                reasons.push(format!("layer {l} input: fixed function `{}`", f.name()));
            }
            InputStrategy::Global(s)
            | InputStrategy::PerDimension(s)
            | InputStrategy::PerConnection(s) => {
                check_spec(&mut reasons, s, l, "input");
            }
        }
        match &cfg.output_strategy {
            OutputStrategy::None => {}
            OutputStrategy::Fixed(FixedFn::Identity) => {}
            OutputStrategy::Fixed(f) => {
                reasons.push(format!("layer {l} output: fixed function `{}`", f.name()));
            }
            OutputStrategy::Global(s) | OutputStrategy::PerDimension(s) => {
                check_spec(&mut reasons, s, l, "output");
            }
        }
    }
    if reasons.is_empty() {
        Ok(())
    } else {
        Err(Error::Ineligible(reasons.join("; ")))
    }
}

/// Extract the exact polynomial a polynomial-eligible model computes.
///
/// `probe_range` is the input interval (typically the training range) used
/// for the 201-point residual check of the truncated coefficients.
pub fn extract_symbolic(
    model: &Model,
    max_degree: usize,
    probe_range: (f64, f64),
) -> Result<SymbolicFormula> {
    check_eligibility(model)?;

    // Attention gate on one feature folds to the exact scale n * alpha = 1;
    // keep the general per-column form.
    let gate = model
        .attention_weights()
        .map(|alpha| alpha.iter().map(|a| a * alpha.len() as f64).collect::<Vec<_>>());
    let mut wires = vec![Poly(vec![0.0, 1.0])];
    if let Some(gate) = gate {
        wires[0] = wires[0].scale(gate[0]);
    }

    for (l, cfg) in model.config.layers.iter().enumerate() {
        let params = &model.layers[l];
        let (n_in, n_out) = (cfg.n_in, cfg.n_out);
        debug_assert_eq!(wires.len(), n_in);

        // Linear stage including the input transformation.
        let mut s: Vec<Poly> = Vec::with_capacity(n_out);
        match &cfg.input_strategy {
            InputStrategy::PerConnection(spec) => {
                let bank = params.input_bank.as_ref().expect("bank for S4");
                for j in 0..n_out {
                    let mut acc = Poly::constant(0.0);
                    for (i, wire) in wires.iter().enumerate() {
                        let row = i * n_out + j;
                        let mono = function_to_monomial(spec, bank.coeff_row(row))?;
                        let phi = wire.compose_into(&mono)?;
                        acc = acc.add(&phi.scale(params.weight.get(j, i)));
                    }
                    if let Some(b) = &params.bias {
                        acc = acc.add_const(b.get(0, j));
                    }
                    s.push(acc);
                }
            }
            other => {
                let transformed: Vec<Poly> = match other {
                    InputStrategy::None | InputStrategy::Fixed(FixedFn::Identity) => wires.clone(),
                    InputStrategy::Global(spec) => {
                        let bank = params.input_bank.as_ref().expect("bank for S2");
                        let mono = function_to_monomial(spec, bank.coeff_row(0))?;
                        wires
                            .iter()
                            .map(|w| w.compose_into(&mono))
                            .collect::<Result<_>>()?
                    }
                    InputStrategy::PerDimension(spec) => {
                        let bank = params.input_bank.as_ref().expect("bank for S3");
                        wires
                            .iter()
                            .enumerate()
                            .map(|(i, w)| {
                                let mono = function_to_monomial(spec, bank.coeff_row(i))?;
                                w.compose_into(&mono)
                            })
                            .collect::<Result<_>>()?
                    }
                    _ => unreachable!("guarded by eligibility"),
                };
                for j in 0..n_out {
                    let mut acc = Poly::constant(0.0);
                    for (i, t) in transformed.iter().enumerate() {
                        acc = acc.add(&t.scale(params.weight.get(j, i)));
                    }
                    if let Some(b) = &params.bias {
                        acc = acc.add_const(b.get(0, j));
                    }
                    s.push(acc);
                }
            }
        }

        // Pre-activation regularization in inference-affine form.
        if let Some(bn) = &params.bn_pre {
            let (scale, shift) = bn_infer_affine(bn);
            for (j, p) in s.iter_mut().enumerate() {
                *p = p.scale(scale[j]).add_const(shift[j]);
            }
        }

        // Output activation.
        let mut z: Vec<Poly> = match &cfg.output_strategy {
            OutputStrategy::None | OutputStrategy::Fixed(FixedFn::Identity) => s,
            OutputStrategy::Global(spec) => {
                let bank = params.output_bank.as_ref().expect("bank for S2 output");
                let mono = function_to_monomial(spec, bank.coeff_row(0))?;
                s.iter()
                    .map(|p| p.compose_into(&mono))
                    .collect::<Result<_>>()?
            }
            OutputStrategy::PerDimension(spec) => {
                let bank = params.output_bank.as_ref().expect("bank for S3 output");
                s.iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let mono = function_to_monomial(spec, bank.coeff_row(j))?;
                        p.compose_into(&mono)
                    })
                    .collect::<Result<_>>()?
            }
            _ => unreachable!("guarded by eligibility"),
        };

        // Post-activation regularization.
        if let Some(bn) = &params.bn_post {
            let (scale, shift) = bn_infer_affine(bn);
            for (j, p) in z.iter_mut().enumerate() {
                *p = p.scale(scale[j]).add_const(shift[j]);
            }
        }

        wires = z;
    }

    let full = wires.remove(0);
    let composed_degree = full.degree();
    let mut coefficients = full.0.clone();
    coefficients.truncate(max_degree + 1);

    let truncated = Poly(coefficients.clone());
    let grid = linspace(probe_range.0, probe_range.1, 201);
    let x = Tensor::new(grid.len(), 1, grid.clone())?;
    let pred = model.predict(&x)?;
    let mut residual: f64 = 0.0;
    for (i, &g) in grid.iter().enumerate() {
        residual = residual.max((pred.get(i, 0) - truncated.eval(g)).abs());
    }

    Ok(SymbolicFormula {
        coefficients,
        residual,
        composed_degree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerConfig;
    use crate::model::{AttentionInit, Model, ModelConfig};

    fn poly_output_model(w: f64, b: f64, coeffs: &[f64]) -> Model {
        let spec = BasisSpec::new(BasisFamily::StandardPoly, coeffs.len())
            .unwrap()
            .with_domain(DomainMap::None);
        let config = ModelConfig {
            layers: vec![LayerConfig::new(
                1,
                1,
                InputStrategy::None,
                OutputStrategy::PerDimension(spec),
            )],
            attention: AttentionInit::Off,
            seed: 0,
        };
        let mut model = Model::build(config).unwrap();
        model.layers[0].weight = Tensor::scalar(w);
        model.layers[0].bias = Some(Tensor::scalar(b));
        let bank = model.layers[0].output_bank.as_mut().unwrap();
        bank.coeffs = Tensor::new(1, coeffs.len(), coeffs.to_vec()).unwrap();
        model
    }

    #[test]
    fn identity_composition_reads_coefficients_directly() {
        let model = poly_output_model(1.0, 0.0, &[0.5, -1.0, 2.0]);
        let f = extract_symbolic(&model, 4, (-2.0, 2.0)).unwrap();
        assert!((f.coefficients[0] - 0.5).abs() < 1e-12);
        assert!((f.coefficients[1] + 1.0).abs() < 1e-12);
        assert!((f.coefficients[2] - 2.0).abs() < 1e-12);
        assert!(f.residual < 1e-12);
    }

    #[test]
    fn affine_composition_expands_binomially() {
        // phi(2x + 1) with phi(u) = 0.5 - u + 2u^2 -> 1.5 + 6x + 8x^2
        let model = poly_output_model(2.0, 1.0, &[0.5, -1.0, 2.0]);
        let f = extract_symbolic(&model, 4, (-2.0, 2.0)).unwrap();
        assert!((f.coefficients[0] - 1.5).abs() < 1e-12);
        assert!((f.coefficients[1] - 6.0).abs() < 1e-12);
        assert!((f.coefficients[2] - 8.0).abs() < 1e-12);
        assert!(f.residual < 1e-10);
    }

    #[test]
    fn bspline_model_is_ineligible_with_reason() {
        let spec = BasisSpec::bspline(3, 6).unwrap();
        let config = ModelConfig {
            layers: vec![LayerConfig::new(
                1,
                1,
                InputStrategy::Global(spec),
                OutputStrategy::None,
            )],
            attention: AttentionInit::Off,
            seed: 0,
        };
        let model = Model::build(config).unwrap();
        let err = extract_symbolic(&model, 3, (-1.0, 1.0)).unwrap_err().to_string();
        assert!(err.contains("non-polynomial family"), "{err}");
    }

    #[test]
    fn legendre_rows_match_hand_values() {
        let rows = to_monomial_rows(&BasisFamily::Legendre, 4).unwrap();
        // P2 = -1/2 + 3/2 x^2, P3 = -3/2 x + 5/2 x^3
        assert_eq!(rows[2], vec![-0.5, 0.0, 1.5]);
        assert_eq!(rows[3], vec![0.0, -1.5, 0.0, 2.5]);
    }
}
