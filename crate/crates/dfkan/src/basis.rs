//! Basis families for learnable univariate functions.
//!
//! A learnable function is `phi(x) = sum_k c_k * B_k(u)` where `u` is the
//! domain-mapped input and the `B_k` come from one of the supported
//! families. Orthogonal polynomial families evaluate through their
//! three-term recurrences with derivatives carried alongside values;
//! B-splines use the Cox-de Boor recursion; Gaussian RBF, sine, and
//! rational families have closed-form derivatives, including with respect
//! to their extra per-function learnables (centers/widths, frequencies/
//! phases, denominator coefficients).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hard cap on expansion order: f64 power recurrences overflow dynamic
/// range beyond this for |u| > 1.
pub const MAX_ORDER: usize = 64;

const CLAMP_EPS: f64 = 1e-6;

/// Squashing applied before evaluating bases with a bounded natural domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainMap {
    None,
    Tanh,
    Clamp,
}

impl DomainMap {
    pub fn name(&self) -> &'static str {
        match self {
            DomainMap::None => "none",
            DomainMap::Tanh => "tanh",
            DomainMap::Clamp => "clamp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DomainMap::None),
            "tanh" => Ok(DomainMap::Tanh),
            "clamp" => Ok(DomainMap::Clamp),
            other => Err(Error::Config(format!("unknown domain map `{other}`"))),
        }
    }
}

/// Map an activation into the basis domain, returning `(u, du/dx)`.
pub fn map_domain(map: DomainMap, x: f64) -> (f64, f64) {
    match map {
        DomainMap::None => (x, 1.0),
        DomainMap::Tanh => {
            let t = x.tanh();
            (t, 1.0 - t * t)
        }
        DomainMap::Clamp => {
            let lo = -1.0 + CLAMP_EPS;
            let hi = 1.0 - CLAMP_EPS;
            if x < lo {
                (lo, 0.0)
            } else if x > hi {
                (hi, 0.0)
            } else {
                (x, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasisFamily {
    StandardPoly,
    Legendre,
    Chebyshev,
    Gegenbauer { alpha: f64 },
    Jacobi { alpha: f64, beta: f64 },
    BSpline { spline_order: usize, grid_size: usize },
    GaussianRbf,
    Sine,
    Rational { numerator_degree: usize, denominator_degree: usize },
}

impl BasisFamily {
    pub fn name(&self) -> &'static str {
        match self {
            BasisFamily::StandardPoly => "standard_poly",
            BasisFamily::Legendre => "legendre",
            BasisFamily::Chebyshev => "chebyshev",
            BasisFamily::Gegenbauer { .. } => "gegenbauer",
            BasisFamily::Jacobi { .. } => "jacobi",
            BasisFamily::BSpline { .. } => "bspline",
            BasisFamily::GaussianRbf => "gaussian_rbf",
            BasisFamily::Sine => "sine",
            BasisFamily::Rational { .. } => "rational",
        }
    }

    /// True for families whose basis functions are polynomials in u.
    pub fn is_polynomial(&self) -> bool {
        matches!(
            self,
            BasisFamily::StandardPoly
                | BasisFamily::Legendre
                | BasisFamily::Chebyshev
                | BasisFamily::Gegenbauer { .. }
                | BasisFamily::Jacobi { .. }
        )
    }
}

/// One learnable-function parameterization: family, expansion order, and
/// the domain squashing in front of it.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub order: usize,
    pub domain_map: DomainMap,
}

impl BasisSpec {
    /// Spec with the family's default domain map: tanh for the bounded
    /// orthogonal/spline families, none for the unbounded ones.
    pub fn new(family: BasisFamily, order: usize) -> Result<Self> {
        let domain_map = match &family {
            BasisFamily::Legendre
            | BasisFamily::Chebyshev
            | BasisFamily::Gegenbauer { .. }
            | BasisFamily::Jacobi { .. }
            | BasisFamily::BSpline { .. } => DomainMap::Tanh,
            _ => DomainMap::None,
        };
        let spec = Self {
            family,
            order,
            domain_map,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_domain(mut self, map: DomainMap) -> Self {
        self.domain_map = map;
        self
    }

    /// Uniform open-knot B-spline of order `spline_order` over `grid_size`
    /// intervals on [-1, 1]; coefficient count is `grid_size + spline_order - 1`.
    pub fn bspline(spline_order: usize, grid_size: usize) -> Result<Self> {
        Self::new(
            BasisFamily::BSpline {
                spline_order,
                grid_size,
            },
            grid_size + spline_order.max(1) - 1,
        )
    }

    /// Rational function with numerator degree `n` and denominator degree `m`;
    /// the numerator coefficients are the expansion coefficients.
    pub fn rational(numerator_degree: usize, denominator_degree: usize) -> Result<Self> {
        Self::new(
            BasisFamily::Rational {
                numerator_degree,
                denominator_degree,
            },
            numerator_degree + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Config("basis order must be at least 1".into()));
        }
        if self.order > MAX_ORDER {
            return Err(Error::Config(format!(
                "basis order {} exceeds the maximum of {}",
                self.order, MAX_ORDER
            )));
        }
        match &self.family {
            BasisFamily::Gegenbauer { alpha } => {
                if *alpha <= -0.5 {
                    return Err(Error::Config(format!(
                        "gegenbauer alpha must exceed -1/2, got {alpha}"
                    )));
                }
            }
            BasisFamily::Jacobi { alpha, beta } => {
                if *alpha <= -1.0 || *beta <= -1.0 {
                    return Err(Error::Config(format!(
                        "jacobi alpha and beta must exceed -1, got ({alpha}, {beta})"
                    )));
                }
            }
            BasisFamily::BSpline {
                spline_order,
                grid_size,
            } => {
                if *spline_order < 1 || *grid_size < 1 {
                    return Err(Error::Config(
                        "bspline needs spline_order >= 1 and grid_size >= 1".into(),
                    ));
                }
                if self.order != grid_size + spline_order - 1 {
                    return Err(Error::Config(format!(
                        "bspline order must equal grid_size + spline_order - 1 = {}, got {}",
                        grid_size + spline_order - 1,
                        self.order
                    )));
                }
            }
            BasisFamily::Rational {
                numerator_degree, ..
            } if self.order != numerator_degree + 1 => {
                return Err(Error::Config(format!(
                    "rational order must equal numerator_degree + 1 = {}, got {}",
                    numerator_degree + 1,
                    self.order
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Number of per-function learnable scalars beyond the expansion
    /// coefficients: centers and log-widths for RBF, frequencies and phases
    /// for sine, denominator coefficients for rational.
    pub fn extras_len(&self) -> usize {
        match &self.family {
            BasisFamily::GaussianRbf | BasisFamily::Sine => 2 * self.order,
            BasisFamily::Rational {
                denominator_degree, ..
            } => *denominator_degree,
            _ => 0,
        }
    }

    /// Total learnable scalars per function.
    pub fn scalars_per_function(&self) -> usize {
        self.order + self.extras_len()
    }

    /// Clamped uniform knot vector on [-1, 1] for the B-spline family.
    pub fn knots(&self) -> Option<Vec<f64>> {
        let BasisFamily::BSpline {
            spline_order: k,
            grid_size: g,
        } = self.family
        else {
            return None;
        };
        let mut t = Vec::with_capacity(g + 2 * k - 1);
        t.extend(std::iter::repeat_n(-1.0, k));
        for j in 1..g {
            t.push(-1.0 + 2.0 * j as f64 / g as f64);
        }
        t.extend(std::iter::repeat_n(1.0, k));
        Some(t)
    }
}

/// Reusable buffers for repeated per-element evaluations.
pub struct EvalScratch {
    values: Vec<f64>,
    derivs: Vec<f64>,
    work_a: Vec<f64>,
    work_b: Vec<f64>,
}

impl EvalScratch {
    pub fn new(spec: &BasisSpec) -> Self {
        let m = spec.order;
        let work = match spec.family {
            BasisFamily::BSpline {
                spline_order: k, ..
            } => m + k,
            _ => 0,
        };
        Self {
            values: vec![0.0; m],
            derivs: vec![0.0; m],
            work_a: vec![0.0; work],
            work_b: vec![0.0; work],
        }
    }
}

/// Evaluate `B_k(u)` and `dB_k/du` for all k into scratch buffers.
/// `extras` supplies the per-function learnables for the families that
/// have them; it is ignored by the rest.
pub fn eval_basis_into(spec: &BasisSpec, extras: &[f64], u: f64, scratch: &mut EvalScratch) {
    let m = spec.order;
    let (values, derivs) = (&mut scratch.values, &mut scratch.derivs);
    match &spec.family {
        BasisFamily::StandardPoly => {
            let mut p = 1.0;
            for k in 0..m {
                values[k] = p;
                derivs[k] = if k == 0 { 0.0 } else { k as f64 * values[k - 1] };
                p *= u;
            }
        }
        BasisFamily::Legendre => {
            values[0] = 1.0;
            derivs[0] = 0.0;
            if m > 1 {
                values[1] = u;
                derivs[1] = 1.0;
            }
            for n in 1..m.saturating_sub(1) {
                let nf = n as f64;
                values[n + 1] =
                    ((2.0 * nf + 1.0) * u * values[n] - nf * values[n - 1]) / (nf + 1.0);
                derivs[n + 1] = ((2.0 * nf + 1.0) * (values[n] + u * derivs[n])
                    - nf * derivs[n - 1])
                    / (nf + 1.0);
            }
        }
        BasisFamily::Chebyshev => {
            values[0] = 1.0;
            derivs[0] = 0.0;
            if m > 1 {
                values[1] = u;
                derivs[1] = 1.0;
            }
            for n in 1..m.saturating_sub(1) {
                values[n + 1] = 2.0 * u * values[n] - values[n - 1];
                derivs[n + 1] = 2.0 * values[n] + 2.0 * u * derivs[n] - derivs[n - 1];
            }
        }
        BasisFamily::Gegenbauer { alpha } => {
            let a = *alpha;
            values[0] = 1.0;
            derivs[0] = 0.0;
            if m > 1 {
                values[1] = 2.0 * a * u;
                derivs[1] = 2.0 * a;
            }
            for n in 1..m.saturating_sub(1) {
                let nf = n as f64;
                values[n + 1] = (2.0 * (nf + a) * u * values[n]
                    - (nf + 2.0 * a - 1.0) * values[n - 1])
                    / (nf + 1.0);
                derivs[n + 1] = (2.0 * (nf + a) * (values[n] + u * derivs[n])
                    - (nf + 2.0 * a - 1.0) * derivs[n - 1])
                    / (nf + 1.0);
            }
        }
        BasisFamily::Jacobi { alpha, beta } => {
            let (a, b) = (*alpha, *beta);
            values[0] = 1.0;
            derivs[0] = 0.0;
            if m > 1 {
                values[1] = 0.5 * (a + b + 2.0) * u + 0.5 * (a - b);
                derivs[1] = 0.5 * (a + b + 2.0);
            }
            for n in 1..m.saturating_sub(1) {
                let nf = n as f64;
                let s = 2.0 * nf + a + b;
                let c1 = 2.0 * (nf + 1.0) * (nf + a + b + 1.0) * s;
                let c2 = (s + 1.0) * (a * a - b * b);
                let c3 = s * (s + 1.0) * (s + 2.0);
                let c4 = 2.0 * (nf + a) * (nf + b) * (s + 2.0);
                values[n + 1] =
                    ((c2 + c3 * u) * values[n] - c4 * values[n - 1]) / c1;
                derivs[n + 1] = ((c2 + c3 * u) * derivs[n] + c3 * values[n]
                    - c4 * derivs[n - 1])
                    / c1;
            }
        }
        BasisFamily::BSpline {
            spline_order: k, ..
        } => {
            let knots = spec.knots().expect("bspline family");
            bspline_into(&knots, *k, m, u, values, derivs, &mut scratch.work_a, &mut scratch.work_b);
        }
        BasisFamily::GaussianRbf => {
            for kk in 0..m {
                let mu = extras[kk];
                let sigma = extras[m + kk].exp();
                let z = (u - mu) / sigma;
                let v = (-0.5 * z * z).exp();
                values[kk] = v;
                derivs[kk] = -z / sigma * v;
            }
        }
        BasisFamily::Sine => {
            for kk in 0..m {
                let omega = extras[kk];
                let phase = extras[m + kk];
                let arg = omega * u + phase;
                values[kk] = arg.sin();
                derivs[kk] = omega * arg.cos();
            }
        }
        BasisFamily::Rational {
            denominator_degree, ..
        } => {
            // B_i(u) = u^i / D(u), D = 1 + |sum_j b_j u^j| >= 1.
            let (s, ds) = rational_denominator_core(extras, *denominator_degree, u);
            let sign = signum_zero(s);
            let d = 1.0 + s.abs();
            let dd = sign * ds;
            let mut p = 1.0; // u^i
            for i in 0..m {
                let dp = if i == 0 { 0.0 } else { i as f64 * values[i - 1] * d };
                // values holds u^i / d, so recover u^(i-1) as values[i-1]*d
                values[i] = p / d;
                derivs[i] = (dp - p * dd / d) / d;
                p *= u;
            }
        }
    }
}

/// `sum_j b_j u^j` for j = 1..=degree and its u-derivative.
fn rational_denominator_core(b: &[f64], degree: usize, u: f64) -> (f64, f64) {
    let mut s = 0.0;
    let mut ds = 0.0;
    let mut p = 1.0; // u^(j-1)
    for j in 1..=degree {
        s += b[j - 1] * p * u;
        ds += b[j - 1] * j as f64 * p;
        p *= u;
    }
    (s, ds)
}

/// sign with the subgradient convention sign(0) = 0.
fn signum_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn bspline_into(
    knots: &[f64],
    k: usize,
    m: usize,
    u: f64,
    values: &mut [f64],
    derivs: &mut [f64],
    cur: &mut [f64],
    next: &mut [f64],
) {
    let n_knots = knots.len();
    // Degree-0 (order-1) indicators; close the final nonempty interval on
    // the right so partition of unity holds at u = 1. Degenerate intervals
    // from the clamped knot repetitions stay identically zero.
    let last = n_knots - 1;
    for i in 0..n_knots - 1 {
        let nonempty = knots[i] < knots[i + 1];
        let inside = knots[i] <= u && u < knots[i + 1];
        let closes_right = u >= knots[last] && knots[i + 1] >= knots[last] && u <= knots[i + 1];
        cur[i] = if nonempty && (inside || closes_right) {
            1.0
        } else {
            0.0
        };
    }
    let mut lower_order = Vec::new(); // order k-1 row, kept for the derivative formula
    for ord in 2..=k {
        let count = n_knots - ord;
        if ord == k {
            lower_order = cur[..n_knots - (k - 1)].to_vec();
        }
        for i in 0..count {
            let mut v = 0.0;
            let d1 = knots[i + ord - 1] - knots[i];
            if d1 > 0.0 {
                v += (u - knots[i]) / d1 * cur[i];
            }
            let d2 = knots[i + ord] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + ord] - u) / d2 * cur[i + 1];
            }
            next[i] = v;
        }
        cur[..count].copy_from_slice(&next[..count]);
    }
    if k == 1 {
        for i in 0..m {
            values[i] = cur[i];
            derivs[i] = 0.0;
        }
        return;
    }
    values.copy_from_slice(&cur[..m]);
    let kf = (k - 1) as f64;
    for i in 0..m {
        let mut d = 0.0;
        let d1 = knots[i + k - 1] - knots[i];
        if d1 > 0.0 {
            d += lower_order[i] / d1;
        }
        let d2 = knots[i + k] - knots[i + 1];
        if d2 > 0.0 {
            d -= lower_order[i + 1] / d2;
        }
        derivs[i] = kf * d;
    }
}

/// Basis values and input derivatives as owned vectors.
pub fn eval_basis(spec: &BasisSpec, extras: &[f64], u: f64) -> (Vec<f64>, Vec<f64>) {
    let mut scratch = EvalScratch::new(spec);
    eval_basis_into(spec, extras, u, &mut scratch);
    (scratch.values.clone(), scratch.derivs.clone())
}

/// Full evaluation of one learnable function at raw input `x`.
#[derive(Debug, Clone)]
pub struct FunctionEval {
    pub value: f64,
    /// d(phi)/dx, domain map included.
    pub dx: f64,
    pub dcoeffs: Vec<f64>,
    pub dextras: Vec<f64>,
}

/// Evaluate phi(x), its input derivative, and all learnable-scalar
/// derivatives for one bank row.
pub fn eval_function(spec: &BasisSpec, coeffs: &[f64], extras: &[f64], x: f64) -> FunctionEval {
    let mut scratch = EvalScratch::new(spec);
    let mut dcoeffs = vec![0.0; spec.order];
    let mut dextras = vec![0.0; spec.extras_len()];
    let (value, dx) =
        eval_function_into(spec, coeffs, extras, x, &mut scratch, &mut dcoeffs, &mut dextras);
    FunctionEval {
        value,
        dx,
        dcoeffs,
        dextras,
    }
}

/// Scratch-buffer core of [`eval_function`]; returns `(value, d/dx)` and
/// fills the scalar-derivative slices.
pub fn eval_function_into(
    spec: &BasisSpec,
    coeffs: &[f64],
    extras: &[f64],
    x: f64,
    scratch: &mut EvalScratch,
    dcoeffs: &mut [f64],
    dextras: &mut [f64],
) -> (f64, f64) {
    let m = spec.order;
    let (u, du_dx) = map_domain(spec.domain_map, x);
    eval_basis_into(spec, extras, u, scratch);
    let mut value = 0.0;
    let mut du = 0.0;
    for k in 0..m {
        value += coeffs[k] * scratch.values[k];
        du += coeffs[k] * scratch.derivs[k];
        dcoeffs[k] = scratch.values[k];
    }
    match &spec.family {
        BasisFamily::GaussianRbf => {
            for k in 0..m {
                let mu = extras[k];
                let sigma = extras[m + k].exp();
                let z = (u - mu) / sigma;
                let b = scratch.values[k];
                // d/dmu and d/d(log sigma)
                dextras[k] = coeffs[k] * b * z / sigma;
                dextras[m + k] = coeffs[k] * b * z * z;
            }
        }
        BasisFamily::Sine => {
            for k in 0..m {
                let omega = extras[k];
                let phase = extras[m + k];
                let c = (omega * u + phase).cos();
                dextras[k] = coeffs[k] * u * c;
                dextras[m + k] = coeffs[k] * c;
            }
        }
        BasisFamily::Rational {
            denominator_degree, ..
        } => {
            let (s, _) = rational_denominator_core(extras, *denominator_degree, u);
            let sign = signum_zero(s);
            let d = 1.0 + s.abs();
            // phi = P/D with P = value * D, so dphi/db_j = -P/D^2 * sign * u^j.
            let p_over_d2 = value / d;
            let mut uj = u;
            for j in 1..=*denominator_degree {
                dextras[j - 1] = -p_over_d2 * sign * uj;
                uj *= u;
            }
        }
        _ => {}
    }
    (value, du * du_dx)
}

/// How a bank's function rows are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankLayout {
    /// One function shared by every element.
    Global,
    /// One function per column of the tensor it is applied to.
    PerDimension(usize),
    /// One function per (input, output) connection; rows ordered i-major:
    /// row = i * n_out + j.
    PerConnection { n_in: usize, n_out: usize },
}

impl BankLayout {
    pub fn functions(&self) -> usize {
        match self {
            BankLayout::Global => 1,
            BankLayout::PerDimension(n) => *n,
            BankLayout::PerConnection { n_in, n_out } => n_in * n_out,
        }
    }
}

/// Learnable scalars for one set of functions: an expansion-coefficient
/// matrix of shape (functions x order) plus the family's extra learnables.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBank {
    pub layout: BankLayout,
    pub coeffs: Tensor,
    pub extras: Option<Tensor>,
}

impl CoefficientBank {
    pub fn functions(&self) -> usize {
        self.layout.functions()
    }

    pub fn scalar_count(&self) -> usize {
        self.coeffs.len() + self.extras.as_ref().map_or(0, Tensor::len)
    }

    pub fn coeff_row(&self, f: usize) -> &[f64] {
        self.coeffs.row_slice(f)
    }

    pub fn extras_row(&self, f: usize) -> &[f64] {
        self.extras.as_ref().map_or(&[], |e| e.row_slice(f))
    }
}

/// Variance-decay coefficient initialization.
///
/// Coefficient k (1-based) draws from N(0, sigma0^2 / (k+1)^0.75) with
/// sigma0^2 = 2/(n_in + n_out). For polynomial families the degree-1
/// coefficient is instead drawn as 1 + N(0, 0.01 * sigma0^2) so each
/// function starts near the identity.
pub fn init_bank(
    spec: &BasisSpec,
    layout: BankLayout,
    n_in: usize,
    n_out: usize,
    rng: &mut impl Rng,
) -> CoefficientBank {
    const DECAY: f64 = 0.75;
    let m = spec.order;
    let functions = layout.functions();
    let sigma0 = (2.0 / (n_in + n_out) as f64).sqrt();
    let boost_index = if spec.family.is_polynomial() && m >= 2 {
        Some(1)
    } else {
        None
    };

    let mut coeffs = Tensor::zeros(functions, m);
    for f in 0..functions {
        for k in 0..m {
            let v = if Some(k) == boost_index {
                let n = Normal::new(0.0, 0.1 * sigma0).unwrap();
                1.0 + n.sample(rng)
            } else {
                let std = sigma0 / ((k as f64 + 2.0).powf(DECAY)).sqrt();
                Normal::new(0.0, std).unwrap().sample(rng)
            };
            coeffs.set(f, k, v);
        }
    }

    let extras_len = spec.extras_len();
    let extras = if extras_len == 0 {
        None
    } else {
        let mut e = Tensor::zeros(functions, extras_len);
        match &spec.family {
            BasisFamily::GaussianRbf => {
                let spacing = if m > 1 { 2.0 / (m as f64 - 1.0) } else { 1.0 };
                for f in 0..functions {
                    for k in 0..m {
                        let mu = if m > 1 { -1.0 + spacing * k as f64 } else { 0.0 };
                        e.set(f, k, mu);
                        e.set(f, m + k, spacing.ln());
                    }
                }
            }
            BasisFamily::Sine => {
                for f in 0..functions {
                    for k in 0..m {
                        e.set(f, k, (k + 1) as f64); // harmonic ladder
                        e.set(f, m + k, 0.0);
                    }
                }
            }
            BasisFamily::Rational {
                denominator_degree, ..
            } => {
                let n = Normal::new(0.0, 0.1 * sigma0).unwrap();
                for f in 0..functions {
                    for j in 0..*denominator_degree {
                        e.set(f, j, n.sample(rng));
                    }
                }
            }
            _ => unreachable!("extras_len > 0 only for rbf/sine/rational"),
        }
        Some(e)
    };

    CoefficientBank {
        layout,
        coeffs,
        extras,
    }
}

/// Which bank row applies to each element of the evaluated tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Every element uses row 0.
    Global,
    /// Element (r, c) uses row c.
    PerColumn,
}

/// Apply one learnable function bank element-wise over a batch, recording
/// exact gradients for both the inputs and every bank scalar on the tape.
pub fn batch_eval(
    tape: &mut Tape,
    spec: &BasisSpec,
    x: Var,
    coeffs: Var,
    extras: Option<Var>,
    assignment: Assignment,
) -> Result<Var> {
    let xv = tape.value(x);
    let (rows, cols) = xv.shape();
    let functions = tape.value(coeffs).rows();
    match assignment {
        Assignment::Global => {
            if functions != 1 {
                return Err(Error::Config(format!(
                    "global assignment needs a single-function bank, got {functions}"
                )));
            }
        }
        Assignment::PerColumn => {
            if functions != cols {
                return Err(Error::Config(format!(
                    "per-column assignment needs one function per column: {functions} functions for {cols} columns"
                )));
            }
        }
    }
    let extras_len = spec.extras_len();
    if extras_len > 0 && extras.is_none() {
        return Err(Error::Config(format!(
            "family `{}` requires an extras tensor",
            spec.family.name()
        )));
    }

    let row_of = move |c: usize| -> usize {
        match assignment {
            Assignment::Global => 0,
            Assignment::PerColumn => c,
        }
    };

    // Forward.
    let mut out = Tensor::zeros(rows, cols);
    {
        let cv = tape.value(coeffs);
        let ev = extras.map(|e| tape.value(e).clone());
        let mut scratch = EvalScratch::new(spec);
        let mut dc = vec![0.0; spec.order];
        let mut de = vec![0.0; extras_len];
        for r in 0..rows {
            for c in 0..cols {
                let f = row_of(c);
                let ex = ev.as_ref().map_or(&[][..], |e| e.row_slice(f));
                let (v, _) = eval_function_into(
                    spec,
                    cv.row_slice(f),
                    ex,
                    xv.get(r, c),
                    &mut scratch,
                    &mut dc,
                    &mut de,
                );
                out.set(r, c, v);
            }
        }
    }

    let spec_b = spec.clone();
    let rule = move |g: &Tensor, ins: &[&Tensor], _: &Tensor| -> Result<Vec<Tensor>> {
        let xv = ins[0];
        let cv = ins[1];
        let ev = ins.get(2).copied();
        let (rows, cols) = xv.shape();
        let m = spec_b.order;
        let extras_len = spec_b.extras_len();
        let mut dx = Tensor::zeros(rows, cols);
        let mut dcoef = Tensor::zeros(cv.rows(), cv.cols());
        let mut dext = ev.map(|e| Tensor::zeros(e.rows(), e.cols()));
        let mut scratch = EvalScratch::new(&spec_b);
        let mut dc = vec![0.0; m];
        let mut de = vec![0.0; extras_len];
        for r in 0..rows {
            for c in 0..cols {
                let f = row_of(c);
                let ex = ev.map_or(&[][..], |e| e.row_slice(f));
                let (_, din) = eval_function_into(
                    &spec_b,
                    cv.row_slice(f),
                    ex,
                    xv.get(r, c),
                    &mut scratch,
                    &mut dc,
                    &mut de,
                );
                let gv = g.get(r, c);
                dx.set(r, c, gv * din);
                for k in 0..m {
                    let cur = dcoef.get(f, k);
                    dcoef.set(f, k, cur + gv * dc[k]);
                }
                if let Some(dext) = dext.as_mut() {
                    for j in 0..extras_len {
                        let cur = dext.get(f, j);
                        dext.set(f, j, cur + gv * de[j]);
                    }
                }
            }
        }
        let mut grads = vec![dx, dcoef];
        if let Some(dext) = dext {
            grads.push(dext);
        }
        Ok(grads)
    };

    let mut inputs = vec![x, coeffs];
    if let Some(e) = extras {
        inputs.push(e);
    }
    tape.custom(&inputs, out, "batch_eval", Box::new(rule))
}
