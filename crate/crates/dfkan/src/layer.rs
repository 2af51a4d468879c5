//! One dual-stage layer: configurable input transformation, linear map,
//! configurable output activation, and regularization at both positions.
//!
//! The layer computes `z = R_post(Psi(R_pre(W * T(x) + b)))` where the
//! input operator `T` follows one of five sharing strategies and the output
//! operator `Psi` one of four. The per-connection input strategy fuses the
//! transformation with the linear stage: each output neuron sees its own
//! transformed copy of the inputs, never a shared column.


use rand_distr::{Distribution, Normal};

use crate::basis::{
    batch_eval, eval_function_into, init_bank, Assignment, BankLayout, BasisSpec, CoefficientBank,
    EvalScratch,
};
use crate::error::{Error, Result};
use crate::reg::{regseq, BatchNormState, Mode, RegConfig, RegPosition, RegSlot};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Predetermined, non-learnable activation functions for strategy S1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedFn {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl FixedFn {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            FixedFn::Relu => x.max(0.0),
            FixedFn::Tanh => x.tanh(),
            FixedFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            FixedFn::Identity => x,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            FixedFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            FixedFn::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            FixedFn::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            FixedFn::Identity => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FixedFn::Relu => "relu",
            FixedFn::Tanh => "tanh",
            FixedFn::Sigmoid => "sigmoid",
            FixedFn::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(FixedFn::Relu),
            "tanh" => Ok(FixedFn::Tanh),
            "sigmoid" => Ok(FixedFn::Sigmoid),
            "identity" => Ok(FixedFn::Identity),
            other => Err(Error::Config(format!("unknown fixed function `{other}`"))),
        }
    }
}

/// Sharing strategy for the pre-linear input transformation.
#[derive(Debug, Clone, PartialEq)]
pub enum InputStrategy {
    None,
    Fixed(FixedFn),
    Global(BasisSpec),
    PerDimension(BasisSpec),
    /// One function per (input, output) connection. Input side only.
    PerConnection(BasisSpec),
}

/// Sharing strategy for the post-linear output activation. There is no
/// per-connection variant on the output side.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputStrategy {
    None,
    Fixed(FixedFn),
    Global(BasisSpec),
    PerDimension(BasisSpec),
}

impl InputStrategy {
    pub fn basis(&self) -> Option<&BasisSpec> {
        match self {
            InputStrategy::Global(s)
            | InputStrategy::PerDimension(s)
            | InputStrategy::PerConnection(s) => Some(s),
            _ => None,
        }
    }
}

impl OutputStrategy {
    pub fn basis(&self) -> Option<&BasisSpec> {
        match self {
            OutputStrategy::Global(s) | OutputStrategy::PerDimension(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub n_in: usize,
    pub n_out: usize,
    pub input_strategy: InputStrategy,
    pub output_strategy: OutputStrategy,
    pub reg: RegConfig,
    pub has_bias: bool,
}

impl LayerConfig {
    pub fn new(n_in: usize, n_out: usize, input: InputStrategy, output: OutputStrategy) -> Self {
        Self {
            n_in,
            n_out,
            input_strategy: input,
            output_strategy: output,
            reg: RegConfig::default(),
            has_bias: true,
        }
    }

    pub fn with_reg(mut self, reg: RegConfig) -> Self {
        self.reg = reg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 {
            return Err(Error::Config(format!(
                "layer dimensions must be positive, got {}x{}",
                self.n_in, self.n_out
            )));
        }
        if let Some(spec) = self.input_strategy.basis() {
            spec.validate()?;
        }
        if let Some(spec) = self.output_strategy.basis() {
            spec.validate()?;
        }
        self.reg.validate()
    }

    fn input_bank_layout(&self) -> Option<BankLayout> {
        match &self.input_strategy {
            InputStrategy::Global(_) => Some(BankLayout::Global),
            InputStrategy::PerDimension(_) => Some(BankLayout::PerDimension(self.n_in)),
            InputStrategy::PerConnection(_) => Some(BankLayout::PerConnection {
                n_in: self.n_in,
                n_out: self.n_out,
            }),
            _ => None,
        }
    }

    fn output_bank_layout(&self) -> Option<BankLayout> {
        match &self.output_strategy {
            OutputStrategy::Global(_) => Some(BankLayout::Global),
            OutputStrategy::PerDimension(_) => Some(BankLayout::PerDimension(self.n_out)),
            _ => None,
        }
    }
}

/// All learnable scalars of one layer plus the batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub input_bank: Option<CoefficientBank>,
    pub output_bank: Option<CoefficientBank>,
    pub bn_pre: Option<BatchNormState>,
    pub bn_post: Option<BatchNormState>,
}

/// Parameter count split by source, with both the extended scalar counts
/// (families with extra learnables included) and the plain coefficient
/// counts that treat every function as `m` scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub linear: usize,
    pub bias: usize,
    pub input_fn: usize,
    pub output_fn: usize,
    pub reg: usize,
    pub total: usize,
    /// Coefficient-only input count (functions x m).
    pub paper_input_fn: usize,
    /// Coefficient-only output count (functions x m).
    pub paper_output_fn: usize,
}

/// Piecewise parameter-count formulas for one layer.
pub fn param_count(config: &LayerConfig) -> ParamBreakdown {
    let linear = config.n_in * config.n_out;
    let bias = if config.has_bias { config.n_out } else { 0 };
    let (input_fn, paper_input_fn) = match &config.input_strategy {
        InputStrategy::None | InputStrategy::Fixed(_) => (0, 0),
        InputStrategy::Global(s) => (s.scalars_per_function(), s.order),
        InputStrategy::PerDimension(s) => {
            (config.n_in * s.scalars_per_function(), config.n_in * s.order)
        }
        InputStrategy::PerConnection(s) => (
            config.n_in * config.n_out * s.scalars_per_function(),
            config.n_in * config.n_out * s.order,
        ),
    };
    let (output_fn, paper_output_fn) = match &config.output_strategy {
        OutputStrategy::None | OutputStrategy::Fixed(_) => (0, 0),
        OutputStrategy::Global(s) => (s.scalars_per_function(), s.order),
        OutputStrategy::PerDimension(s) => {
            (config.n_out * s.scalars_per_function(), config.n_out * s.order)
        }
    };
    let reg = 2 * config.n_out * config.reg.bn_positions();
    ParamBreakdown {
        linear,
        bias,
        input_fn,
        output_fn,
        reg,
        total: linear + bias + input_fn + output_fn + reg,
        paper_input_fn,
        paper_output_fn,
    }
}

/// He-initialized weights, zero bias, variance-decay coefficient banks.
/// The same seed always produces bit-identical parameters.
pub fn init_params(config: &LayerConfig, seed: u64) -> LayerParams {
    let mut rng = rng::stream(seed, &[0x1a7]);
    let w_std = (2.0 / config.n_in as f64).sqrt();
    let normal = Normal::new(0.0, w_std).unwrap();
    let mut weight = Tensor::zeros(config.n_out, config.n_in);
    for v in weight.data_mut() {
        *v = normal.sample(&mut rng);
    }
    let bias = config.has_bias.then(|| Tensor::zeros(1, config.n_out));
    let input_bank = config.input_bank_layout().map(|layout| {
        let spec = config.input_strategy.basis().expect("layout implies basis");
        init_bank(spec, layout, config.n_in, config.n_out, &mut rng)
    });
    let output_bank = config.output_bank_layout().map(|layout| {
        let spec = config.output_strategy.basis().expect("layout implies basis");
        init_bank(spec, layout, config.n_in, config.n_out, &mut rng)
    });
    let bn_pre = (config.reg.use_batchnorm && config.reg.placement.pre_active())
        .then(|| BatchNormState::new(config.n_out));
    let bn_post = (config.reg.use_batchnorm && config.reg.placement.post_active())
        .then(|| BatchNormState::new(config.n_out));
    LayerParams {
        weight,
        bias,
        input_bank,
        output_bank,
        bn_pre,
        bn_post,
    }
}

/// Count of learnable scalars actually stored in a parameter struct;
/// the enumeration oracle for [`param_count`].
pub fn enumerate_scalars(params: &LayerParams) -> usize {
    let mut n = params.weight.len();
    n += params.bias.as_ref().map_or(0, Tensor::len);
    n += params.input_bank.as_ref().map_or(0, CoefficientBank::scalar_count);
    n += params.output_bank.as_ref().map_or(0, CoefficientBank::scalar_count);
    for bn in [&params.bn_pre, &params.bn_post].into_iter().flatten() {
        n += bn.gamma.len() + bn.beta.len();
    }
    n
}

/// Tape handles for one layer's learnable leaves.
#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Option<Var>,
    pub input_coeffs: Option<Var>,
    pub input_extras: Option<Var>,
    pub output_coeffs: Option<Var>,
    pub output_extras: Option<Var>,
    pub bn_pre: Option<(Var, Var)>,
    pub bn_post: Option<(Var, Var)>,
}

/// Register the layer's learnables as tape leaves, in walk order.
pub fn bind(tape: &mut Tape, params: &LayerParams, requires_grad: bool) -> BoundLayer {
    let weight = tape.leaf(params.weight.clone(), requires_grad);
    let bias = params
        .bias
        .as_ref()
        .map(|b| tape.leaf(b.clone(), requires_grad));
    let (input_coeffs, input_extras) = match &params.input_bank {
        Some(bank) => (
            Some(tape.leaf(bank.coeffs.clone(), requires_grad)),
            bank.extras
                .as_ref()
                .map(|e| tape.leaf(e.clone(), requires_grad)),
        ),
        None => (None, None),
    };
    let (output_coeffs, output_extras) = match &params.output_bank {
        Some(bank) => (
            Some(tape.leaf(bank.coeffs.clone(), requires_grad)),
            bank.extras
                .as_ref()
                .map(|e| tape.leaf(e.clone(), requires_grad)),
        ),
        None => (None, None),
    };
    let bn_pre = params.bn_pre.as_ref().map(|bn| {
        (
            tape.leaf(bn.gamma.clone(), requires_grad),
            tape.leaf(bn.beta.clone(), requires_grad),
        )
    });
    let bn_post = params.bn_post.as_ref().map(|bn| {
        (
            tape.leaf(bn.gamma.clone(), requires_grad),
            tape.leaf(bn.beta.clone(), requires_grad),
        )
    });
    BoundLayer {
        weight,
        bias,
        input_coeffs,
        input_extras,
        output_coeffs,
        output_extras,
        bn_pre,
        bn_post,
    }
}

/// Per-forward-pass context for the stochastic and stateful pieces.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub seed: u64,
    pub step: u64,
    pub layer_index: usize,
}

impl ForwardCtx {
    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            seed: 0,
            step: 0,
            layer_index: 0,
        }
    }
}

fn fixed_activation(tape: &mut Tape, x: Var, f: FixedFn) -> Result<Var> {
    let value = tape.value(x).map(|v| f.apply(v));
    tape.custom_unary(x, value, f.name(), move |g, xv| {
        Tensor::new(
            g.rows(),
            g.cols(),
            g.data()
                .iter()
                .zip(xv.data())
                .map(|(&gv, &x)| gv * f.derivative(x))
                .collect(),
        )
        .expect("shapes match")
    })
}

/// Fused per-connection stage: `s[r][j] = sum_i w[j][i] * phi_{i,j}(x[r][i])`
/// with bank rows ordered i-major (row = i * n_out + j).
#[allow(clippy::too_many_arguments)]
fn per_connection_stage(
    tape: &mut Tape,
    spec: &BasisSpec,
    n_in: usize,
    n_out: usize,
    x: Var,
    weight: Var,
    coeffs: Var,
    extras: Option<Var>,
) -> Result<Var> {
    let xv = tape.value(x);
    let batch = xv.rows();
    let m = spec.order;
    let extras_len = spec.extras_len();

    let mut out = Tensor::zeros(batch, n_out);
    {
        let wv = tape.value(weight);
        let cv = tape.value(coeffs);
        let ev = extras.map(|e| tape.value(e).clone());
        let mut scratch = EvalScratch::new(spec);
        let mut dc = vec![0.0; m];
        let mut de = vec![0.0; extras_len];
        for r in 0..batch {
            for i in 0..n_in {
                let xi = xv.get(r, i);
                for j in 0..n_out {
                    let row = i * n_out + j;
                    let ex = ev.as_ref().map_or(&[][..], |e| e.row_slice(row));
                    let (v, _) = eval_function_into(
                        spec,
                        cv.row_slice(row),
                        ex,
                        xi,
                        &mut scratch,
                        &mut dc,
                        &mut de,
                    );
                    let cur = out.get(r, j);
                    out.set(r, j, cur + wv.get(j, i) * v);
                }
            }
        }
    }

    let spec_b = spec.clone();
    let rule = move |g: &Tensor, ins: &[&Tensor], _: &Tensor| -> Result<Vec<Tensor>> {
        let xv = ins[0];
        let wv = ins[1];
        let cv = ins[2];
        let ev = ins.get(3).copied();
        let batch = xv.rows();
        let m = spec_b.order;
        let extras_len = spec_b.extras_len();
        let mut dx = Tensor::zeros(batch, n_in);
        let mut dw = Tensor::zeros(n_out, n_in);
        let mut dcoef = Tensor::zeros(cv.rows(), cv.cols());
        let mut dext = ev.map(|e| Tensor::zeros(e.rows(), e.cols()));
        let mut scratch = EvalScratch::new(&spec_b);
        let mut dc = vec![0.0; m];
        let mut de = vec![0.0; extras_len];
        for r in 0..batch {
            for i in 0..n_in {
                let xi = xv.get(r, i);
                for j in 0..n_out {
                    let row = i * n_out + j;
                    let ex = ev.map_or(&[][..], |e| e.row_slice(row));
                    let (v, din) = eval_function_into(
                        &spec_b,
                        cv.row_slice(row),
                        ex,
                        xi,
                        &mut scratch,
                        &mut dc,
                        &mut de,
                    );
                    let gu = g.get(r, j);
                    let w = wv.get(j, i);
                    dw.set(j, i, dw.get(j, i) + gu * v);
                    dx.set(r, i, dx.get(r, i) + gu * w * din);
                    for k in 0..m {
                        let cur = dcoef.get(row, k);
                        dcoef.set(row, k, cur + gu * w * dc[k]);
                    }
                    if let Some(dext) = dext.as_mut() {
                        for q in 0..extras_len {
                            let cur = dext.get(row, q);
                            dext.set(row, q, cur + gu * w * de[q]);
                        }
                    }
                }
            }
        }
        let mut grads = vec![dx, dw, dcoef];
        if let Some(dext) = dext {
            grads.push(dext);
        }
        Ok(grads)
    };

    let mut inputs = vec![x, weight, coeffs];
    if let Some(e) = extras {
        inputs.push(e);
    }
    tape.custom(&inputs, out, "per_connection", Box::new(rule))
}

/// Forward pass of one layer on the tape. Train mode updates batch-norm
/// running statistics in place.
pub fn forward(
    tape: &mut Tape,
    config: &LayerConfig,
    params: &mut LayerParams,
    bound: &BoundLayer,
    x: Var,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let xv = tape.value(x);
    if xv.cols() != config.n_in {
        return Err(Error::ShapeMismatch {
            op: "layer_forward",
            lhs: xv.shape(),
            rhs: (xv.rows(), config.n_in),
        });
    }
    if !xv.all_finite() {
        return Err(Error::NonFinite {
            context: format!("input of layer {}", ctx.layer_index),
        });
    }

    // Input stage and linear map.
    let mut s = match &config.input_strategy {
        InputStrategy::PerConnection(spec) => per_connection_stage(
            tape,
            spec,
            config.n_in,
            config.n_out,
            x,
            bound.weight,
            bound.input_coeffs.expect("bank bound for S4"),
            bound.input_extras,
        )?,
        other => {
            let t = match other {
                InputStrategy::None => x,
                InputStrategy::Fixed(f) => fixed_activation(tape, x, *f)?,
                InputStrategy::Global(spec) => batch_eval(
                    tape,
                    spec,
                    x,
                    bound.input_coeffs.expect("bank bound for S2"),
                    bound.input_extras,
                    Assignment::Global,
                )?,
                InputStrategy::PerDimension(spec) => batch_eval(
                    tape,
                    spec,
                    x,
                    bound.input_coeffs.expect("bank bound for S3"),
                    bound.input_extras,
                    Assignment::PerColumn,
                )?,
                InputStrategy::PerConnection(_) => unreachable!(),
            };
            let wt = tape.transpose(bound.weight)?;
            tape.matmul(t, wt)?
        }
    };
    if let Some(b) = bound.bias {
        s = tape.add_row(s, b)?;
    }

    // Pre-activation regularization.
    let a = regseq(
        tape,
        s,
        RegSlot {
            config: &config.reg,
            position: RegPosition::Pre,
            bn: params
                .bn_pre
                .as_mut()
                .map(|state| {
                    let (g, b) = bound.bn_pre.expect("bn_pre bound");
                    (state, g, b)
                }),
            seed: ctx.seed,
            layer_index: ctx.layer_index,
            step: ctx.step,
        },
        ctx.mode,
    )?;

    // Output stage.
    let psi = match &config.output_strategy {
        OutputStrategy::None => a,
        OutputStrategy::Fixed(f) => fixed_activation(tape, a, *f)?,
        OutputStrategy::Global(spec) => batch_eval(
            tape,
            spec,
            a,
            bound.output_coeffs.expect("bank bound for S2 output"),
            bound.output_extras,
            Assignment::Global,
        )?,
        OutputStrategy::PerDimension(spec) => batch_eval(
            tape,
            spec,
            a,
            bound.output_coeffs.expect("bank bound for S3 output"),
            bound.output_extras,
            Assignment::PerColumn,
        )?,
    };

    // Post-activation regularization.
    regseq(
        tape,
        psi,
        RegSlot {
            config: &config.reg,
            position: RegPosition::Post,
            bn: params
                .bn_post
                .as_mut()
                .map(|state| {
                    let (g, b) = bound.bn_post.expect("bn_post bound");
                    (state, g, b)
                }),
            seed: ctx.seed,
            layer_index: ctx.layer_index,
            step: ctx.step,
        },
        ctx.mode,
    )
}
