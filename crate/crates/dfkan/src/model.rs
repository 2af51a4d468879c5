//! Networks: ordered layers, an optional input-attention gate, whole-model
//! parameter accounting, presets, and checkpoint serialization.

use std::io::{Read, Write};
use std::path::Path;

use crate::basis::{BasisFamily, BasisSpec};
use crate::error::{Error, Result};
use crate::layer::{
    self, BoundLayer, FixedFn, ForwardCtx, InputStrategy, LayerConfig, LayerParams, OutputStrategy,
};
use crate::reg::Mode;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// 16-byte magic header of checkpoint files.
pub const CHECKPOINT_MAGIC: &[u8; 16] = b"DFKAN-CHECKPOINT";

/// Attention gate configuration: absent, or present with uniform init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionInit {
    Off,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: Vec<LayerConfig>,
    pub attention: AttentionInit,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| {
                Error::Config(format!("layer {l}: {e}"))
            })?;
        }
        for l in 1..self.layers.len() {
            let prev = &self.layers[l - 1];
            let cur = &self.layers[l];
            if prev.n_out != cur.n_in {
                return Err(Error::Config(format!(
                    "dimension chain broken between layer {} ({}->{}) and layer {} ({}->{})",
                    l - 1,
                    prev.n_in,
                    prev.n_out,
                    l,
                    cur.n_in,
                    cur.n_out
                )));
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    /// Formula-based total parameter count (layers plus attention logits).
    pub fn param_total(&self) -> usize {
        let layers: usize = self.layers.iter().map(|l| layer::param_count(l).total).sum();
        let attention = match self.attention {
            AttentionInit::Off => 0,
            AttentionInit::Uniform => self.n_features(),
        };
        layers + attention
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
    pub attention_logits: Option<Tensor>,
}

/// Tape handles for all model leaves, in canonical walk order.
pub struct BoundModel {
    pub attention: Option<Var>,
    pub layers: Vec<BoundLayer>,
}

impl BoundModel {
    /// Variable ids in the same order as the parameter walk.
    pub fn walk_vars(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        if let Some(a) = self.attention {
            vars.push(a);
        }
        for l in &self.layers {
            vars.push(l.weight);
            if let Some(b) = l.bias {
                vars.push(b);
            }
            if let Some(c) = l.input_coeffs {
                vars.push(c);
            }
            if let Some(e) = l.input_extras {
                vars.push(e);
            }
            if let Some(c) = l.output_coeffs {
                vars.push(c);
            }
            if let Some(e) = l.output_extras {
                vars.push(e);
            }
            if let Some((g, b)) = l.bn_pre {
                vars.push(g);
                vars.push(b);
            }
            if let Some((g, b)) = l.bn_post {
                vars.push(g);
                vars.push(b);
            }
        }
        vars
    }
}

impl Model {
    /// Build a model: validate the dimension chain, initialize every layer
    /// from a per-layer derived seed, zero the attention logits.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(l, cfg)| layer::init_params(cfg, rng::derive_seed(config.seed, &[0x117, l as u64])))
            .collect();
        let attention_logits = match config.attention {
            AttentionInit::Off => None,
            AttentionInit::Uniform => Some(Tensor::zeros(1, config.n_features())),
        };
        Ok(Self {
            config,
            layers,
            attention_logits,
        })
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features()
    }

    /// Softmax attention weights, or None when the gate is off.
    pub fn attention_weights(&self) -> Option<Vec<f64>> {
        self.attention_logits.as_ref().map(|t| softmax(t.data()))
    }

    /// Walk every learnable tensor in canonical order.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        if let Some(a) = &self.attention_logits {
            f("attention.logits", a);
        }
        for (l, params) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layer{l}.{name}");
            f(&p("weight"), &params.weight);
            if let Some(b) = &params.bias {
                f(&p("bias"), b);
            }
            if let Some(bank) = &params.input_bank {
                f(&p("input_coeffs"), &bank.coeffs);
                if let Some(e) = &bank.extras {
                    f(&p("input_extras"), e);
                }
            }
            if let Some(bank) = &params.output_bank {
                f(&p("output_coeffs"), &bank.coeffs);
                if let Some(e) = &bank.extras {
                    f(&p("output_extras"), e);
                }
            }
            if let Some(bn) = &params.bn_pre {
                f(&p("bn_pre.gamma"), &bn.gamma);
                f(&p("bn_pre.beta"), &bn.beta);
            }
            if let Some(bn) = &params.bn_post {
                f(&p("bn_post.gamma"), &bn.gamma);
                f(&p("bn_post.beta"), &bn.beta);
            }
        }
    }

    /// Mutable walk in the same canonical order.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        if let Some(a) = &mut self.attention_logits {
            f("attention.logits", a);
        }
        for (l, params) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layer{l}");
            f(&format!("{prefix}.weight"), &mut params.weight);
            if let Some(b) = &mut params.bias {
                f(&format!("{prefix}.bias"), b);
            }
            if let Some(bank) = &mut params.input_bank {
                f(&format!("{prefix}.input_coeffs"), &mut bank.coeffs);
                if let Some(e) = &mut bank.extras {
                    f(&format!("{prefix}.input_extras"), e);
                }
            }
            if let Some(bank) = &mut params.output_bank {
                f(&format!("{prefix}.output_coeffs"), &mut bank.coeffs);
                if let Some(e) = &mut bank.extras {
                    f(&format!("{prefix}.output_extras"), e);
                }
            }
            if let Some(bn) = &mut params.bn_pre {
                f(&format!("{prefix}.bn_pre.gamma"), &mut bn.gamma);
                f(&format!("{prefix}.bn_pre.beta"), &mut bn.beta);
            }
            if let Some(bn) = &mut params.bn_post {
                f(&format!("{prefix}.bn_post.gamma"), &mut bn.gamma);
                f(&format!("{prefix}.bn_post.beta"), &mut bn.beta);
            }
        }
    }

    /// Enumerated learnable scalar count (the oracle for the formulas).
    pub fn enumerate_scalars(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    /// Register all learnable leaves on the tape, in walk order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundModel {
        let attention = self
            .attention_logits
            .as_ref()
            .map(|a| tape.leaf(a.clone(), requires_grad));
        let layers = self
            .layers
            .iter()
            .map(|p| layer::bind(tape, p, requires_grad))
            .collect();
        BoundModel { attention, layers }
    }

    /// Forward pass over a bound model. Train mode updates batch-norm
    /// running statistics; `seed`/`step` derive the dropout streams.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        mode: Mode,
        seed: u64,
        step: u64,
    ) -> Result<Var> {
        self.forward_collect(tape, bound, x, mode, seed, step)
            .map(|outputs| *outputs.last().expect("at least one layer"))
    }

    /// Forward pass returning every layer's output, in order.
    pub fn forward_collect(
        &mut self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        mode: Mode,
        seed: u64,
        step: u64,
    ) -> Result<Vec<Var>> {
        let n = self.n_features();
        if tape.value(x).cols() != n {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: tape.value(x).shape(),
                rhs: (tape.value(x).rows(), n),
            });
        }
        let mut h = match bound.attention {
            Some(logits) => attention_scale(tape, x, logits)?,
            None => x,
        };
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (l, (cfg, params)) in self
            .config
            .layers
            .clone()
            .iter()
            .zip(self.layers.iter_mut())
            .enumerate()
        {
            let ctx = ForwardCtx {
                mode,
                seed,
                step,
                layer_index: l,
            };
            h = layer::forward(tape, cfg, params, &bound.layers[l], h, &ctx)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Per-layer outputs on raw inputs in inference mode.
    pub fn predict_layers(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let bound = scratch.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let outputs = scratch.forward_collect(&mut tape, &bound, xv, Mode::Infer, 0, 0)?;
        Ok(outputs.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Inference on raw inputs.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let bound = scratch.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let out = scratch.forward_on_tape(&mut tape, &bound, xv, Mode::Infer, 0, 0)?;
        Ok(tape.value(out).clone())
    }

    /// Inference plus exact reverse-mode gradients of the summed output
    /// with respect to each input element. Rows are independent in infer
    /// mode, so row r of the returned gradient is the input gradient of
    /// output row r.
    pub fn predict_with_input_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let bound = scratch.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let out = scratch.forward_on_tape(&mut tape, &bound, xv, Mode::Infer, 0, 0)?;
        let total = tape.reduce_sum(out)?;
        let grads = tape.backward(total)?;
        let dx = grads
            .get(&xv.id())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        Ok((tape.value(out).clone(), dx))
    }

    /// Learnable scalars flattened in walk order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Restore learnable scalars from a flat vector in walk order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.enumerate_scalars() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} scalars, model expects {}",
                flat.len(),
                self.enumerate_scalars()
            )));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Batch-norm running statistics flattened in walk order.
    pub fn flat_buffers(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for params in &self.layers {
            for bn in [&params.bn_pre, &params.bn_post].into_iter().flatten() {
                out.extend_from_slice(bn.running_mean.data());
                out.extend_from_slice(bn.running_var.data());
            }
        }
        out
    }

    pub fn set_flat_buffers(&mut self, flat: &[f64]) -> Result<()> {
        let expect: usize = self
            .layers
            .iter()
            .flat_map(|p| [&p.bn_pre, &p.bn_post])
            .flatten()
            .map(|bn| bn.running_mean.len() + bn.running_var.len())
            .sum();
        if flat.len() != expect {
            return Err(Error::Contract(format!(
                "buffer vector has {} scalars, model expects {expect}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for params in &mut self.layers {
            for bn in [&mut params.bn_pre, &mut params.bn_post].into_iter().flatten() {
                let n = bn.running_mean.len();
                bn.running_mean
                    .data_mut()
                    .copy_from_slice(&flat[offset..offset + n]);
                offset += n;
                let n = bn.running_var.len();
                bn.running_var
                    .data_mut()
                    .copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Write the checkpoint: magic, config hash, flat parameters, then the
    /// batch-norm buffers, all little-endian f64.
    pub fn write_checkpoint(&self, mut w: impl Write, config_hash: &[u8; 32]) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(config_hash)?;
        let params = self.flat_params();
        let buffers = self.flat_buffers();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for v in &params {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(buffers.len() as u64).to_le_bytes())?;
        for v in &buffers {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, config_hash: &[u8; 32]) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f), config_hash)
    }

    /// Read a checkpoint into this model, verifying magic and config hash.
    pub fn load_checkpoint(
        &mut self,
        path: impl AsRef<Path>,
        expected_hash: &[u8; 32],
    ) -> Result<()> {
        let f = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(f);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        if &hash != expected_hash {
            return Err(Error::Data(
                "checkpoint config hash does not match the supplied config".into(),
            ));
        }
        let read_vec = |r: &mut dyn Read| -> Result<Vec<f64>> {
            let mut len = [0u8; 8];
            r.read_exact(&mut len)?;
            let len = u64::from_le_bytes(len) as usize;
            let mut out = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let params = read_vec(&mut r)?;
        let buffers = read_vec(&mut r)?;
        self.set_flat_params(&params)?;
        self.set_flat_buffers(&buffers)?;
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Scale the columns of `x` by `n * softmax(logits)`. With zero logits the
/// gate is exactly the identity.
fn attention_scale(tape: &mut Tape, x: Var, logits: Var) -> Result<Var> {
    let xv = tape.value(x);
    let lv = tape.value(logits);
    let n = xv.cols();
    if lv.shape() != (1, n) {
        return Err(Error::ShapeMismatch {
            op: "attention_scale",
            lhs: xv.shape(),
            rhs: lv.shape(),
        });
    }
    let alpha = softmax(lv.data());
    let nf = n as f64;
    let mut out = Tensor::zeros(xv.rows(), n);
    for r in 0..xv.rows() {
        for c in 0..n {
            out.set(r, c, xv.get(r, c) * nf * alpha[c]);
        }
    }
    let rule = move |g: &Tensor, ins: &[&Tensor], _: &Tensor| -> Result<Vec<Tensor>> {
        let xv = ins[0];
        let lv = ins[1];
        let n = xv.cols();
        let nf = n as f64;
        let alpha = softmax(lv.data());
        let mut dx = Tensor::zeros(xv.rows(), n);
        let mut dalpha = vec![0.0; n];
        for r in 0..xv.rows() {
            for c in 0..n {
                let gu = g.get(r, c);
                dx.set(r, c, gu * nf * alpha[c]);
                dalpha[c] += gu * nf * xv.get(r, c);
            }
        }
        // Softmax Jacobian: dtheta_k = alpha_k (dalpha_k - sum_j dalpha_j alpha_j).
        let dot: f64 = dalpha.iter().zip(&alpha).map(|(d, a)| d * a).sum();
        let dtheta: Vec<f64> = alpha
            .iter()
            .zip(&dalpha)
            .map(|(&a, &d)| a * (d - dot))
            .collect();
        Ok(vec![dx, Tensor::new(1, n, dtheta)?])
    };
    tape.custom(&[x, logits], out, "attention_scale", Box::new(rule))
}

/// Standard MLP as a degenerate configuration: every layer applies no input
/// transformation and a fixed output activation, except the linear head.
pub fn preset_mlp(dims: &[usize], activation: FixedFn, seed: u64) -> Result<ModelConfig> {
    if dims.len() < 2 {
        return Err(Error::Config("preset needs at least [in, out] dims".into()));
    }
    let mut layers = Vec::new();
    for l in 0..dims.len() - 1 {
        let last = l == dims.len() - 2;
        let output = if last {
            OutputStrategy::None
        } else {
            OutputStrategy::Fixed(activation)
        };
        layers.push(LayerConfig::new(
            dims[l],
            dims[l + 1],
            InputStrategy::None,
            output,
        ));
    }
    Ok(ModelConfig {
        layers,
        attention: AttentionInit::Off,
        seed,
    })
}

/// Edge-centric network as a degenerate configuration: every connection has
/// its own learnable B-spline, no output activations anywhere. The linear
/// weights remain (they are absorbable into the coefficients but kept by
/// the layer form).
pub fn preset_vanilla_kan(
    dims: &[usize],
    spline_order: usize,
    grid_size: usize,
    seed: u64,
) -> Result<ModelConfig> {
    if dims.len() < 2 {
        return Err(Error::Config("preset needs at least [in, out] dims".into()));
    }
    let spec = BasisSpec::bspline(spline_order, grid_size)?;
    let layers = (0..dims.len() - 1)
        .map(|l| {
            LayerConfig::new(
                dims[l],
                dims[l + 1],
                InputStrategy::PerConnection(spec.clone()),
                OutputStrategy::None,
            )
        })
        .collect();
    Ok(ModelConfig {
        layers,
        attention: AttentionInit::Off,
        seed,
    })
}

/// Default hybrid: a per-connection Legendre first layer for feature
/// extraction, then globally shared Legendre input functions with identity
/// outputs on the remaining layers.
pub fn preset_hybrid(dims: &[usize], order: usize, seed: u64) -> Result<ModelConfig> {
    if dims.len() < 2 {
        return Err(Error::Config("preset needs at least [in, out] dims".into()));
    }
    let spec = BasisSpec::new(BasisFamily::Legendre, order)?;
    let mut layers = Vec::new();
    for l in 0..dims.len() - 1 {
        let (input, output) = if l == 0 {
            (
                InputStrategy::PerConnection(spec.clone()),
                OutputStrategy::None,
            )
        } else {
            (
                InputStrategy::Global(spec.clone()),
                OutputStrategy::Fixed(FixedFn::Identity),
            )
        };
        layers.push(LayerConfig::new(dims[l], dims[l + 1], input, output));
    }
    Ok(ModelConfig {
        layers,
        attention: AttentionInit::Off,
        seed,
    })
}
