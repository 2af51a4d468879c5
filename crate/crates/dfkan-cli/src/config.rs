//! Run-configuration file schema, resolution into core types, and the
//! canonical serialization that run identity hashes are computed over.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dfkan::layer::{InputStrategy, LayerConfig, OutputStrategy};
use dfkan::model::{preset_hybrid, preset_mlp, preset_vanilla_kan, AttentionInit, ModelConfig};
use dfkan::optim::{Optimizer, TrainConfig};
use dfkan::reg::{RegConfig, RegOrder, RegPlacement};
use dfkan::{BasisFamily, BasisSpec, DomainMap, FixedFn};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Generator id; mutually exclusive with `path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Delimited-text source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// "auto" | "minmax" | "none"
    #[serde(default = "default_auto")]
    pub normalize_features: String,
    /// "zscore" | "none"
    #[serde(default = "default_none")]
    pub normalize_target: String,
}

fn default_delimiter() -> String {
    ",".into()
}
fn default_n() -> usize {
    5000
}
fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}
fn default_auto() -> String {
    "auto".into()
}
fn default_none() -> String {
    "none".into()
}

/// Noise level: an absolute sigma, "auto" (5% of clean target std), or
/// "default" (the generator's documented default).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Sigma(f64),
    Named(String),
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Named("default".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSection>,
    #[serde(default)]
    pub attention: bool,
    /// Model-level regularization defaults applied to layers that do not
    /// override them.
    #[serde(default)]
    pub reg: RegSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSection {
    /// "mlp" | "vanilla_kan" | "hybrid"
    pub name: String,
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spline_order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    pub n_in: usize,
    pub n_out: usize,
    /// "none" | "fixed:<fn>" | "global" | "per_input" | "per_neuron_input"
    #[serde(default = "default_none")]
    pub input: String,
    /// "none" | "fixed:<fn>" | "global" | "per_output"
    #[serde(default = "default_none")]
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_basis: Option<BasisSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_basis: Option<BasisSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg: Option<RegSection>,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spline_order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numerator_degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denominator_degree: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSection {
    /// "none" | "pre" | "post" | "both"
    #[serde(default = "default_none")]
    pub placement: String,
    /// "dropout_first" | "batchnorm_first"
    #[serde(default = "default_order")]
    pub order: String,
    #[serde(default = "default_dropout_p")]
    pub dropout_p: f64,
    #[serde(default)]
    pub use_dropout: bool,
    #[serde(default)]
    pub use_bn: bool,
}

fn default_order() -> String {
    "dropout_first".into()
}
fn default_dropout_p() -> f64 {
    0.1
}

impl Default for RegSection {
    fn default() -> Self {
        Self {
            placement: default_none(),
            order: default_order(),
            dropout_p: default_dropout_p(),
            use_dropout: false,
            use_bn: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// "adam" | "sgd"
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// 0 = full batch
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub attention_l1: f64,
    /// 0 = off
    #[serde(default)]
    pub early_stop_patience: usize,
    /// 0 = off
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_optimizer() -> String {
    "adam".into()
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    3000
}
fn default_batch() -> usize {
    64
}
fn default_clip() -> f64 {
    10.0
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: default_optimizer(),
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            weight_decay: 0.0,
            attention_l1: 0.0,
            early_stop_patience: 0,
            grad_clip: default_clip(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing, canonicalization, hashing.

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).context("config parse error")?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        match (&self.dataset.kind, &self.dataset.path) {
            (Some(_), Some(_)) => bail!("dataset: `kind` and `path` are mutually exclusive"),
            (None, None) => bail!("dataset: one of `kind` or `path` is required"),
            (None, Some(_)) if self.dataset.target.is_none() => {
                bail!("dataset: csv sources need a `target` column name")
            }
            _ => {}
        }
        if self.model.preset.is_none() && self.model.layers.is_empty() {
            bail!("model: either `preset` or `layers` is required");
        }
        if self.model.preset.is_some() && !self.model.layers.is_empty() {
            bail!("model: `preset` and `layers` are mutually exclusive");
        }
        Ok(())
    }

    /// Canonical text: the fully resolved structure re-serialized, so
    /// formatting and comment differences never change run identity.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).context("canonical serialization")
    }

    pub fn hash(&self) -> Result<[u8; 32]> {
        let canonical = self.canonical()?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.into())
    }

    pub fn hash_hex(&self) -> Result<String> {
        Ok(hex_of(&self.hash()?))
    }

    pub fn run_id(&self) -> Result<String> {
        Ok(self.hash_hex()?[..12].to_string())
    }

    /// Build the core model configuration.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut config = match &self.model.preset {
            Some(preset) => resolve_preset(preset, self.seed)?,
            None => {
                let layers = self
                    .model
                    .layers
                    .iter()
                    .map(|l| resolve_layer(l, &self.model.reg))
                    .collect::<Result<Vec<_>>>()?;
                ModelConfig {
                    layers,
                    attention: AttentionInit::Off,
                    seed: self.seed,
                }
            }
        };
        if self.model.preset.is_some() {
            // model-level reg defaults also apply to preset layers
            let reg = resolve_reg(&self.model.reg)?;
            for layer in &mut config.layers {
                layer.reg = reg.clone();
            }
        }
        config.seed = self.seed;
        config.attention = if self.model.attention {
            AttentionInit::Uniform
        } else {
            AttentionInit::Off
        };
        config.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let optimizer = match t.optimizer.as_str() {
            "adam" => Optimizer::adam(t.lr),
            "sgd" => Optimizer::Sgd { lr: t.lr },
            other => bail!("unknown optimizer `{other}`"),
        };
        let cfg = TrainConfig {
            optimizer,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            weight_decay: t.weight_decay,
            attention_l1: t.attention_l1,
            early_stop_patience: (t.early_stop_patience > 0).then_some(t.early_stop_patience),
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
        };
        cfg.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }

    /// Whether min-max feature scaling applies: explicit setting, or in
    /// auto mode whenever the model evaluates a bounded-domain family
    /// without a squashing map.
    pub fn wants_feature_scaling(&self, model: &ModelConfig) -> Result<bool> {
        match self.dataset.normalize_features.as_str() {
            "minmax" => Ok(true),
            "none" => Ok(false),
            "auto" => {
                let bounded_unmapped = |spec: &BasisSpec| {
                    let bounded = matches!(
                        spec.family,
                        BasisFamily::Legendre
                            | BasisFamily::Chebyshev
                            | BasisFamily::Gegenbauer { .. }
                            | BasisFamily::Jacobi { .. }
                            | BasisFamily::BSpline { .. }
                    );
                    bounded && spec.domain_map == DomainMap::None
                };
                Ok(model.layers.iter().any(|l| {
                    l.input_strategy.basis().is_some_and(bounded_unmapped)
                        || l.output_strategy.basis().is_some_and(bounded_unmapped)
                }))
            }
            other => bail!("unknown normalize_features mode `{other}`"),
        }
    }

    pub fn wants_target_scaling(&self) -> Result<bool> {
        match self.dataset.normalize_target.as_str() {
            "zscore" => Ok(true),
            "none" => Ok(false),
            other => bail!("unknown normalize_target mode `{other}`"),
        }
    }
}

pub fn hex_of(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve_preset(preset: &PresetSection, seed: u64) -> Result<ModelConfig> {
    if preset.dims.len() < 2 {
        bail!("preset dims need at least [in, out]");
    }
    match preset.name.as_str() {
        "mlp" => {
            let act = FixedFn::parse(preset.activation.as_deref().unwrap_or("relu"))
                .map_err(|e| anyhow!("{e}"))?;
            preset_mlp(&preset.dims, act, seed).map_err(|e| anyhow!("{e}"))
        }
        "vanilla_kan" => preset_vanilla_kan(
            &preset.dims,
            preset.spline_order.unwrap_or(4),
            preset.grid_size.unwrap_or(5),
            seed,
        )
        .map_err(|e| anyhow!("{e}")),
        "hybrid" => {
            preset_hybrid(&preset.dims, preset.order.unwrap_or(5), seed).map_err(|e| anyhow!("{e}"))
        }
        other => bail!("unknown preset `{other}`"),
    }
}

fn resolve_basis(section: &BasisSection) -> Result<BasisSpec> {
    let spec = match section.family.as_str() {
        "standard_poly" => BasisSpec::new(
            BasisFamily::StandardPoly,
            section.order.ok_or_else(|| anyhow!("basis needs `order`"))?,
        ),
        "legendre" => BasisSpec::new(
            BasisFamily::Legendre,
            section.order.ok_or_else(|| anyhow!("basis needs `order`"))?,
        ),
        "chebyshev" => BasisSpec::new(
            BasisFamily::Chebyshev,
            section.order.ok_or_else(|| anyhow!("basis needs `order`"))?,
        ),
        "gegenbauer" => BasisSpec::new(
            BasisFamily::Gegenbauer {
                alpha: section.alpha.unwrap_or(1.0),
            },
            section.order.ok_or_else(|| anyhow!("basis needs `order`"))?,
        ),
        "jacobi" => BasisSpec::new(
            BasisFamily::Jacobi {
                alpha: section.alpha.unwrap_or(1.0),
                beta: section.beta.unwrap_or(1.0),
            },
            section.order.ok_or_else(|| anyhow!("basis needs `order`"))?,
        ),
        "bspline" => BasisSpec::bspline(
            section.spline_order.unwrap_or(4),
            section
                .grid_size
                .ok_or_else(|| anyhow!("bspline basis needs `grid_size`"))?,
        ),
        "gaussian_rbf" => BasisSpec::new(
            BasisFamily::GaussianRbf,
            section.order.ok_or_else(|| anyhow!("basis needs `order`"))?,
        ),
        "sine" => BasisSpec::new(
            BasisFamily::Sine,
            section.order.ok_or_else(|| anyhow!("basis needs `order`"))?,
        ),
        "rational" => BasisSpec::rational(
            section
                .numerator_degree
                .ok_or_else(|| anyhow!("rational basis needs `numerator_degree`"))?,
            section.denominator_degree.unwrap_or(1),
        ),
        other => bail!("unknown basis family `{other}`"),
    }
    .map_err(|e| anyhow!("{e}"))?;
    match &section.domain {
        Some(d) => Ok(spec.with_domain(DomainMap::parse(d).map_err(|e| anyhow!("{e}"))?)),
        None => Ok(spec),
    }
}

fn resolve_reg(section: &RegSection) -> Result<RegConfig> {
    let placement = match section.placement.as_str() {
        "none" => RegPlacement::None,
        "pre" => RegPlacement::PreOnly,
        "post" => RegPlacement::PostOnly,
        "both" => RegPlacement::Both,
        other => bail!("unknown reg placement `{other}`"),
    };
    let order = match section.order.as_str() {
        "dropout_first" => RegOrder::DropoutFirst,
        "batchnorm_first" => RegOrder::BatchNormFirst,
        other => bail!("unknown reg order `{other}`"),
    };
    let config = RegConfig {
        placement,
        order,
        use_dropout: section.use_dropout,
        use_batchnorm: section.use_bn,
        dropout_p: section.dropout_p,
    };
    config.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(config)
}

fn resolve_layer(section: &LayerSection, model_reg: &RegSection) -> Result<LayerConfig> {
    let need_basis = |basis: &Option<BasisSection>, what: &str| -> Result<BasisSpec> {
        basis
            .as_ref()
            .map(resolve_basis)
            .transpose()?
            .ok_or_else(|| anyhow!("{what} requires a basis section"))
    };
    let input = match section.input.as_str() {
        "none" => InputStrategy::None,
        s if s.starts_with("fixed:") => {
            InputStrategy::Fixed(FixedFn::parse(&s[6..]).map_err(|e| anyhow!("{e}"))?)
        }
        "global" => InputStrategy::Global(need_basis(&section.input_basis, "global input")?),
        "per_input" | "per_dimension" => {
            InputStrategy::PerDimension(need_basis(&section.input_basis, "per_input")?)
        }
        "per_neuron_input" | "per_connection" => {
            InputStrategy::PerConnection(need_basis(&section.input_basis, "per_neuron_input")?)
        }
        other => bail!("unknown input strategy `{other}`"),
    };
    let output = match section.output.as_str() {
        "none" => OutputStrategy::None,
        s if s.starts_with("fixed:") => {
            OutputStrategy::Fixed(FixedFn::parse(&s[6..]).map_err(|e| anyhow!("{e}"))?)
        }
        "global" => OutputStrategy::Global(need_basis(&section.output_basis, "global output")?),
        "per_output" | "per_dimension" => {
            OutputStrategy::PerDimension(need_basis(&section.output_basis, "per_output")?)
        }
        "per_neuron_input" | "per_connection" => {
            bail!("per-connection functions exist on the input side only")
        }
        other => bail!("unknown output strategy `{other}`"),
    };
    let reg = resolve_reg(section.reg.as_ref().unwrap_or(model_reg))?;
    let mut config = LayerConfig::new(section.n_in, section.n_out, input, output).with_reg(reg);
    config.has_bias = section.bias;
    config.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Benchmark suite schema.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub cells: Vec<CellConfig>,
}

fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl SuiteConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: SuiteConfig = toml::from_str(text).context("suite config parse error")?;
        if config.cells.is_empty() {
            bail!("suite has no cells");
        }
        if config.repeats == 0 {
            bail!("suite repeats must be at least 1");
        }
        Ok(config)
    }
}

impl CellConfig {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            self.model
                .preset
                .as_ref()
                .map(|p| p.name.clone())
                .unwrap_or_else(|| "custom".into())
        })
    }

    pub fn dataset_label(&self) -> String {
        self.dataset
            .kind
            .clone()
            .or_else(|| self.dataset.path.clone())
            .unwrap_or_else(|| "unknown".into())
    }

    pub fn as_run(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }
}
