//! Experiment configuration: one versioned TOML document, named profiles, and
//! validation that reports the first violated constraint by field path.
//!
//! A document may name a `profile`; its keys are then overlaid on that profile.
//! Without one, the `mnist-binary` profile supplies every default.

use serde::{Deserialize, Serialize};

use crate::error::{CouplingError, Result};
use crate::nn::Activation;

pub const SCHEMA_VERSION: u32 = 1;

pub const PROFILES: [&str; 4] = ["toy-pair", "toy-motif", "mnist-binary", "mnist-binary-mini"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Mnist,
    PerfectPair,
    Motif,
    /// Whitespace-separated token indices, one sequence per line.
    Sequences,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Draw count for synthetic sources.
    pub num_examples: usize,
    pub motif_count: usize,
    /// Mixture weights for the motif source; empty means uniform.
    pub motif_weights: Vec<f64>,
    #[serde(default)]
    pub path: Option<String>,
    pub threshold: f64,
    /// Side length when sequences are flattened square images.
    #[serde(default)]
    pub image_side: Option<usize>,
    /// Label classes for conditional generation; 0 trains unconditionally.
    pub num_classes: usize,
    /// Use only the first `n` training items.
    #[serde(default)]
    pub train_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Mnist,
            seq_len: 784,
            vocab_size: 2,
            num_examples: 0,
            motif_count: 0,
            motif_weights: Vec::new(),
            path: None,
            threshold: 0.5,
            image_side: Some(28),
            num_classes: 0,
            train_limit: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Transformer,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub arch: Arch,
    pub width: usize,
    /// Hidden layers (MLP) or attention blocks (transformer).
    pub depth: usize,
    pub heads: usize,
    /// Transformer token count for generators; must divide the sequence length.
    #[serde(default)]
    pub tokens: Option<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            arch: Arch::Mlp,
            width: 128,
            depth: 2,
            heads: 4,
            tokens: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_positions: usize,
    pub latent_channels: usize,
    pub activation: Activation,
    pub encoder: NetConfig,
    pub generator: NetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_positions: 49,
            latent_channels: 16,
            activation: Activation::Silu,
            encoder: NetConfig {
                arch: Arch::Conv,
                width: 32,
                depth: 2,
                heads: 4,
                tokens: None,
            },
            generator: NetConfig {
                arch: Arch::Transformer,
                width: 512,
                depth: 8,
                heads: 8,
                tokens: Some(49),
            },
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.latent_positions * self.latent_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup then cosine decay to zero.
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Frozen,
    Resampled,
}

/// Linear ramp of the flow weight from `start` to the configured value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowAnneal {
    pub start: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageAConfig {
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub lambda_flow: f64,
    pub latent_noise_std: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_epochs: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub pair_mode: PairMode,
    #[serde(default)]
    pub flow_anneal: Option<FlowAnneal>,
}

impl Default for StageAConfig {
    fn default() -> Self {
        StageAConfig {
            lambda_rec: 1.0,
            lambda_kl: 1.0,
            lambda_flow: 1.0,
            latent_noise_std: 0.5,
            epochs: 100,
            batch_size: 256,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            warmup_epochs: 1,
            grad_clip: None,
            pair_mode: PairMode::Resampled,
            flow_anneal: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_epochs: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub z_scale: f64,
    pub temperature: f64,
    #[serde(default)]
    pub ema_decay: Option<f64>,
}

impl Default for StageBConfig {
    fn default() -> Self {
        StageBConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            warmup_epochs: 1,
            grad_clip: None,
            z_scale: 1.0,
            temperature: 1.0,
            ema_decay: Some(0.999),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subnet {
    Mlp,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permutation {
    None,
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub num_blocks: usize,
    pub hidden_width: usize,
    pub num_layers_per_block: usize,
    pub heads: usize,
    pub subnet: Subnet,
    pub clamp: f64,
    pub permutation: Permutation,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            num_blocks: 5,
            hidden_width: 128,
            num_layers_per_block: 5,
            heads: 4,
            subnet: Subnet::Mlp,
            clamp: 5.0,
            permutation: Permutation::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdmConfig {
    pub schedule: ScheduleKind,
    /// One temperature per step, or a single value broadcast to every step.
    pub temperatures: Vec<f64>,
    pub remask_strength: f64,
    pub steps: usize,
    pub t_min: f64,
    pub max_resample: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub denoiser: NetConfig,
}

impl Default for MdmConfig {
    fn default() -> Self {
        MdmConfig {
            schedule: ScheduleKind::Linear,
            temperatures: vec![1.0],
            remask_strength: 1.0,
            steps: 4,
            t_min: 1e-3,
            max_resample: 100,
            epochs: 100,
            batch_size: 256,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            denoiser: NetConfig {
                arch: Arch::Transformer,
                width: 256,
                depth: 4,
                heads: 4,
                tokens: None,
            },
        }
    }
}

impl MdmConfig {
    /// Per-step temperatures for `steps` steps.
    pub fn step_temperatures(&self, steps: usize) -> Vec<f64> {
        if self.temperatures.len() == 1 {
            vec![self.temperatures[0]; steps]
        } else {
            self.temperatures.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    Cfg,
    Latent,
    RewardFt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxationMode {
    Soft,
    Gumbel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    LogitMse,
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub cfg_scale: f64,
    pub guidance_steps: usize,
    pub step_size: f64,
    pub relaxation: RelaxationMode,
    pub relaxation_temperature: f64,
    pub lambda_reward: f64,
    pub lambda_anchor: f64,
    pub anchor: AnchorKind,
    pub cond_dropout_rate: f64,
    pub finetune_steps: usize,
    pub finetune_learning_rate: f64,
    pub finetune_batch_size: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::Cfg,
            cfg_scale: 2.0,
            guidance_steps: 5,
            step_size: 0.1,
            relaxation: RelaxationMode::Soft,
            relaxation_temperature: 1.0,
            lambda_reward: 1.0,
            lambda_anchor: 1.0,
            anchor: AnchorKind::LogitMse,
            cond_dropout_rate: 0.1,
            finetune_steps: 200,
            finetune_learning_rate: 1e-5,
            finetune_batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_samples: usize,
    /// Trapezoid points per latent axis for exact marginal enumeration.
    pub quadrature_points: usize,
    pub fid_resize: String,
    pub fid_input_size: usize,
    pub fid_layer: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_samples: 1000,
            quadrature_points: 401,
            fid_resize: "bilinear".into(),
            fid_input_size: 299,
            fid_layer: "pool3-2048".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub profile: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage_a: StageAConfig,
    pub stage_b: StageBConfig,
    pub flow: FlowConfig,
    pub mdm: MdmConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            profile: "mnist-binary".into(),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stage_a: StageAConfig::default(),
            stage_b: StageBConfig::default(),
            flow: FlowConfig::default(),
            mdm: MdmConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        match name {
            "mnist-binary" => {}
            "mnist-binary-mini" => {
                cfg.data.train_limit = Some(10_000);
                cfg.model.encoder.width = 16;
                cfg.model.generator = NetConfig {
                    arch: Arch::Transformer,
                    width: 128,
                    depth: 2,
                    heads: 4,
                    tokens: Some(49),
                };
                cfg.flow = FlowConfig {
                    num_blocks: 3,
                    hidden_width: 128,
                    num_layers_per_block: 2,
                    ..FlowConfig::default()
                };
                cfg.stage_a.epochs = 10;
                cfg.stage_b.epochs = 10;
                cfg.stage_a.learning_rate = 1e-3;
                cfg.stage_b.learning_rate = 1e-3;
                cfg.stage_b.ema_decay = None;
                cfg.mdm.epochs = 10;
                cfg.mdm.denoiser.width = 64;
                cfg.mdm.denoiser.depth = 2;
                cfg.mdm.denoiser.tokens = Some(49);
            }
            "toy-pair" | "toy-motif" => {
                let pair = name == "toy-pair";
                cfg.data = DataConfig {
                    source: if pair {
                        DataSource::PerfectPair
                    } else {
                        DataSource::Motif
                    },
                    seq_len: if pair { 2 } else { 8 },
                    vocab_size: if pair { 2 } else { 4 },
                    num_examples: 2048,
                    motif_count: if pair { 0 } else { 4 },
                    image_side: None,
                    ..DataConfig::default()
                };
                let mlp = |width| NetConfig {
                    arch: Arch::Mlp,
                    width,
                    depth: 2,
                    heads: 1,
                    tokens: None,
                };
                cfg.model = ModelConfig {
                    latent_positions: 1,
                    latent_channels: if pair { 2 } else { 4 },
                    activation: Activation::Silu,
                    encoder: mlp(64),
                    generator: mlp(128),
                };
                cfg.flow = FlowConfig {
                    num_blocks: 6,
                    hidden_width: 64,
                    num_layers_per_block: 2,
                    heads: 1,
                    ..FlowConfig::default()
                };
                cfg.stage_a = StageAConfig {
                    lambda_kl: 0.1,
                    latent_noise_std: 0.1,
                    epochs: 200,
                    learning_rate: 1e-3,
                    lr_schedule: LrSchedule::Constant,
                    warmup_epochs: 0,
                    ..StageAConfig::default()
                };
                cfg.stage_b = StageBConfig {
                    epochs: 200,
                    learning_rate: 1e-3,
                    lr_schedule: LrSchedule::Constant,
                    warmup_epochs: 0,
                    ema_decay: None,
                    ..StageBConfig::default()
                };
                cfg.mdm = MdmConfig {
                    steps: if pair { 2 } else { 4 },
                    epochs: 200,
                    learning_rate: 1e-3,
                    denoiser: mlp(128),
                    ..MdmConfig::default()
                };
                cfg.eval.num_samples = 10_000;
            }
            other => {
                return Err(CouplingError::config(
                    "profile",
                    format!("unknown profile `{other}`; expected one of {}", PROFILES.join(", ")),
                ))
            }
        }
        cfg.profile = name.into();
        Ok(cfg)
    }

    /// Parse a document, overlay it on its profile (default `mnist-binary`) and validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CouplingError::config("<document>", e.to_string()))?;
        let profile = match user.get("profile") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(CouplingError::config("profile", "must be a string")),
            None => ExperimentConfig::default().profile,
        };
        let base = ExperimentConfig::profile(&profile)?;
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| CouplingError::config("<document>", e.to_string()))?;
        overlay(&mut merged, user);
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CouplingError::config("<document>", e.message().to_string()))?;
        validate_config(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hex digest of the serialized configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn is_image(&self) -> bool {
        self.data.image_side.is_some()
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

struct Checker(Option<CouplingError>);

impl Checker {
    fn check(&mut self, ok: bool, field: &str, msg: impl FnOnce() -> String) {
        if self.0.is_none() && !ok {
            self.0 = Some(CouplingError::config(field, msg()));
        }
    }

    fn nonneg(&mut self, field: &str, v: f64) {
        self.check(v.is_finite() && v >= 0.0, field, || "must be ≥ 0".into());
    }

    fn positive(&mut self, field: &str, v: f64) {
        self.check(v.is_finite() && v > 0.0, field, || "must be > 0".into());
    }

    fn at_least(&mut self, field: &str, v: usize, min: usize) {
        self.check(v >= min, field, || format!("must be ≥ {min}"));
    }
}

/// Check every invariant and return the (already default-filled) config.
pub fn validate_config(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    let mut c = Checker(None);
    c.check(cfg.schema_version == SCHEMA_VERSION, "schema_version", || {
        format!("must be {SCHEMA_VERSION}")
    });

    let d = &cfg.data;
    c.at_least("data.seq_len", d.seq_len, 1);
    c.at_least("data.vocab_size", d.vocab_size, 2);
    c.check((0.0..=1.0).contains(&d.threshold), "data.threshold", || {
        "must lie in [0, 1]".into()
    });
    match d.source {
        DataSource::Mnist => {
            c.check(d.seq_len == 784 && d.vocab_size == 2, "data.seq_len", || {
                "must be 784 with vocab_size 2 for MNIST".into()
            });
            c.check(d.image_side == Some(28), "data.image_side", || "must be 28 for MNIST".into());
            c.check(d.num_classes == 0 || d.num_classes == 10, "data.num_classes", || {
                "must be 0 or 10 for MNIST".into()
            });
        }
        DataSource::PerfectPair => {
            c.check(d.seq_len == 2 && d.vocab_size == 2, "data.seq_len", || {
                "perfect pair requires seq_len 2 and vocab_size 2".into()
            });
            c.at_least("data.num_examples", d.num_examples, 1);
        }
        DataSource::Motif => {
            c.at_least("data.motif_count", d.motif_count, 1);
            c.at_least("data.num_examples", d.num_examples, 1);
            c.check(
                d.motif_weights.is_empty() || d.motif_weights.len() == d.motif_count,
                "data.motif_weights",
                || "must be empty or have motif_count entries".into(),
            );
            c.check(
                d.motif_weights.iter().all(|w| w.is_finite() && *w >= 0.0)
                    && (d.motif_weights.is_empty() || d.motif_weights.iter().sum::<f64>() > 0.0),
                "data.motif_weights",
                || "must be nonnegative with positive sum".into(),
            );
        }
        DataSource::Sequences => {
            c.check(d.path.is_some(), "data.path", || "is required for the sequences source".into());
        }
    }
    if let Some(side) = d.image_side {
        c.check(side * side == d.seq_len, "data.image_side", || {
            "squared must equal seq_len".into()
        });
    }

    let m = &cfg.model;
    c.at_least("model.latent_positions", m.latent_positions, 1);
    c.at_least("model.latent_channels", m.latent_channels, 1);
    c.check(m.latent_dim() >= 2, "model.latent_channels", || {
        "latent dimension (positions x channels) must be ≥ 2".into()
    });
    for (name, net) in [("model.encoder", &m.encoder), ("model.generator", &m.generator)] {
        check_net(&mut c, name, net, d.seq_len);
    }
    c.check(m.generator.arch != Arch::Conv, "model.generator.arch", || {
        "must be mlp or transformer".into()
    });
    if m.encoder.arch == Arch::Conv {
        let ok = d
            .image_side
            .is_some_and(|s| s % 4 == 0 && (s / 4) * (s / 4) == m.latent_positions);
        c.check(ok, "model.encoder.arch", || {
            "conv requires image data with latent_positions = (image_side / 4)^2".into()
        });
    }

    let a = &cfg.stage_a;
    c.nonneg("stage_a.lambda_rec", a.lambda_rec);
    c.nonneg("stage_a.lambda_kl", a.lambda_kl);
    c.nonneg("stage_a.lambda_flow", a.lambda_flow);
    c.positive("stage_a.latent_noise_std", a.latent_noise_std);
    c.at_least("stage_a.batch_size", a.batch_size, 1);
    c.positive("stage_a.learning_rate", a.learning_rate);
    c.nonneg("stage_a.weight_decay", a.weight_decay);
    if let Some(g) = a.grad_clip {
        c.positive("stage_a.grad_clip", g);
    }
    if let Some(an) = &a.flow_anneal {
        c.nonneg("stage_a.flow_anneal.start", an.start);
    }

    let b = &cfg.stage_b;
    c.at_least("stage_b.batch_size", b.batch_size, 1);
    c.positive("stage_b.learning_rate", b.learning_rate);
    c.nonneg("stage_b.weight_decay", b.weight_decay);
    c.positive("stage_b.z_scale", b.z_scale);
    c.positive("stage_b.temperature", b.temperature);
    if let Some(g) = b.grad_clip {
        c.positive("stage_b.grad_clip", g);
    }
    if let Some(e) = b.ema_decay {
        c.check((0.0..1.0).contains(&e), "stage_b.ema_decay", || "must lie in [0, 1)".into());
    }

    let f = &cfg.flow;
    c.at_least("flow.num_blocks", f.num_blocks, 1);
    c.at_least("flow.hidden_width", f.hidden_width, 1);
    c.at_least("flow.num_layers_per_block", f.num_layers_per_block, 1);
    c.positive("flow.clamp", f.clamp);
    if f.subnet == Subnet::Attention {
        c.check(
            m.latent_channels >= 2 && m.latent_positions >= 2,
            "flow.subnet",
            || "attention subnets need at least 2 positions and 2 channels".into(),
        );
        c.check(f.heads >= 1 && f.hidden_width.is_multiple_of(f.heads.max(1)), "flow.heads", || {
            "must divide flow.hidden_width".into()
        });
    }

    let md = &cfg.mdm;
    c.at_least("mdm.steps", md.steps, 1);
    c.check(!md.temperatures.is_empty(), "mdm.temperatures", || "must not be empty".into());
    c.check(
        md.temperatures.len() == 1 || md.temperatures.len() == md.steps,
        "mdm.temperatures",
        || "must have one entry or one per step".into(),
    );
    c.check(
        md.temperatures.iter().all(|t| t.is_finite() && *t > 0.0),
        "mdm.temperatures",
        || "must be > 0".into(),
    );
    c.nonneg("mdm.remask_strength", md.remask_strength);
    c.check(md.t_min > 0.0 && md.t_min < 1.0, "mdm.t_min", || "must lie in (0, 1)".into());
    c.at_least("mdm.batch_size", md.batch_size, 1);
    c.positive("mdm.learning_rate", md.learning_rate);
    c.nonneg("mdm.weight_decay", md.weight_decay);
    check_net(&mut c, "mdm.denoiser", &md.denoiser, d.seq_len);
    c.check(md.denoiser.arch != Arch::Conv, "mdm.denoiser.arch", || {
        "must be mlp or transformer".into()
    });

    let g = &cfg.guidance;
    c.check(g.cfg_scale.is_finite(), "guidance.cfg_scale", || "must be finite".into());
    c.nonneg("guidance.step_size", g.step_size);
    c.positive("guidance.relaxation_temperature", g.relaxation_temperature);
    c.nonneg("guidance.lambda_reward", g.lambda_reward);
    c.nonneg("guidance.lambda_anchor", g.lambda_anchor);
    c.check(
        (0.0..1.0).contains(&g.cond_dropout_rate),
        "guidance.cond_dropout_rate",
        || "must lie in [0, 1)".into(),
    );
    c.positive("guidance.finetune_learning_rate", g.finetune_learning_rate);
    c.at_least("guidance.finetune_batch_size", g.finetune_batch_size, 1);

    c.at_least("eval.num_samples", cfg.eval.num_samples, 1);
    c.at_least("eval.quadrature_points", cfg.eval.quadrature_points, 3);

    match c.0 {
        Some(e) => Err(e),
        None => Ok(cfg),
    }
}

fn check_net(c: &mut Checker, name: &str, net: &NetConfig, seq_len: usize) {
    c.at_least(&format!("{name}.width"), net.width, 1);
    if net.arch == Arch::Transformer {
        c.at_least(&format!("{name}.depth"), net.depth, 1);
        c.check(
            net.heads >= 1 && net.width.is_multiple_of(net.heads.max(1)),
            &format!("{name}.heads"),
            || "must divide width".into(),
        );
    }
    if let Some(t) = net.tokens {
        c.check(t >= 1 && seq_len.is_multiple_of(t.max(1)), &format!("{name}.tokens"), || {
            "must divide data.seq_len".into()
        });
    }
}
