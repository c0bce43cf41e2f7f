//! Architecture configuration: presets, validation, the flat `key = value`
//! file format, and closed-form parameter accounting.
//!
//! Expert counts per token (`k_attn`, `k_ffn`) include the always-active
//! fixed experts, so a sublayer with `k = 16` and one fixed expert routes 15
//! tokens-worth of experts through its top-k router.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UmoeError};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} `{}`", stringify!($name), other)),
                }
            }
        }
    };
}

string_enum!(AttnVariant {
    DenseVanilla => "dense_vanilla",
    UmoeAttPremix => "umoe_att_premix",
    UmoeAttPostmix => "umoe_att_postmix",
});

string_enum!(FfnVariant {
    Dense => "dense",
    FfnMoe => "ffn_moe",
});

string_enum!(Activation {
    Gelu => "gelu",
    Relu => "relu",
    None => "none",
});

string_enum!(LrSchedule {
    Constant => "constant",
    Cosine => "cosine",
});

string_enum!(Preset {
    BaseDense => "base_dense",
    BaseFfnMoe => "base_ffn_moe",
    BaseUmoeAtt => "base_umoe_att",
    BaseUmoe => "base_umoe",
    LargeDense => "large_dense",
    LargeFfnMoe => "large_ffn_moe",
    LargeUmoeAtt => "large_umoe_att",
    LargeUmoe => "large_umoe",
    TinyTest => "tiny_test",
});

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::BaseDense,
        Preset::BaseFfnMoe,
        Preset::BaseUmoeAtt,
        Preset::BaseUmoe,
        Preset::LargeDense,
        Preset::LargeFfnMoe,
        Preset::LargeUmoeAtt,
        Preset::LargeUmoe,
        Preset::TinyTest,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    /// Heads of the dense attention; unused by the MoE attention variants.
    pub n_heads: usize,
    /// Per-head key width for dense attention, shared key width for MoE attention.
    pub key_dim: usize,
    /// Per-head value width for dense attention, expert intermediate size for MoE.
    pub value_dim: usize,
    pub ffn_dim: usize,
    pub context_len: usize,
    pub attn_variant: AttnVariant,
    pub ffn_variant: FfnVariant,
    pub n_experts: usize,
    /// Per-sublayer expert-count overrides; 0 inherits `n_experts`.
    pub n_experts_attn: usize,
    pub n_experts_ffn: usize,
    /// Experts active per token in each sublayer, fixed experts included.
    pub k_attn: usize,
    pub k_ffn: usize,
    pub lora_rank: usize,
    pub share_experts_across_sublayers: bool,
    pub share_router: bool,
    pub share_fixed_expert: bool,
    pub n_fixed_experts: usize,
    pub expert_activation: Activation,
    pub renormalize_gates: bool,
    pub balance_loss_coeff: f64,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_ratio: f64,
    pub batch_size: usize,
}

/// A config that passed [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedConfig(ModelConfig);

impl ValidatedConfig {
    pub fn into_inner(self) -> ModelConfig {
        self.0
    }
}

impl std::ops::Deref for ValidatedConfig {
    type Target = ModelConfig;
    fn deref(&self) -> &ModelConfig {
        &self.0
    }
}

impl ModelConfig {
    pub fn attn_is_moe(&self) -> bool {
        self.attn_variant != AttnVariant::DenseVanilla
    }

    pub fn ffn_is_moe(&self) -> bool {
        self.ffn_variant == FfnVariant::FfnMoe
    }

    /// Routed experts in the attention bank (0 for dense attention).
    pub fn attn_experts(&self) -> usize {
        match (self.attn_is_moe(), self.n_experts_attn) {
            (false, _) => 0,
            (true, 0) => self.n_experts,
            (true, n) => n,
        }
    }

    /// Routed experts available to the FFN sublayer (0 for a dense FFN).
    pub fn ffn_experts(&self) -> usize {
        match (self.ffn_is_moe(), self.n_experts_ffn) {
            (false, _) => 0,
            (true, 0) => self.n_experts,
            (true, n) => n,
        }
    }

    pub fn attn_fixed(&self) -> usize {
        if self.attn_is_moe() {
            self.n_fixed_experts
        } else {
            0
        }
    }

    pub fn ffn_fixed(&self) -> usize {
        if self.ffn_is_moe() {
            self.n_fixed_experts
        } else {
            0
        }
    }

    /// Top-k used by the attention router.
    pub fn attn_routed_k(&self) -> usize {
        self.k_attn.saturating_sub(self.attn_fixed())
    }

    pub fn ffn_routed_k(&self) -> usize {
        self.k_ffn.saturating_sub(self.ffn_fixed())
    }

    pub fn both_moe(&self) -> bool {
        self.attn_is_moe() && self.ffn_is_moe()
    }

    pub fn shares_experts(&self) -> bool {
        self.both_moe() && self.share_experts_across_sublayers
    }

    pub fn shares_router(&self) -> bool {
        self.both_moe() && self.share_router
    }

    pub fn shares_fixed(&self) -> bool {
        self.both_moe() && self.share_fixed_expert
    }

    pub fn validate(&self) -> Result<ValidatedConfig> {
        validate(self.clone())
    }
}

fn invalid(msg: impl Into<String>) -> UmoeError {
    UmoeError::InvalidConfig(msg.into())
}

/// Checks every structural invariant; the error names the first violation.
pub fn validate(cfg: ModelConfig) -> Result<ValidatedConfig> {
    if cfg.vocab_size == 0 {
        return Err(invalid("vocab_size must be positive"));
    }
    if cfg.hidden_dim == 0 {
        return Err(invalid("hidden_dim must be positive"));
    }
    if cfg.n_heads == 0 {
        return Err(invalid("n_heads must be positive"));
    }
    if cfg.key_dim == 0 {
        return Err(invalid("key_dim must be positive"));
    }
    if !cfg.key_dim.is_multiple_of(2) {
        return Err(invalid("key_dim must be even for rotary embedding"));
    }
    if cfg.value_dim == 0 {
        return Err(invalid("value_dim must be positive"));
    }
    if cfg.context_len == 0 {
        return Err(invalid("context_len must be positive"));
    }
    if cfg.ffn_variant == FfnVariant::Dense && cfg.ffn_dim == 0 {
        return Err(invalid("ffn_dim must be positive for a dense FFN"));
    }
    if cfg.k_attn > cfg.attn_experts() || cfg.k_ffn > cfg.ffn_experts() {
        return Err(invalid("k exceeds N"));
    }
    if cfg.attn_is_moe() {
        if cfg.attn_experts() == 0 {
            return Err(invalid("MoE attention needs at least one expert"));
        }
        if cfg.k_attn < cfg.n_fixed_experts {
            return Err(invalid("k_attn is below the fixed expert count"));
        }
        if cfg.k_attn == 0 {
            return Err(invalid("MoE attention needs at least one active expert"));
        }
    }
    if cfg.ffn_is_moe() {
        if cfg.ffn_experts() == 0 {
            return Err(invalid("MoE FFN needs at least one expert"));
        }
        if cfg.k_ffn < cfg.n_fixed_experts {
            return Err(invalid("k_ffn is below the fixed expert count"));
        }
    }
    if cfg.attn_variant == AttnVariant::UmoeAttPremix && cfg.attn_experts() > 1 && cfg.lora_rank == 0 {
        return Err(invalid(
            "lora_rank must be at least 1 for pre-mixing attention with N > 1",
        ));
    }
    let any_share = cfg.share_experts_across_sublayers || cfg.share_router || cfg.share_fixed_expert;
    if any_share && !cfg.both_moe() {
        return Err(invalid("sharing flags require MoE attention and MoE FFN"));
    }
    if (cfg.share_experts_across_sublayers || cfg.share_router) && cfg.attn_experts() != cfg.ffn_experts() {
        return Err(invalid(
            "shared experts or router need equal expert counts in both sublayers",
        ));
    }
    if !(cfg.balance_loss_coeff.is_finite() && cfg.balance_loss_coeff >= 0.0) {
        return Err(invalid("balance_loss_coeff must be a finite non-negative number"));
    }
    if !(cfg.rope_base.is_finite() && cfg.rope_base > 0.0) {
        return Err(invalid("rope_base must be positive"));
    }
    if !(cfg.norm_eps.is_finite() && cfg.norm_eps > 0.0) {
        return Err(invalid("norm_eps must be positive"));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(invalid("learning_rate must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.adam_beta1) || !(0.0..1.0).contains(&cfg.adam_beta2) {
        return Err(invalid("adam betas must lie in [0, 1)"));
    }
    if !(cfg.adam_eps.is_finite() && cfg.adam_eps > 0.0) {
        return Err(invalid("adam_eps must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.warmup_ratio) {
        return Err(invalid("warmup_ratio must lie in [0, 1]"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    Ok(ValidatedConfig(cfg))
}

// ---------------------------------------------------------------------------
// Presets

fn base_common() -> ModelConfig {
    ModelConfig {
        vocab_size: 32000,
        n_layers: 12,
        hidden_dim: 768,
        n_heads: 4,
        key_dim: 192,
        value_dim: 192,
        ffn_dim: 3072,
        context_len: 1024,
        attn_variant: AttnVariant::DenseVanilla,
        ffn_variant: FfnVariant::Dense,
        n_experts: 0,
        n_experts_attn: 0,
        n_experts_ffn: 0,
        k_attn: 0,
        k_ffn: 0,
        lora_rank: 0,
        share_experts_across_sublayers: false,
        share_router: false,
        share_fixed_expert: false,
        n_fixed_experts: 0,
        expert_activation: Activation::Gelu,
        renormalize_gates: false,
        balance_loss_coeff: 0.01,
        rope_base: 10000.0,
        norm_eps: 1e-6,
        learning_rate: 4e-4,
        adam_beta1: 0.9,
        adam_beta2: 0.95,
        adam_eps: 1e-8,
        lr_schedule: LrSchedule::Cosine,
        warmup_ratio: 0.05,
        batch_size: 1024,
    }
}

fn large_common() -> ModelConfig {
    ModelConfig {
        n_layers: 24,
        hidden_dim: 2048,
        key_dim: 512,
        value_dim: 512,
        ffn_dim: 5632,
        ..base_common()
    }
}

pub fn preset(name: Preset) -> ModelConfig {
    match name {
        Preset::BaseDense => base_common(),
        Preset::BaseFfnMoe => ModelConfig {
            ffn_variant: FfnVariant::FfnMoe,
            n_experts: 128,
            k_ffn: 16,
            n_fixed_experts: 1,
            ..base_common()
        },
        Preset::BaseUmoeAtt => ModelConfig {
            attn_variant: AttnVariant::UmoeAttPremix,
            n_experts: 116,
            k_attn: 4,
            lora_rank: 16,
            n_fixed_experts: 1,
            ..base_common()
        },
        Preset::BaseUmoe => ModelConfig {
            attn_variant: AttnVariant::UmoeAttPremix,
            ffn_variant: FfnVariant::FfnMoe,
            context_len: 768,
            n_experts: 128,
            k_attn: 4,
            k_ffn: 16,
            lora_rank: 16,
            share_experts_across_sublayers: true,
            n_fixed_experts: 1,
            ..base_common()
        },
        Preset::LargeDense => large_common(),
        Preset::LargeFfnMoe => ModelConfig {
            ffn_variant: FfnVariant::FfnMoe,
            n_experts: 64,
            k_ffn: 11,
            n_fixed_experts: 1,
            ..large_common()
        },
        Preset::LargeUmoeAtt => ModelConfig {
            attn_variant: AttnVariant::UmoeAttPremix,
            n_experts: 57,
            k_attn: 4,
            lora_rank: 36,
            n_fixed_experts: 1,
            ..large_common()
        },
        Preset::LargeUmoe => ModelConfig {
            attn_variant: AttnVariant::UmoeAttPremix,
            ffn_variant: FfnVariant::FfnMoe,
            n_experts: 64,
            k_attn: 4,
            k_ffn: 11,
            lora_rank: 36,
            share_experts_across_sublayers: true,
            n_fixed_experts: 1,
            ..large_common()
        },
        Preset::TinyTest => ModelConfig {
            vocab_size: 256,
            n_layers: 2,
            hidden_dim: 32,
            n_heads: 4,
            key_dim: 8,
            value_dim: 16,
            ffn_dim: 64,
            context_len: 64,
            attn_variant: AttnVariant::UmoeAttPremix,
            ffn_variant: FfnVariant::FfnMoe,
            n_experts: 8,
            n_experts_attn: 0,
            n_experts_ffn: 0,
            k_attn: 2,
            k_ffn: 2,
            lora_rank: 4,
            share_experts_across_sublayers: true,
            share_router: false,
            share_fixed_expert: false,
            n_fixed_experts: 1,
            expert_activation: Activation::Gelu,
            renormalize_gates: false,
            balance_loss_coeff: 0.01,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            lr_schedule: LrSchedule::Constant,
            warmup_ratio: 0.0,
            batch_size: 8,
        },
    }
}

pub fn preset_by_name(name: &str) -> Result<ModelConfig> {
    name.parse::<Preset>()
        .map(preset)
        .map_err(|_| UmoeError::UnknownPreset(name.to_string()))
}

// ---------------------------------------------------------------------------
// Parameter accounting

/// Which accounting bucket a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamCategory {
    Embeddings,
    AttentionShared,
    DenseFfn,
    ExpertBank,
    FixedExperts,
    Lora,
    Routers,
    LayerNorms,
    FinalNorm,
    LmHead,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embeddings: u64,
    pub attention_shared: u64,
    pub dense_ffn: u64,
    pub expert_bank: u64,
    pub fixed_experts: u64,
    pub lora: u64,
    pub routers: u64,
    pub layer_norms: u64,
    pub final_norm: u64,
    pub lm_head: u64,
    pub total: u64,
}

impl ParamCount {
    pub fn get(&self, cat: ParamCategory) -> u64 {
        match cat {
            ParamCategory::Embeddings => self.embeddings,
            ParamCategory::AttentionShared => self.attention_shared,
            ParamCategory::DenseFfn => self.dense_ffn,
            ParamCategory::ExpertBank => self.expert_bank,
            ParamCategory::FixedExperts => self.fixed_experts,
            ParamCategory::Lora => self.lora,
            ParamCategory::Routers => self.routers,
            ParamCategory::LayerNorms => self.layer_norms,
            ParamCategory::FinalNorm => self.final_norm,
            ParamCategory::LmHead => self.lm_head,
        }
    }

    pub fn sum_of_categories(&self) -> u64 {
        self.embeddings
            + self.attention_shared
            + self.dense_ffn
            + self.expert_bank
            + self.fixed_experts
            + self.lora
            + self.routers
            + self.layer_norms
            + self.final_norm
            + self.lm_head
    }
}

/// Exact parameter count (no biases, untied embedding and LM head).
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let d = cfg.hidden_dim as u64;
    let dk = cfg.key_dim as u64;
    let dv = cfg.value_dim as u64;
    let layers = cfg.n_layers as u64;
    let expert = 2 * d * dv;

    let mut per_layer = ParamCount {
        layer_norms: 2 * d,
        ..Default::default()
    };
    if cfg.attn_is_moe() {
        let n = cfg.attn_experts() as u64;
        let r = cfg.lora_rank as u64;
        per_layer.attention_shared += 2 * d * dk;
        per_layer.expert_bank += n * expert;
        per_layer.lora += n * (d * r + r * dk);
        per_layer.routers += n * d;
        per_layer.fixed_experts += cfg.attn_fixed() as u64 * expert;
    } else {
        let h = cfg.n_heads as u64;
        per_layer.attention_shared += 2 * d * h * dk + 2 * d * h * dv;
    }
    if cfg.ffn_is_moe() {
        let n = cfg.ffn_experts() as u64;
        if !cfg.shares_experts() {
            per_layer.expert_bank += n * expert;
        }
        if !cfg.shares_router() {
            per_layer.routers += n * d;
        }
        if !cfg.shares_fixed() {
            per_layer.fixed_experts += cfg.ffn_fixed() as u64 * expert;
        }
    } else {
        per_layer.dense_ffn += 2 * d * cfg.ffn_dim as u64;
    }

    let v = cfg.vocab_size as u64;
    let mut out = ParamCount {
        embeddings: v * d,
        attention_shared: per_layer.attention_shared * layers,
        dense_ffn: per_layer.dense_ffn * layers,
        expert_bank: per_layer.expert_bank * layers,
        fixed_experts: per_layer.fixed_experts * layers,
        lora: per_layer.lora * layers,
        routers: per_layer.routers * layers,
        layer_norms: per_layer.layer_norms * layers,
        final_norm: d,
        lm_head: d * v,
        total: 0,
    };
    out.total = out.sum_of_categories();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Flat `key = value` file format

impl ModelConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("key_dim", self.key_dim.to_string()),
            ("value_dim", self.value_dim.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("context_len", self.context_len.to_string()),
            ("attn_variant", self.attn_variant.to_string()),
            ("ffn_variant", self.ffn_variant.to_string()),
            ("n_experts", self.n_experts.to_string()),
            ("n_experts_attn", self.n_experts_attn.to_string()),
            ("n_experts_ffn", self.n_experts_ffn.to_string()),
            ("k_attn", self.k_attn.to_string()),
            ("k_ffn", self.k_ffn.to_string()),
            ("lora_rank", self.lora_rank.to_string()),
            (
                "share_experts_across_sublayers",
                self.share_experts_across_sublayers.to_string(),
            ),
            ("share_router", self.share_router.to_string()),
            ("share_fixed_expert", self.share_fixed_expert.to_string()),
            ("n_fixed_experts", self.n_fixed_experts.to_string()),
            ("expert_activation", self.expert_activation.to_string()),
            ("renormalize_gates", self.renormalize_gates.to_string()),
            ("balance_loss_coeff", self.balance_loss_coeff.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("norm_eps", self.norm_eps.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("lr_schedule", self.lr_schedule.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("batch_size", self.batch_size.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 32] = [
        "vocab_size",
        "n_layers",
        "hidden_dim",
        "n_heads",
        "key_dim",
        "value_dim",
        "ffn_dim",
        "context_len",
        "attn_variant",
        "ffn_variant",
        "n_experts",
        "n_experts_attn",
        "n_experts_ffn",
        "k_attn",
        "k_ffn",
        "lora_rank",
        "share_experts_across_sublayers",
        "share_router",
        "share_fixed_expert",
        "n_fixed_experts",
        "expert_activation",
        "renormalize_gates",
        "balance_loss_coeff",
        "rope_base",
        "norm_eps",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "lr_schedule",
        "warmup_ratio",
        "batch_size",
    ];

    fn set_field(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse::<T>().map_err(|_| format!("cannot parse `{v}`"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(format!("expected true or false, got `{other}`")),
            }
        }
        match key {
            "vocab_size" => self.vocab_size = num(value)?,
            "n_layers" => self.n_layers = num(value)?,
            "hidden_dim" => self.hidden_dim = num(value)?,
            "n_heads" => self.n_heads = num(value)?,
            "key_dim" => self.key_dim = num(value)?,
            "value_dim" => self.value_dim = num(value)?,
            "ffn_dim" => self.ffn_dim = num(value)?,
            "context_len" => self.context_len = num(value)?,
            "attn_variant" => self.attn_variant = value.parse()?,
            "ffn_variant" => self.ffn_variant = value.parse()?,
            "n_experts" => self.n_experts = num(value)?,
            "n_experts_attn" => self.n_experts_attn = num(value)?,
            "n_experts_ffn" => self.n_experts_ffn = num(value)?,
            "k_attn" => self.k_attn = num(value)?,
            "k_ffn" => self.k_ffn = num(value)?,
            "lora_rank" => self.lora_rank = num(value)?,
            "share_experts_across_sublayers" => self.share_experts_across_sublayers = flag(value)?,
            "share_router" => self.share_router = flag(value)?,
            "share_fixed_expert" => self.share_fixed_expert = flag(value)?,
            "n_fixed_experts" => self.n_fixed_experts = num(value)?,
            "expert_activation" => self.expert_activation = value.parse()?,
            "renormalize_gates" => self.renormalize_gates = flag(value)?,
            "balance_loss_coeff" => self.balance_loss_coeff = num(value)?,
            "rope_base" => self.rope_base = num(value)?,
            "norm_eps" => self.norm_eps = num(value)?,
            "learning_rate" => self.learning_rate = num(value)?,
            "adam_beta1" => self.adam_beta1 = num(value)?,
            "adam_beta2" => self.adam_beta2 = num(value)?,
            "adam_eps" => self.adam_eps = num(value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "warmup_ratio" => self.warmup_ratio = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Serializes every field, one `key = value` line each.
    pub fn to_config_string(&self) -> String {
        let mut out = String::from("# umoe model configuration\n");
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses the flat config format.
    ///
    /// Every key must appear exactly once, unless the file starts from a
    /// `preset = <name>` line, in which case listed keys override the preset.
    /// Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| UmoeError::ConfigParse {
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.insert(key.clone(), line_no).is_some() {
                return Err(UmoeError::ConfigParse {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
            pairs.push((line_no, key, value));
        }

        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((line, _, name)) => preset_by_name(name).map_err(|_| UmoeError::ConfigParse {
                line: *line,
                message: format!("unknown preset `{name}`"),
            })?,
            None => {
                if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains_key(**k)) {
                    return Err(UmoeError::ConfigParse {
                        line: 0,
                        message: format!("missing key `{missing}`"),
                    });
                }
                preset(Preset::TinyTest)
            }
        };
        for (line, key, value) in &pairs {
            if key == "preset" {
                continue;
            }
            cfg.set_field(key, value)
                .map_err(|message| UmoeError::ConfigParse { line: *line, message })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelConfig> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_config_string())?;
        Ok(())
    }
}

/// Resolves a CLI `--config` argument: a preset name or a config file path.
pub fn resolve_config(name_or_path: &str) -> Result<ModelConfig> {
    if let Ok(p) = name_or_path.parse::<Preset>() {
        return Ok(preset(p));
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return ModelConfig::load(path);
    }
    Err(UmoeError::UnknownPreset(name_or_path.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within(actual: u64, target: f64, tol: f64) -> bool {
        ((actual as f64 - target) / target).abs() <= tol
    }

    #[test]
    fn all_presets_validate() {
        for p in Preset::ALL {
            preset(p).validate().unwrap_or_else(|e| panic!("{p}: {e}"));
        }
    }

    #[test]
    fn base_umoe_preset_dimensions() {
        let c = preset(Preset::BaseUmoe);
        assert_eq!(c.hidden_dim, 768);
        assert_eq!(c.value_dim, 192);
        assert_eq!(c.n_experts, 128);
        assert_eq!((c.k_ffn, c.k_attn), (16, 4));
        assert_eq!(c.lora_rank, 16);
        assert_eq!(c.context_len, 768);
        assert_eq!(c.n_layers, 12);
    }

    #[test]
    fn large_umoe_preset_dimensions() {
        let c = preset(Preset::LargeUmoe);
        assert_eq!(c.hidden_dim, 2048);
        assert_eq!(c.value_dim, 512);
        assert_eq!(c.n_experts, 64);
        assert_eq!((c.k_ffn, c.k_attn), (11, 4));
        assert_eq!(c.lora_rank, 36);
        assert_eq!(c.n_layers, 24);
    }

    #[test]
    fn tiny_test_fixture() {
        let c = preset(Preset::TinyTest);
        assert_eq!(
            (
                c.hidden_dim,
                c.n_layers,
                c.n_experts,
                c.k_attn,
                c.k_ffn,
                c.lora_rank,
                c.vocab_size
            ),
            (32, 2, 8, 2, 2, 4, 256)
        );
    }

    #[test]
    fn k_above_n_is_rejected() {
        let cfg = ModelConfig {
            n_experts: 4,
            k_attn: 5,
            ..preset(Preset::TinyTest)
        };
        match cfg.validate() {
            Err(UmoeError::InvalidConfig(msg)) => assert_eq!(msg, "k exceeds N"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_lora_rank_with_premix_is_rejected() {
        let cfg = ModelConfig {
            lora_rank: 0,
            ..preset(Preset::TinyTest)
        };
        assert!(matches!(cfg.validate(), Err(UmoeError::InvalidConfig(_))));
    }

    #[test]
    fn sharing_requires_two_moe_sublayers() {
        let cfg = ModelConfig {
            share_router: true,
            ..preset(Preset::BaseUmoeAtt)
        };
        assert!(matches!(cfg.validate(), Err(UmoeError::InvalidConfig(_))));
    }

    #[test]
    fn zero_vocab_is_rejected() {
        let cfg = ModelConfig {
            vocab_size: 0,
            ..preset(Preset::TinyTest)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn degenerate_config_counts_embedding_and_head_only() {
        let cfg = ModelConfig {
            vocab_size: 1,
            n_layers: 0,
            ..preset(Preset::TinyTest)
        };
        let c = count_params(&cfg).unwrap();
        let d = cfg.hidden_dim as u64;
        assert_eq!(c.embeddings + c.lm_head, 2 * d);
        assert_eq!(c.final_norm, d);
        assert_eq!(c.total, 3 * d);
        assert_eq!(c.expert_bank + c.lora + c.routers + c.attention_shared, 0);
    }

    #[test]
    fn preset_totals_within_two_percent() {
        let cases = [
            (Preset::BaseDense, 134e6),
            (Preset::BaseFfnMoe, 535e6),
            (Preset::BaseUmoeAtt, 547e6),
            (Preset::BaseUmoe, 540e6),
            (Preset::LargeDense, 1.1e9),
            (Preset::LargeFfnMoe, 3.8e9),
            (Preset::LargeUmoeAtt, 3.8e9),
            (Preset::LargeUmoe, 3.6e9),
        ];
        for (p, target) in cases {
            let c = count_params(&preset(p)).unwrap();
            assert!(within(c.total, target, 0.02), "{p}: {} vs {target}", c.total);
        }
    }

    #[test]
    fn doubling_layers_doubles_per_layer_categories() {
        for p in Preset::ALL {
            let cfg = preset(p);
            let double = ModelConfig {
                n_layers: cfg.n_layers * 2,
                ..cfg.clone()
            };
            let a = count_params(&cfg).unwrap();
            let b = count_params(&double).unwrap();
            assert_eq!(b.attention_shared, 2 * a.attention_shared);
            assert_eq!(b.dense_ffn, 2 * a.dense_ffn);
            assert_eq!(b.expert_bank, 2 * a.expert_bank);
            assert_eq!(b.fixed_experts, 2 * a.fixed_experts);
            assert_eq!(b.lora, 2 * a.lora);
            assert_eq!(b.routers, 2 * a.routers);
            assert_eq!(b.layer_norms, 2 * a.layer_norms);
            assert_eq!(b.embeddings, a.embeddings);
            assert_eq!(b.lm_head, a.lm_head);
        }
    }

    #[test]
    fn shared_experts_are_counted_once_per_layer() {
        let shared = preset(Preset::BaseUmoe);
        let unshared = ModelConfig {
            share_experts_across_sublayers: false,
            ..shared.clone()
        };
        let a = count_params(&shared).unwrap();
        let b = count_params(&unshared).unwrap();
        let bank = 128 * 2 * 768 * 192 * 12;
        assert_eq!(a.expert_bank, bank);
        assert_eq!(b.expert_bank, 2 * bank);
    }

    #[test]
    fn sharing_strategies_shift_totals_like_the_ablation() {
        // Sharing the fixed expert removes one expert per layer; sharing the router one router.
        let base = count_params(&preset(Preset::BaseUmoe)).unwrap().total;
        let fixed = count_params(&ModelConfig {
            share_fixed_expert: true,
            ..preset(Preset::BaseUmoe)
        })
        .unwrap()
        .total;
        let router = count_params(&ModelConfig {
            share_router: true,
            ..preset(Preset::BaseUmoe)
        })
        .unwrap()
        .total;
        assert_eq!(base - fixed, 12 * 2 * 768 * 192);
        assert_eq!(base - router, 12 * 128 * 768);
    }

    #[test]
    fn config_text_round_trips() {
        for p in Preset::ALL {
            let cfg = preset(p);
            let text = cfg.to_config_string();
            assert_eq!(ModelConfig::parse(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let text = format!("{}bogus = 1\n", preset(Preset::TinyTest).to_config_string());
        assert!(matches!(ModelConfig::parse(&text), Err(UmoeError::ConfigParse { .. })));
    }

    #[test]
    fn missing_key_without_preset_is_an_error() {
        assert!(ModelConfig::parse("vocab_size = 10\n").is_err());
    }

    #[test]
    fn preset_line_allows_overrides() {
        let cfg = ModelConfig::parse("preset = tiny_test # start here\nn_layers = 3\n").unwrap();
        assert_eq!(cfg.n_layers, 3);
        assert_eq!(cfg.hidden_dim, 32);
    }

    #[test]
    fn unknown_preset_name() {
        assert!(matches!(preset_by_name("huge"), Err(UmoeError::UnknownPreset(_))));
    }
}
