//! Model configuration: expert-spec parsing, validation, ablation toggles,
//! shipped presets and the analytic parameter count.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, PeMode};
use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::rope::DEFAULT_ROPE_BASE;

/// Which 0-based block indices carry MoE layers when interleaving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MoeParity {
    #[default]
    Even,
    Odd,
}

/// `(shared, routed, activated)` parsed from `S{N_s}E{N_r}A{K_r}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertSpec {
    pub shared: usize,
    pub routed: usize,
    pub active: usize,
}

impl fmt::Display for ExpertSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}E{}A{}", self.shared, self.routed, self.active)
    }
}

impl FromStr for ExpertSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_expert_spec(s)
    }
}

pub fn parse_expert_spec(spec: &str) -> Result<ExpertSpec> {
    let bad = |reason: &str| Error::ExpertSpec {
        spec: spec.to_string(),
        reason: reason.to_string(),
    };
    let mut fields = [0usize; 3];
    let mut rest = spec;
    for (slot, tag) in fields.iter_mut().zip(['S', 'E', 'A']) {
        rest = rest
            .strip_prefix(tag)
            .ok_or_else(|| bad(&format!("expected '{tag}'")))?;
        let digits = rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits == 0 {
            return Err(bad(&format!("missing count after '{tag}'")));
        }
        *slot = rest[..digits]
            .parse()
            .map_err(|_| bad(&format!("count after '{tag}' out of range")))?;
        rest = &rest[digits..];
    }
    if !rest.is_empty() {
        return Err(bad("trailing characters"));
    }
    let [shared, routed, active] = fields;
    if routed == 0 {
        return Err(bad("no routed experts"));
    }
    if active == 0 {
        return Err(bad("no activated experts"));
    }
    if active > routed {
        return Err(bad(&format!(
            "activated experts A{active} exceed routed experts E{routed}"
        )));
    }
    Ok(ExpertSpec {
        shared,
        routed,
        active,
    })
}

fn default_true() -> bool {
    true
}

fn default_freq_dim() -> usize {
    256
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

/// Full architecture description. Field names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub blocks: usize,
    pub hidden: usize,
    /// Routed/shared expert intermediate width.
    pub intermediate: usize,
    /// Dense-block FFN width; defaults to `intermediate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_intermediate: Option<usize>,
    pub heads: usize,
    pub expert_spec: String,
    #[serde(default = "default_true")]
    pub interleave: bool,
    #[serde(default)]
    pub moe_parity: MoeParity,
    pub pe_mode: PeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gqa_kv_heads: Option<usize>,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Drop the shared expert and activate one more routed expert.
    S0A3,
    /// MoE in every block.
    NoInterleave,
    /// Grouped-query attention with half as many kv heads.
    Gqa,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s0a3" => Ok(Ablation::S0A3),
            "no-interleave" => Ok(Ablation::NoInterleave),
            "gqa" => Ok(Ablation::Gqa),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Total and per-token activated parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    pub activated: u64,
}

/// Outcome of [`ModelConfig::validate`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::ConfigParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn experts(&self) -> Result<ExpertSpec> {
        parse_expert_spec(&self.expert_spec)
    }

    pub fn moe_config(&self) -> Result<MoeConfig> {
        let e = self.experts()?;
        Ok(MoeConfig {
            shared: e.shared,
            routed: e.routed,
            active: e.active,
            intermediate: self.intermediate,
        })
    }

    pub fn dense_width(&self) -> usize {
        self.dense_intermediate.unwrap_or(self.intermediate)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn kv_heads(&self) -> usize {
        self.gqa_kv_heads.unwrap_or(self.heads)
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.heads,
            n_kv_heads: self.kv_heads(),
            head_dim: self.head_dim(),
            pe_mode: self.pe_mode,
            gqa: self.gqa_kv_heads.is_some(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_h * self.patch_size, self.grid_w * self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn is_moe_block(&self, block: usize) -> bool {
        if !self.interleave {
            return true;
        }
        match self.moe_parity {
            MoeParity::Even => block.is_multiple_of(2),
            MoeParity::Odd => block % 2 == 1,
        }
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        (0..self.blocks).filter(|&b| self.is_moe_block(b)).collect()
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) -> Result<()> {
        match ablation {
            Ablation::S0A3 => {
                let e = self.experts()?;
                if e.shared == 0 {
                    return Err(Error::Config("s0a3 needs a shared expert to remove".into()));
                }
                let spec = ExpertSpec {
                    shared: 0,
                    routed: e.routed,
                    active: e.active + e.shared,
                };
                self.expert_spec = spec.to_string();
            }
            Ablation::NoInterleave => self.interleave = false,
            Ablation::Gqa => {
                if self.heads < 2 || !self.heads.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "gqa ablation needs an even head count, got {}",
                        self.heads
                    )));
                }
                self.gqa_kv_heads = Some(self.heads / 2);
            }
        }
        Ok(())
    }

    /// Lists every violated constraint instead of stopping at the first.
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();
        let positive = [
            ("blocks", self.blocks),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("freq_dim", self.freq_dim),
        ];
        for (name, value) in positive {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.dense_intermediate == Some(0) {
            v.push("dense_intermediate must be positive".into());
        }
        if let Err(e) = self.experts() {
            v.push(e.to_string());
        } else if let Ok(m) = self.moe_config() {
            if let Err(e) = m.validate() {
                v.push(e.to_string());
            }
        }
        if self.heads > 0 && !self.hidden.is_multiple_of(self.heads) {
            v.push(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.heads > 0 && self.hidden.is_multiple_of(self.heads) {
            let hd = self.head_dim();
            match self.pe_mode {
                PeMode::Rope2d if !hd.is_multiple_of(4) => v.push(format!(
                    "rope2d needs head_dim divisible by 4, got {hd}"
                )),
                PeMode::Rope1d if !hd.is_multiple_of(2) => v.push(format!(
                    "rope1d needs an even head_dim, got {hd}"
                )),
                _ => {}
            }
            if let Err(e) = self.attention().validate() {
                v.push(e.to_string());
            }
        }
        if self.pe_mode == PeMode::Ape && !self.hidden.is_multiple_of(4) {
            v.push(format!(
                "ape sin-cos table needs hidden divisible by 4, got {}",
                self.hidden
            ));
        }
        if !self.freq_dim.is_multiple_of(2) {
            v.push(format!("freq_dim {} must be even", self.freq_dim));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            v.push(format!("rope_base {} must exceed 1", self.rope_base));
        }
        ValidationReport { violations: v }
    }

    /// Errors with the full report when the config is invalid.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_ok() {
            Ok(())
        } else {
            Err(Error::Config(report.violations.join("; ")))
        }
    }

    /// Exact trainable parameter counts of the model this config builds.
    ///
    /// Activated counts replace the routed experts of each MoE layer with
    /// the `K_r` a token actually visits; router centroids count in full.
    pub fn count_parameters(&self) -> Result<ParamCount> {
        self.ensure_valid()?;
        let e = self.experts()?;
        let d = self.hidden as u64;
        let s = self.intermediate as u64;
        let pd = self.patch_dim() as u64;
        let kvw = (self.kv_heads() * self.head_dim()) as u64;

        let patch_embed = pd * d + d;
        let pos_embed = match self.pe_mode {
            PeMode::Ape => self.tokens() as u64 * d,
            _ => 0,
        };
        let t_embed = self.freq_dim as u64 * d + d + d * d + d;
        let y_embed = (self.num_classes as u64 + 1) * d;
        let attn = 2 * (d * d + d) + 2 * (d * kvw + kvw);
        let adaln = d * 6 * d + 6 * d;
        let expert = 3 * d * s;
        let dense = 3 * d * self.dense_width() as u64;
        let router = e.routed as u64 * d;
        let final_layer = d * 2 * d + 2 * d + d * pd + pd;

        let n_moe = self.moe_blocks().len() as u64;
        let n_dense = self.blocks as u64 - n_moe;
        let shared = patch_embed
            + pos_embed
            + t_embed
            + y_embed
            + final_layer
            + self.blocks as u64 * (attn + adaln)
            + n_dense * dense
            + n_moe * router;
        let total = shared + n_moe * (e.shared + e.routed) as u64 * expert;
        let activated = shared + n_moe * (e.shared + e.active) as u64 * expert;
        Ok(ParamCount { total, activated })
    }
}

/// A preset shipped with the crate.
pub struct Preset {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! preset {
    ($name:literal) => {
        Preset {
            name: $name,
            text: include_str!(concat!("../presets/", $name, ".toml")),
        }
    };
}

pub const PRESETS: &[Preset] = &[
    preset!("dsmoe-s-e16"),
    preset!("dsmoe-s-e48"),
    preset!("dsmoe-b-e16"),
    preset!("dsmoe-b-e48"),
    preset!("dsmoe-l-e16"),
    preset!("dsmoe-l-e48"),
    preset!("dsmoe-3b-e16"),
    preset!("jitmoe-b16-e16"),
    preset!("jitmoe-l16-e16"),
    preset!("dsmoe-tiny"),
];

pub fn preset(name: &str) -> Result<ModelConfig> {
    let p = PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("no preset named {name:?}")))?;
    toml::from_str(p.text).map_err(|e| Error::ConfigParse {
        path: format!("preset {name}"),
        message: e.to_string(),
    })
}

/// Reads a config file; falls back to `PATH.toml` and then to a shipped
/// preset whose name equals the path's file stem.
pub fn resolve_config(path: &Path) -> Result<ModelConfig> {
    if path.is_file() {
        return ModelConfig::load(path);
    }
    let with_ext = path.with_extension("toml");
    if with_ext.is_file() {
        return ModelConfig::load(&with_ext);
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    preset(stem).map_err(|_| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such config or preset"),
        )
    })
}
