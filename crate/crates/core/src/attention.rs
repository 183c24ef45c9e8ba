//! Multi-head self-attention with APE / 1D RoPE / 2D RoPE position modes and
//! optional grouped key/value heads.

use std::fmt;
use std::sync::Arc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnDims, Graph, Var};
use crate::rope::{RotaryMode, RotaryTable};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    Ape,
    Rope1d,
    Rope2d,
}

impl PeMode {
    pub fn rotary(self) -> Option<RotaryMode> {
        match self {
            PeMode::Ape => None,
            PeMode::Rope1d => Some(RotaryMode::Flat),
            PeMode::Rope2d => Some(RotaryMode::Axial),
        }
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMode::Ape => "ape",
            PeMode::Rope1d => "rope1d",
            PeMode::Rope2d => "rope2d",
        })
    }
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ape" => Ok(PeMode::Ape),
            "rope1d" => Ok(PeMode::Rope1d),
            "rope2d" => Ok(PeMode::Rope2d),
            other => Err(Error::Config(format!("unknown position encoding {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub pe_mode: PeMode,
    /// Grouped-query ablation switch; without it `n_kv_heads` must equal `n_heads`.
    pub gqa: bool,
}

impl AttentionConfig {
    pub fn standard(n_heads: usize, head_dim: usize, pe_mode: PeMode) -> Self {
        Self {
            n_heads,
            n_kv_heads: n_heads,
            head_dim,
            pe_mode,
            gqa: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("attention extents must be positive".into()));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.n_kv_heads < self.n_heads && !self.gqa {
            return Err(Error::Config(
                "fewer kv heads than query heads requires the gqa ablation".into(),
            ));
        }
        if self.n_kv_heads > self.n_heads {
            return Err(Error::Config("more kv heads than query heads".into()));
        }
        Ok(())
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }
}

/// Records RoPE (when enabled) plus fused attention on the graph.
/// `q` is `[B·T × H·hd]`, `k`/`v` are `[B·T × H_kv·hd]`.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    config: &AttentionConfig,
    rotary: Option<(&Arc<RotaryTable>, &Arc<[(usize, usize)]>)>,
    batch: usize,
) -> Result<Var> {
    config.validate()?;
    let (q, k) = match (config.pe_mode.rotary(), rotary) {
        (None, None) => (q, k),
        (Some(mode), Some((table, pos))) => {
            if table.mode() != mode || table.head_dim() != config.head_dim {
                return Err(Error::Config(format!(
                    "rotary table ({:?}, head_dim {}) does not match {} with head_dim {}",
                    table.mode(),
                    table.head_dim(),
                    config.pe_mode,
                    config.head_dim
                )));
            }
            let q = g.rope(q, table.clone(), pos.clone(), config.n_heads)?;
            let k = g.rope(k, table.clone(), pos.clone(), config.n_kv_heads)?;
            (q, k)
        }
        (None, Some(_)) => {
            return Err(Error::Config("rotary table given for APE attention".into()))
        }
        (Some(_), None) => {
            return Err(Error::Config(format!(
                "{} attention needs a rotary table",
                config.pe_mode
            )))
        }
    };
    let rows = g.shape(q)[0];
    if batch == 0 || !rows.is_multiple_of(batch) {
        return Err(Error::shape("attention", g.shape(q), &[batch]));
    }
    let dims = AttnDims {
        batch,
        tokens: rows / batch,
        heads: config.n_heads,
        kv_heads: config.n_kv_heads,
        head_dim: config.head_dim,
    };
    g.attention(q, k, v, dims)
}

fn flatten_heads(x: &Tensor, heads: usize, head_dim: usize, what: &str) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[1] != heads || s[2] != head_dim {
        return Err(Error::InvalidShape(format!(
            "{what} must be [tokens × {heads} × {head_dim}], got {s:?}"
        )));
    }
    x.reshape([s[0], heads * head_dim])
}

/// Single-sequence attention on `[tokens × heads × head_dim]` tensors.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    config: &AttentionConfig,
    table: Option<&RotaryTable>,
    positions: &[(usize, usize)],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let qv = g.constant(flatten_heads(q, config.n_heads, config.head_dim, "q")?);
    let kv = g.constant(flatten_heads(k, config.n_kv_heads, config.head_dim, "k")?);
    let vv = g.constant(flatten_heads(v, config.n_kv_heads, config.head_dim, "v")?);
    if q.shape()[0] != k.shape()[0] || k.shape()[0] != v.shape()[0] {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let table = table.map(|t| Arc::new(t.clone()));
    let pos: Arc<[(usize, usize)]> = positions.into();
    if table.is_some() && positions.len() != q.shape()[0] {
        return Err(Error::shape("attention", q.shape(), &[positions.len()]));
    }
    let out = attend(&mut g, qv, kv, vv, config, table.as_ref().map(|t| (t, &pos)), 1)?;
    g.value(out)
        .reshape([q.shape()[0], config.n_heads, config.head_dim])
}

/// Pre-softmax logits `[heads × tokens × tokens]` after position encoding.
pub fn attention_logits(
    q: &Tensor,
    k: &Tensor,
    config: &AttentionConfig,
    table: Option<&RotaryTable>,
    positions: &[(usize, usize)],
) -> Result<Tensor> {
    config.validate()?;
    let (mut q, mut k) = (q.clone(), k.clone());
    match (config.pe_mode.rotary(), table) {
        (Some(_), Some(t)) => {
            q = crate::rope::apply_rope(&q, t, positions)?;
            k = crate::rope::apply_rope(&k, t, positions)?;
        }
        (None, _) => {}
        (Some(_), None) => {
            return Err(Error::Config("rotary attention needs a table".into()));
        }
    }
    let (t, h, hd) = (q.shape()[0], config.n_heads, config.head_dim);
    let group = config.n_heads / config.n_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor::zeros([h, t, t]);
    for head in 0..h {
        let kh = head / group;
        for i in 0..t {
            for j in 0..t {
                let dot: f64 = (0..hd)
                    .map(|d| q.get(&[i, head, d]) * k.get(&[j, kh, d]))
                    .sum();
                out.set(&[head, i, j], dot * scale);
            }
        }
    }
    Ok(out)
}
