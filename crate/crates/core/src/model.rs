//! Class-conditional DiT with interleaved dense / MoE feed-forward blocks.
//!
//! Every block is pre-norm attention followed by a pre-norm FFN, both
//! modulated by adaLN-Zero (shift, scale, gate per sublayer) computed from
//! the timestep + class embedding. Gates and the output head start at zero,
//! so a freshly built model predicts exactly zero.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, PeMode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, DEFAULT_EPS};
use crate::moe::{expert_graph, moe_experts, ExpertVars, MoeVars, RouterState, DEFAULT_BIAS_RATE};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::rope::{grid_positions, RotaryTable};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
/// Timesteps in `[0, 1]` are stretched by this before the sinusoidal embedding.
pub const TIME_EMBED_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ExpertIds {
    gate: ParamId,
    up: ParamId,
    down: ParamId,
}

#[derive(Clone, Debug)]
enum FfnIds {
    Dense(ExpertIds),
    Moe {
        shared: Vec<ExpertIds>,
        routed: Vec<ExpertIds>,
        centroids: ParamId,
    },
}

#[derive(Clone, Debug)]
struct BlockIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    adaln: Linear,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    patch: Linear,
    pos: Option<ParamId>,
    t_fc1: Linear,
    t_fc2: Linear,
    y_table: ParamId,
    blocks: Vec<BlockIds>,
    final_adaln: Linear,
    final_out: Linear,
}

/// Routing decisions of one MoE block for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    /// Block index inside the model.
    pub block: usize,
    /// Ordinal among MoE blocks.
    pub moe_layer: usize,
    /// Selected experts per token, rows ordered `sample·T + token`.
    pub selected: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub prediction: Tensor,
    pub routing: Vec<LayerRouting>,
}

#[derive(Clone, Debug)]
pub struct DiTMoE {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    /// Router state per block, `Some` on MoE blocks.
    routers: Vec<Option<RouterState>>,
    rotary: Option<Arc<RotaryTable>>,
    positions: Arc<[(usize, usize)]>,
}

fn linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    init: Option<&mut ChaCha8Rng>,
) -> Linear {
    let w = match init {
        Some(rng) => truncated_normal([fan_in, fan_out], INIT_STD, rng),
        None => Tensor::zeros([fan_in, fan_out]),
    };
    Linear {
        weight: store.insert(format!("{name}.weight"), w),
        bias: store.insert(format!("{name}.bias"), Tensor::zeros([fan_out])),
    }
}

fn expert(store: &mut ParamStore, name: &str, d: usize, s: usize, rng: &mut ChaCha8Rng) -> ExpertIds {
    ExpertIds {
        gate: store.insert(format!("{name}.gate"), truncated_normal([d, s], INIT_STD, rng)),
        up: store.insert(format!("{name}.up"), truncated_normal([d, s], INIT_STD, rng)),
        down: store.insert(format!("{name}.down"), truncated_normal([s, d], INIT_STD, rng)),
    }
}

/// Fixed 2D sin-cos table `[grid_h·grid_w × D]`: first half of the width
/// encodes the row, second half the column.
pub fn sincos_2d_table(grid_h: usize, grid_w: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let mut t = Tensor::zeros([grid_h * grid_w, d]);
    for (p, (r, c)) in grid_positions(grid_h, grid_w).into_iter().enumerate() {
        for (axis, pos) in [(0, r), (1, c)] {
            for i in 0..quarter {
                let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                let a = pos as f64 * omega;
                t.set(&[p, axis * 2 * quarter + i], a.sin());
                t.set(&[p, axis * 2 * quarter + quarter + i], a.cos());
            }
        }
    }
    t
}

/// `[cos(t·f_i), sin(t·f_i)]` features for each timestep, `[B × freq_dim]`.
pub fn timestep_features(t: &[f64], freq_dim: usize) -> Tensor {
    let half = freq_dim / 2;
    let mut out = Tensor::zeros([t.len().max(1), freq_dim]);
    for (b, &tv) in t.iter().enumerate() {
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = tv * TIME_EMBED_SCALE * f;
            out.set(&[b, i], a.cos());
            out.set(&[b, half + i], a.sin());
        }
    }
    out
}

/// Flat source indices mapping image pixels to patch rows.
///
/// For a batch of `[B×C×H×W]` images, entry `(b·T + token)·P + f` of the
/// result gives the pixel feeding feature `f = ch·p² + py·p + px` of that
/// token. Tokens are in row-major patch order.
pub fn patchify_map(batch: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::InvalidShape(format!(
            "{h}×{w} image does not split into {p}×{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(batch * c * h * w);
    for b in 0..batch {
        for r in 0..gh {
            for col in 0..gw {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            map.push(((b * c + ch) * h + r * p + py) * w + col * p + px);
                        }
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Inverse of [`patchify_map`].
pub fn unpatchify_map(batch: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    let fwd = patchify_map(batch, c, h, w, p)?;
    let mut inv = vec![0; fwd.len()];
    for (token_pos, &pixel) in fwd.iter().enumerate() {
        inv[pixel] = token_pos;
    }
    Ok(inv)
}

/// `[C×H×W]` image (or `[B×C×H×W]` batch) to `[tokens × C·p²]` rows.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = image_dims(image)?;
    let map = patchify_map(b, c, h, w, patch)?;
    let data = map.iter().map(|&i| image.data()[i]).collect();
    Tensor::new([b * (h / patch) * (w / patch), c * patch * patch], data)
}

/// Inverse of [`patchify`] for a `[C×H×W]` target shape.
pub fn unpatchify(tokens: &Tensor, channels: usize, h: usize, w: usize, patch: usize) -> Result<Tensor> {
    let per_image = channels * h * w;
    if !tokens.numel().is_multiple_of(per_image) || tokens.as_matrix().1 != channels * patch * patch {
        return Err(Error::shape("unpatchify", tokens.shape(), &[channels, h, w]));
    }
    let b = tokens.numel() / per_image;
    let inv = unpatchify_map(b, channels, h, w, patch)?;
    let data = inv.iter().map(|&i| tokens.data()[i]).collect();
    if b == 1 {
        Tensor::new([channels, h, w], data)
    } else {
        Tensor::new([b, channels, h, w], data)
    }
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::InvalidShape(format!(
            "expected [C×H×W] or [B×C×H×W], got {:?}",
            x.shape()
        ))),
    }
}

impl DiTMoE {
    /// Builds a freshly initialized model. Initialization is a pure function
    /// of the config and seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.ensure_valid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.hidden;
        let kvw = config.kv_heads() * config.head_dim();
        let experts = config.experts()?;

        let patch = linear(&mut s, "patch_embed", config.patch_dim(), d, Some(&mut rng));
        let pos = (config.pe_mode == PeMode::Ape)
            .then(|| s.insert("pos_embed", sincos_2d_table(config.grid_h, config.grid_w, d)));
        let t_fc1 = linear(&mut s, "t_embed.fc1", config.freq_dim, d, Some(&mut rng));
        let t_fc2 = linear(&mut s, "t_embed.fc2", d, d, Some(&mut rng));
        let y_table = s.insert(
            "y_embed.table",
            truncated_normal([config.num_classes + 1, d], INIT_STD, &mut rng),
        );

        let mut blocks = Vec::with_capacity(config.blocks);
        let mut routers = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let p = format!("blocks.{i}");
            let q = linear(&mut s, &format!("{p}.attn.q"), d, d, Some(&mut rng));
            let k = linear(&mut s, &format!("{p}.attn.k"), d, kvw, Some(&mut rng));
            let v = linear(&mut s, &format!("{p}.attn.v"), d, kvw, Some(&mut rng));
            let o = linear(&mut s, &format!("{p}.attn.o"), d, d, Some(&mut rng));
            let adaln = linear(&mut s, &format!("{p}.adaln"), d, 6 * d, None);
            let ffn = if config.is_moe_block(i) {
                let shared = (0..experts.shared)
                    .map(|e| expert(&mut s, &format!("{p}.moe.shared.{e}"), d, config.intermediate, &mut rng))
                    .collect();
                let routed = (0..experts.routed)
                    .map(|e| expert(&mut s, &format!("{p}.moe.routed.{e}"), d, config.intermediate, &mut rng))
                    .collect();
                let centroids = s.insert(
                    format!("{p}.moe.centroids"),
                    truncated_normal([experts.routed, d], INIT_STD, &mut rng),
                );
                routers.push(Some(RouterState::new(experts.routed, DEFAULT_BIAS_RATE)));
                FfnIds::Moe {
                    shared,
                    routed,
                    centroids,
                }
            } else {
                routers.push(None);
                FfnIds::Dense(expert(&mut s, &format!("{p}.ffn"), d, config.dense_width(), &mut rng))
            };
            blocks.push(BlockIds {
                q,
                k,
                v,
                o,
                adaln,
                ffn,
            });
        }
        let final_adaln = linear(&mut s, "final.adaln", d, 2 * d, None);
        let final_out = linear(&mut s, "final.linear", d, config.patch_dim(), None);

        let rotary = match config.pe_mode.rotary() {
            Some(mode) => Some(Arc::new(RotaryTable::build(
                mode,
                config.grid_h,
                config.grid_w,
                config.head_dim(),
                config.rope_base,
            )?)),
            None => None,
        };
        let positions = grid_positions(config.grid_h, config.grid_w).into();
        Ok(Self {
            config,
            params: s,
            layout: Layout {
                patch,
                pos,
                t_fc1,
                t_fc2,
                y_table,
                blocks,
                final_adaln,
                final_out,
            },
            routers,
            rotary,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Router states of the MoE blocks, in block order.
    pub fn routers(&self) -> impl Iterator<Item = &RouterState> {
        self.routers.iter().flatten()
    }

    pub fn routers_mut(&mut self) -> impl Iterator<Item = &mut RouterState> {
        self.routers.iter_mut().flatten()
    }

    pub fn set_bias_rate(&mut self, rate: f64) {
        self.routers_mut().for_each(|r| r.rate = rate);
    }

    /// Applies the load-balancing bias step on every MoE layer.
    pub fn update_router_biases(&mut self) {
        self.routers_mut().for_each(RouterState::update_bias);
    }

    /// Names of the non-trainable routing-bias buffers, in block order.
    pub fn buffer_names(&self) -> Vec<String> {
        self.routers
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_some())
            .map(|(i, _)| format!("blocks.{i}.moe.router_bias"))
            .collect()
    }

    /// Parameters followed by routing-bias buffers, in canonical order.
    pub fn state_table(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (name, r) in self.buffer_names().into_iter().zip(self.routers()) {
            let t = Tensor::new([r.biases.len()], r.biases.clone()).expect("non-empty biases");
            out.push((name, t));
        }
        out
    }

    pub fn state_names(&self) -> Vec<String> {
        let mut names = self.params.names().to_vec();
        names.extend(self.buffer_names());
        names
    }

    /// Restores from a table produced by [`DiTMoE::state_table`].
    pub fn load_state(&mut self, table: &[(String, Tensor)]) -> Result<()> {
        crate::params::check_keys(&self.state_names(), table.iter().map(|(n, _)| n.as_str()))?;
        let n = self.params.len();
        self.params.assign(&table[..n])?;
        let mut buffers = table[n..].iter();
        for r in self.routers_mut() {
            let (name, t) = buffers.next().expect("checked by key list");
            if t.numel() != r.biases.len() {
                return Err(Error::KeyMismatch {
                    expected: format!("{name}[{}]", r.biases.len()),
                    found: format!("{name}{:?}", t.shape()),
                });
            }
            r.biases = t.data().to_vec();
        }
        Ok(())
    }

    fn check_inputs(&self, x_t: &Tensor, t: &[f64], classes: &[usize]) -> Result<usize> {
        let (b, c, h, w) = image_dims(x_t)?;
        let (eh, ew) = self.config.image_size();
        if (c, h, w) != (self.config.in_channels, eh, ew) {
            return Err(Error::shape("forward", x_t.shape(), &[b, self.config.in_channels, eh, ew]));
        }
        if t.len() != b || classes.len() != b {
            return Err(Error::InvalidShape(format!(
                "batch of {b} images with {} timesteps and {} labels",
                t.len(),
                classes.len()
            )));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidShape(format!("timestep {bad} outside [0, 1]")));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c > self.config.num_classes) {
            return Err(Error::Index {
                op: "class label",
                index: bad,
                extent: self.config.num_classes + 1,
            });
        }
        Ok(b)
    }

    /// Records the forward pass on `g` with parameters bound as `vars`
    /// (from [`ParamStore::bind`]). Returns the `[B×C×H×W]` velocity
    /// prediction and the routing of every MoE block.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        x_t: &Tensor,
        t: &[f64],
        classes: &[usize],
    ) -> Result<(Var, Vec<LayerRouting>)> {
        let batch = self.check_inputs(x_t, t, classes)?;
        let cfg = &self.config;
        let lay = &self.layout;
        let p = |id: ParamId| vars[id.index()];
        let d = cfg.hidden;
        let tokens = cfg.tokens();
        let (h, w) = cfg.image_size();
        let apply = |g: &mut Graph, x: Var, l: Linear| -> Result<Var> {
            let y = g.matmul(x, p(l.weight))?;
            g.add_bias(y, p(l.bias))
        };

        let x_img = g.constant(x_t.clone());
        let pmap = patchify_map(batch, cfg.in_channels, h, w, cfg.patch_size)?;
        let patches = g.gather(x_img, pmap.into(), vec![batch * tokens, cfg.patch_dim()])?;
        let mut x = apply(g, patches, lay.patch)?;
        if let Some(pos) = lay.pos {
            let rows: Vec<usize> = (0..batch).flat_map(|_| 0..tokens).collect();
            let pe = g.index_select(p(pos), &rows)?;
            x = g.add(x, pe)?;
        }

        let tf = g.constant(timestep_features(t, cfg.freq_dim));
        let te = apply(g, tf, lay.t_fc1)?;
        let te = g.silu(te);
        let te = apply(g, te, lay.t_fc2)?;
        let ye = g.index_select(p(lay.y_table), classes)?;
        let cond = g.add(te, ye)?;
        let cond = g.silu(cond);

        let modulate = |g: &mut Graph, x: Var, shift: Var, scale: Var| -> Result<Var> {
            let n = g.layernorm(x, None, None, DEFAULT_EPS)?;
            let scaled = g.mul_expand(n, scale)?;
            let n = g.add(n, scaled)?;
            g.add_expand(n, shift)
        };

        let attn_cfg = cfg.attention();
        let moe_cfg = cfg.moe_config()?;
        let rotary = self.rotary.as_ref().map(|t| (t, &self.positions));
        let mut routing = Vec::new();
        for (i, blk) in lay.blocks.iter().enumerate() {
            let m = apply(g, cond, blk.adaln)?;
            let chunk = |g: &mut Graph, k: usize| g.slice_cols(m, k * d, d);
            let (sh1, sc1, ga1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
            let (sh2, sc2, ga2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

            let u = modulate(g, x, sh1, sc1)?;
            let q = apply(g, u, blk.q)?;
            let k = apply(g, u, blk.k)?;
            let v = apply(g, u, blk.v)?;
            let a = attend(g, q, k, v, &attn_cfg, rotary, batch)?;
            let a = apply(g, a, blk.o)?;
            let a = g.mul_expand(a, ga1)?;
            x = g.add(x, a)?;

            let u = modulate(g, x, sh2, sc2)?;
            let y = match &blk.ffn {
                FfnIds::Dense(e) => expert_graph(g, u, &expert_vars(&p, e))?,
                FfnIds::Moe {
                    shared,
                    routed,
                    centroids,
                } => {
                    let mv = MoeVars {
                        shared: shared.iter().map(|e| expert_vars(&p, e)).collect(),
                        routed: routed.iter().map(|e| expert_vars(&p, e)).collect(),
                        centroids: p(*centroids),
                    };
                    let router = self.routers[i].as_mut().expect("MoE block has a router");
                    let (y, selected) = moe_experts(g, u, &mv, router, &moe_cfg)?;
                    routing.push(LayerRouting {
                        block: i,
                        moe_layer: routing.len(),
                        selected,
                    });
                    y
                }
            };
            let y = g.mul_expand(y, ga2)?;
            x = g.add(x, y)?;
        }

        let m = apply(g, cond, lay.final_adaln)?;
        let sh = g.slice_cols(m, 0, d)?;
        let sc = g.slice_cols(m, d, d)?;
        let u = modulate(g, x, sh, sc)?;
        let out = apply(g, u, lay.final_out)?;
        let inv = unpatchify_map(batch, cfg.in_channels, h, w, cfg.patch_size)?;
        let img = g.gather(out, inv.into(), vec![batch, cfg.in_channels, h, w])?;
        Ok((img, routing))
    }

    /// Inference forward: no gradients are tracked.
    pub fn forward(&mut self, x_t: &Tensor, t: &[f64], classes: &[usize]) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let (y, routing) = self.forward_graph(&mut g, &vars, x_t, t, classes)?;
        Ok(ModelOutput {
            prediction: g.value(y).clone(),
            routing,
        })
    }
}

fn expert_vars(p: &impl Fn(ParamId) -> Var, e: &ExpertIds) -> ExpertVars {
    ExpertVars {
        gate: p(e.gate),
        up: p(e.up),
        down: p(e.down),
    }
}
