#![allow(dead_code)]

use dsmoe::config::{preset, ModelConfig};
use dsmoe::graph::{Graph, Var};
use dsmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Relative errors divide by `max(|analytic|, |numeric|, FLOOR)` so that
/// exactly-zero gradients compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients against central differences for every
/// coordinate of every input. `build` maps leaf vars to an output; the
/// scalar objective is `sum(output ⊙ R)` for a fixed random `R`.
pub fn grad_check(inputs: &[Tensor], seed: u64, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let mut r = rng(seed ^ 0xABCD);
        uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut r)
    };
    let objective = |g: &mut Graph, vars: &[Var]| {
        let out = build(g, vars);
        let w = g.constant(weights.clone());
        let p = g.mul(out, w).unwrap();
        g.sum(p)
    };
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = objective(&mut g, &vars);
        g.value(l).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = objective(&mut g, &vars);
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().clone();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// The tiny configuration used for full-model checks: two blocks, width 16,
/// two heads, four routed experts with two active, 4×4 token grid.
pub fn tiny_config() -> ModelConfig {
    let mut c = preset("dsmoe-tiny").unwrap();
    c.blocks = 2;
    c.hidden = 16;
    c.heads = 2;
    c.intermediate = 8;
    c.dense_intermediate = Some(16);
    c.expert_spec = "S1E4A2".into();
    c.freq_dim = 8;
    c.grid_h = 4;
    c.grid_w = 4;
    c
}

/// Keeps a preset's structure (depth, heads, expert spec, interleaving,
/// positional mode, patching) but shrinks widths and the token grid so it
/// runs in seconds.
pub fn desk_scale(mut c: ModelConfig, grid: usize) -> ModelConfig {
    c.hidden = c.heads * 8;
    c.intermediate = 8;
    if c.dense_intermediate.is_some() {
        c.dense_intermediate = Some(16);
    }
    c.grid_h = grid;
    c.grid_w = grid;
    c.num_classes = 4;
    c.freq_dim = 16;
    c
}

pub const PUBLISHED_PRESETS: &[&str] = &[
    "dsmoe-s-e16",
    "dsmoe-s-e48",
    "dsmoe-b-e16",
    "dsmoe-b-e48",
    "dsmoe-l-e16",
    "dsmoe-l-e48",
    "dsmoe-3b-e16",
    "jitmoe-b16-e16",
    "jitmoe-l16-e16",
];

/// Reverse-mode vs central differences on `n` randomly drawn weight
/// coordinates of a model whose every parameter (including the zero-init
/// gates and head) has been redrawn, so all paths carry gradient.
pub fn model_grad_check(config: ModelConfig, n: usize, seed: u64) -> f64 {
    use dsmoe::model::DiTMoE;
    use rand_distr::{Distribution, Normal};

    let mut r = rng(seed);
    let mut model = DiTMoE::new(config.clone(), seed).unwrap();
    let normal = Normal::new(0.0, 0.3).unwrap();
    for t in model.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut r));
    }
    let (h, w) = config.image_size();
    let x = uniform([2, config.in_channels, h, w], -1.0, 1.0, &mut r);
    let target = uniform([2, config.in_channels, h, w], -1.0, 1.0, &mut r);
    let t = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
    let classes = [r.gen_range(0..config.num_classes), config.num_classes];

    let loss_of = |m: &mut DiTMoE| {
        let out = m.forward(&x, &t, &classes).unwrap().prediction;
        out.zip_with(&target, |a, b| (a - b) * (a - b)).unwrap().sum() / out.numel() as f64
    };

    let mut g = Graph::new();
    let vars = model.params().bind(&mut g, true);
    let (pred, _) = model.forward_graph(&mut g, &vars, &x, &t, &classes).unwrap();
    let tv = g.constant(target.clone());
    let loss = g.mse(pred, tv).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();

    let sizes: Vec<usize> = model.params().tensors().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let mut flat = r.gen_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let orig = model.params().tensors()[p].data()[flat];
        model.params_mut().tensors_mut()[p].data_mut()[flat] = orig + FD_STEP;
        let lp = loss_of(&mut model);
        model.params_mut().tensors_mut()[p].data_mut()[flat] = orig - FD_STEP;
        let lm = loss_of(&mut model);
        model.params_mut().tensors_mut()[p].data_mut()[flat] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads[p].data()[flat], numeric));
    }
    worst
}

pub mod routing {
    use dsmoe::graph::sigmoid;
    use dsmoe::moe::{gate_values, load_std, moe_forward, select_topk, ExpertWeights, MoeConfig, RouterState};
    use dsmoe::Tensor;
    use rand::Rng;

    use super::{rng, uniform};

    pub fn naive_affinity(u: &[f64], centroids: &Tensor) -> Vec<f64> {
        let d = u.len();
        (0..centroids.shape()[0])
            .map(|e| {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += u[j] * centroids.data()[e * d + j];
                }
                sigmoid(acc)
            })
            .collect()
    }

    pub fn naive_expert(u: &[f64], w: &ExpertWeights) -> Vec<f64> {
        let (d, s) = (w.gate.shape()[0], w.gate.shape()[1]);
        let mut hidden = vec![0.0; s];
        for k in 0..s {
            let (mut a, mut b) = (0.0, 0.0);
            for j in 0..d {
                a += u[j] * w.gate.data()[j * s + k];
                b += u[j] * w.up.data()[j * s + k];
            }
            hidden[k] = a * sigmoid(a) * b;
        }
        (0..d)
            .map(|j| (0..s).map(|k| hidden[k] * w.down.data()[k * d + j]).sum())
            .collect()
    }

    /// Every `k`-subset's total score, to find the best subset by
    /// exhaustive search (lowest indices on ties).
    pub fn brute_topk(key: &[f64], k: usize) -> Vec<usize> {
        let n = key.len();
        let mut best: Option<Vec<usize>> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            // sorted-descending key multiset is what top-k maximizes; compare
            // lexicographically, then prefer the lexicographically smallest index set
            let mut vals: Vec<f64> = idx.iter().map(|&i| key[i]).collect();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let better = match &best {
                None => true,
                Some(bi) => {
                    let mut bv: Vec<f64> = bi.iter().map(|&i| key[i]).collect();
                    bv.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    match vals.partial_cmp(&bv).unwrap() {
                        std::cmp::Ordering::Greater => true,
                        std::cmp::Ordering::Less => false,
                        std::cmp::Ordering::Equal => idx < *bi,
                    }
                }
            };
            if better {
                best = Some(idx);
            }
        }
        best.unwrap()
    }

    pub struct Instance {
        pub config: MoeConfig,
        pub u: Tensor,
        pub shared: Vec<ExpertWeights>,
        pub routed: Vec<ExpertWeights>,
        pub centroids: Tensor,
        pub biases: Vec<f64>,
    }

    pub fn random_instance(seed: u64) -> Instance {
        let mut r = rng(seed);
        let routed = r.gen_range(1..=8);
        let config = MoeConfig {
            shared: r.gen_range(0..=1),
            routed,
            active: r.gen_range(1..=routed),
            intermediate: r.gen_range(1..=6),
        };
        let d = r.gen_range(2..=8);
        let tokens = r.gen_range(1..=32);
        let s = config.intermediate;
        let expert = |r: &mut rand_chacha::ChaCha8Rng| ExpertWeights {
            gate: uniform([d, s], -1.0, 1.0, r),
            up: uniform([d, s], -1.0, 1.0, r),
            down: uniform([s, d], -1.0, 1.0, r),
        };
        let shared = (0..config.shared).map(|_| expert(&mut r)).collect();
        let routed_w = (0..routed).map(|_| expert(&mut r)).collect();
        // coarse values make exact score ties reachable
        let biases = (0..routed).map(|_| r.gen_range(-4i32..=4) as f64 * 0.05).collect();
        Instance {
            config,
            u: uniform([tokens, d], -2.0, 2.0, &mut r),
            shared,
            routed: routed_w,
            centroids: uniform([routed, d], -1.0, 1.0, &mut r),
            biases,
        }
    }

    /// Dense oracle: evaluate every expert on every token and mask.
    pub fn dense_oracle(inst: &Instance) -> (Tensor, Vec<Vec<usize>>) {
        let (t, d) = (inst.u.shape()[0], inst.u.shape()[1]);
        let mut out = inst.u.clone();
        let mut selections = Vec::new();
        for i in 0..t {
            let u = inst.u.row(i);
            let s = naive_affinity(u, &inst.centroids);
            let key: Vec<f64> = s.iter().zip(&inst.biases).map(|(a, b)| a + b).collect();
            let sel = brute_topk(&key, inst.config.active);
            let total: f64 = sel.iter().map(|&e| s[e]).sum();
            let mut acc = vec![0.0; d];
            for w in &inst.shared {
                acc.iter_mut().zip(naive_expert(u, w)).for_each(|(a, y)| *a += y);
            }
            for e in 0..inst.config.routed {
                let gate = if sel.contains(&e) { s[e] / total } else { 0.0 };
                let y = naive_expert(u, &inst.routed[e]);
                acc.iter_mut().zip(y).for_each(|(a, y)| *a += gate * y);
            }
            out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(acc).for_each(|(o, a)| *o += a);
            selections.push(sel);
        }
        (out, selections)
    }

    /// Checks gate sums, bias independence of gates, top-k against brute
    /// force and the layer against the dense oracle. Returns the worst
    /// deviation seen for each (gate sum, moe vs oracle).
    pub fn check_instance(seed: u64) -> Result<(f64, f64), String> {
        let inst = random_instance(seed);
        let mut worst_sum: f64 = 0.0;
        let mut r = rng(seed ^ 0x5EED);
        for i in 0..inst.u.shape()[0] {
            let s = naive_affinity(inst.u.row(i), &inst.centroids);
            let sel = select_topk(&s, &inst.biases, inst.config.active).map_err(|e| e.to_string())?;
            let key: Vec<f64> = s.iter().zip(&inst.biases).map(|(a, b)| a + b).collect();
            if sel != brute_topk(&key, inst.config.active) {
                return Err(format!("seed {seed}: top-k {sel:?} differs from brute force"));
            }
            let gates = gate_values(&s, &sel).map_err(|e| e.to_string())?;
            worst_sum = worst_sum.max((gates.iter().sum::<f64>() - 1.0).abs());
            for (&e, g) in sel.iter().zip(&gates) {
                if *g != s[e] / sel.iter().map(|&j| s[j]).sum::<f64>() {
                    return Err(format!("seed {seed}: gate not from raw score"));
                }
            }
        }
        let mut router = RouterState::new(inst.config.routed, 0.01);
        router.biases = inst.biases.clone();
        let (h, sel) = moe_forward(&inst.u, &inst.shared, &inst.routed, &inst.centroids, &mut router, &inst.config)
            .map_err(|e| e.to_string())?;
        let (oracle, oracle_sel) = dense_oracle(&inst);
        if sel != oracle_sel {
            return Err(format!("seed {seed}: layer selection differs from oracle"));
        }
        // perturbed biases: tokens keeping their selection keep their output
        let mut moved = RouterState::new(inst.config.routed, 0.01);
        moved.biases = inst.biases.iter().map(|b| b + r.gen_range(-0.2..0.2)).collect();
        let (h2, sel2) = moe_forward(&inst.u, &inst.shared, &inst.routed, &inst.centroids, &mut moved, &inst.config)
            .map_err(|e| e.to_string())?;
        for t in 0..sel.len() {
            if sel[t] == sel2[t] && h.row(t) != h2.row(t) {
                return Err(format!("seed {seed}: bias change altered token {t} with fixed selection"));
            }
        }
        Ok((worst_sum, h.max_abs_diff(&oracle)))
    }

    /// Per-window load std over `windows` windows of a skewed stream in
    /// which centroid 0 is aligned with the common token direction.
    pub fn skewed_stream_loads(windows: usize, update: bool, seed: u64) -> Vec<f64> {
        let (routed, d, tokens_per_window) = (8, 16, 64);
        let config = MoeConfig {
            shared: 0,
            routed,
            active: 2,
            intermediate: 2,
        };
        let mut r = rng(seed);
        let mut centroids = uniform([routed, d], -0.3, 0.3, &mut r);
        let direction = uniform([d], -1.0, 1.0, &mut r);
        for j in 0..d {
            centroids.data_mut()[j] = direction.data()[j];
        }
        let experts: Vec<ExpertWeights> = (0..routed).map(|_| ExpertWeights::zeros(d, 2)).collect();
        let mut router = RouterState::new(routed, dsmoe::moe::DEFAULT_BIAS_RATE);
        let mut stream = rng(seed + 1);
        let mut stds = Vec::with_capacity(windows);
        for _ in 0..windows {
            let u = Tensor::from_fn([tokens_per_window, d], |i| {
                direction.data()[i % d] + stream.gen_range(-0.5..0.5)
            });
            moe_forward(&u, &[], &experts, &centroids, &mut router, &config).unwrap();
            stds.push(load_std(router.loads()));
            if update {
                router.update_bias();
            } else {
                // frozen baseline: start a new window without touching biases
                let b = router.biases.clone();
                router.update_bias();
                router.biases = b;
            }
        }
        stds
    }
}

pub mod rotary {
    use dsmoe::attention::{attention_logits, AttentionConfig, PeMode};
    use dsmoe::rope::{RotaryMode, RotaryTable, DEFAULT_ROPE_BASE};
    use dsmoe::Tensor;

    use super::{rng, uniform};

    /// Draws projection weights and token features, places an `n×n` token
    /// block at every offset inside a `2n−1` square table, and returns the
    /// largest logit deviation from the block at the origin.
    pub fn translation_deviation(seed: u64, n: usize, mode: RotaryMode) -> f64 {
        let (heads, hd, d) = (2, 8, 12);
        let mut r = rng(seed);
        let x = uniform([n * n, d], -1.0, 1.0, &mut r);
        let wq = uniform([d, heads * hd], -1.0, 1.0, &mut r);
        let wk = uniform([d, heads * hd], -1.0, 1.0, &mut r);
        let q = x.matmul(&wq).unwrap().reshape([n * n, heads, hd]).unwrap();
        let k = x.matmul(&wk).unwrap().reshape([n * n, heads, hd]).unwrap();
        let extent = 2 * n - 1;
        let table = RotaryTable::build(mode, extent, extent, hd, DEFAULT_ROPE_BASE).unwrap();
        let pe = match mode {
            RotaryMode::Axial => PeMode::Rope2d,
            RotaryMode::Flat => PeMode::Rope1d,
        };
        let cfg = AttentionConfig::standard(heads, hd, pe);
        let at = |dr: usize, dc: usize| -> Tensor {
            let pos: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r + dr, c + dc))).collect();
            attention_logits(&q, &k, &cfg, Some(&table), &pos).unwrap()
        };
        let base = at(0, 0);
        let mut worst: f64 = 0.0;
        for dr in 0..n {
            for dc in 0..n {
                worst = worst.max(at(dr, dc).max_abs_diff(&base));
            }
        }
        worst
    }
}

pub mod flows {
    use dsmoe::flow::{SamplerConfig, Solver, VelocityField};
    use dsmoe::{Result, Tensor};

    /// `dx/dt = 0.5·x + 3t²`, integrated from `t = 1` to `t = 0`.
    pub struct Quadratic;

    impl VelocityField for Quadratic {
        fn velocity(&mut self, x: &Tensor, t: &[f64], _: &[usize]) -> Result<Tensor> {
            Ok(x.map(|v| 0.5 * v + 3.0 * t[0] * t[0]))
        }
        fn null_class(&self) -> usize {
            0
        }
    }

    /// Closed form of [`Quadratic`] at `t = 0` given `x(1) = x1`:
    /// `x(t) = −6t² − 24t − 48 + C·e^{t/2}`.
    pub fn quadratic_exact(x1: f64) -> f64 {
        let c = (x1 + 78.0) * (-0.5f64).exp();
        -48.0 + c
    }

    pub fn heun_error(steps: usize) -> f64 {
        let cfg = SamplerConfig {
            solver: Solver::Heun,
            steps,
            ..SamplerConfig::default()
        };
        let x1 = Tensor::new([1, 1], vec![0.7]).unwrap();
        let x0 = dsmoe::flow::integrate(&mut Quadratic, &x1, &[0], &cfg).unwrap();
        (x0.data()[0] - quadratic_exact(0.7)).abs()
    }
}

pub mod training {
    use dsmoe::config::ModelConfig;
    use dsmoe::train::checkpoint::{load_checkpoint, save_checkpoint};
    use dsmoe::train::{TrainConfig, Trainer};
    use std::path::Path;

    pub fn small_train(batch: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            lr: 1e-3,
            ema_decay: 0.9,
            ..TrainConfig::default()
        }
    }

    /// Outcome of training `k` steps, checkpointing, resuming in a fresh
    /// trainer and taking step `k + 1` both ways.
    pub struct Resume {
        pub continued: f64,
        pub resumed: f64,
        /// save → load → save produced identical bytes.
        pub bytes_stable: bool,
    }

    pub fn resume_check(model: ModelConfig, train: TrainConfig, k: usize, dir: &Path) -> dsmoe::Result<Resume> {
        let mut a = Trainer::new(model, train)?;
        for _ in 0..k {
            a.step()?;
        }
        let path = dir.join("resume.dsmk");
        save_checkpoint(&a.to_bundle(), &path)?;
        let first = std::fs::read(&path).expect("checkpoint written");
        let bundle = load_checkpoint(&path)?;
        let again = dir.join("resume2.dsmk");
        save_checkpoint(&bundle, &again)?;
        let second = std::fs::read(&again).expect("checkpoint written");
        let mut b = Trainer::from_bundle(&bundle)?;
        Ok(Resume {
            continued: a.step()?.loss,
            resumed: b.step()?.loss,
            bytes_stable: first == second,
        })
    }
}
