//! Shared + routed expert feed-forward layer with sigmoid affinities,
//! bias-adjusted top-k selection and auxiliary-loss-free load balancing.
//!
//! Routing biases only influence *which* experts a token visits. Gate values
//! are always normalized from the raw affinities of the selected experts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_BIAS_RATE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    /// Shared experts applied to every token (0 or 1).
    pub shared: usize,
    /// Routed experts.
    pub routed: usize,
    /// Routed experts activated per token.
    pub active: usize,
    /// Intermediate width of every expert.
    pub intermediate: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.active == 0 || self.active > self.routed {
            return Err(Error::Config(format!(
                "need 1 <= activated ({}) <= routed ({})",
                self.active, self.routed
            )));
        }
        if self.shared > 1 {
            return Err(Error::Config(format!(
                "at most one shared expert supported, got {}",
                self.shared
            )));
        }
        if self.intermediate == 0 {
            return Err(Error::Config("expert intermediate width is zero".into()));
        }
        Ok(())
    }
}

/// Gated-activation FFN: `down(silu(u·gate) ⊙ (u·up))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    /// `[D×S]`
    pub gate: Tensor,
    /// `[D×S]`
    pub up: Tensor,
    /// `[S×D]`
    pub down: Tensor,
}

impl ExpertWeights {
    pub fn zeros(d: usize, s: usize) -> Self {
        Self {
            gate: Tensor::zeros([d, s]),
            up: Tensor::zeros([d, s]),
            down: Tensor::zeros([s, d]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ExpertVars {
        ExpertVars {
            gate: g.leaf(self.gate.clone(), trainable),
            up: g.leaf(self.up.clone(), trainable),
            down: g.leaf(self.down.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

/// Graph handles for one MoE layer.
#[derive(Clone, Debug)]
pub struct MoeVars {
    pub shared: Vec<ExpertVars>,
    pub routed: Vec<ExpertVars>,
    /// Expert centroids, `[N_r×D]`.
    pub centroids: Var,
}

/// Routing-only state of one MoE layer: the selection biases and the
/// per-expert token counts of the current balancing window.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    pub biases: Vec<f64>,
    pub rate: f64,
    loads: Vec<u64>,
    windows: u64,
}

impl RouterState {
    pub fn new(routed: usize, rate: f64) -> Self {
        Self {
            biases: vec![0.0; routed],
            rate,
            loads: vec![0; routed],
            windows: 0,
        }
    }

    pub fn routed(&self) -> usize {
        self.biases.len()
    }

    pub fn loads(&self) -> &[u64] {
        &self.loads
    }

    /// Completed balancing windows.
    pub fn windows(&self) -> u64 {
        self.windows
    }

    pub fn record(&mut self, selected: &[Vec<usize>]) {
        for token in selected {
            for &e in token {
                self.loads[e] += 1;
            }
        }
    }

    /// Sign-of-deviation bias step, then a fresh window.
    ///
    /// Overloaded experts (load above the window mean) lose `rate`,
    /// underloaded ones gain it; an expert exactly at the mean is left alone.
    pub fn update_bias(&mut self) {
        let total: u64 = self.loads.iter().sum();
        let n = self.loads.len() as u64;
        for (b, &load) in self.biases.iter_mut().zip(&self.loads) {
            // compare load against total/n without rounding
            match (load * n).cmp(&total) {
                std::cmp::Ordering::Greater => *b -= self.rate,
                std::cmp::Ordering::Less => *b += self.rate,
                std::cmp::Ordering::Equal => {}
            }
        }
        self.loads.fill(0);
        self.windows += 1;
    }
}

/// Population standard deviation of per-expert loads.
pub fn load_std(loads: &[u64]) -> f64 {
    if loads.is_empty() {
        return 0.0;
    }
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<u64>() as f64 / n;
    (loads.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Token-to-expert affinities `sigmoid(u · e_i)` for one token `u[D]`.
pub fn affinity(u: &Tensor, centroids: &Tensor) -> Result<Tensor> {
    let (n, d) = (centroids.shape()[0], centroids.as_matrix().1);
    if centroids.ndim() != 2 || u.numel() != d {
        return Err(Error::shape("affinity", u.shape(), centroids.shape()));
    }
    let s = (0..n)
        .map(|i| {
            let dot: f64 = centroids.row(i).iter().zip(u.data()).map(|(a, b)| a * b).sum();
            sigmoid(dot)
        })
        .collect();
    Tensor::new([n], s)
}

/// Indices of the `k` largest `s_i + b_i`, ties broken by lowest index,
/// returned in ascending index order.
pub fn select_topk(scores: &[f64], biases: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.len() != biases.len() {
        return Err(Error::shape("select_topk", &[scores.len()], &[biases.len()]));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::Routing(format!(
            "cannot select {k} of {} experts",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| scores[i] + biases[i];
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Gates `s_i / Σ_selected s_j`, one per selected expert.
pub fn gate_values(scores: &[f64], selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Routing("empty expert selection".into()));
    }
    let total: f64 = selected.iter().map(|&i| scores[i]).sum();
    Ok(selected.iter().map(|&i| scores[i] / total).collect())
}

/// Applies one expert to `u[D]` or to each row of `u[N×D]`.
pub fn expert_forward(u: &Tensor, w: &ExpertWeights) -> Result<Tensor> {
    let d = w.gate.shape()[0];
    if !u.numel().is_multiple_of(d) || u.as_matrix().1 != d {
        return Err(Error::shape("expert_forward", u.shape(), w.gate.shape()));
    }
    let mut g = Graph::new();
    let x = g.constant(u.reshape([u.numel() / d, d])?);
    let vars = w.bind(&mut g, false);
    let y = expert_graph(&mut g, x, &vars)?;
    g.value(y).reshape(u.shape().to_vec())
}

pub fn expert_graph(g: &mut Graph, x: Var, w: &ExpertVars) -> Result<Var> {
    let gate = g.matmul(x, w.gate)?;
    let gate = g.silu(gate);
    let up = g.matmul(x, w.up)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, w.down)
}

/// Shared plus gated routed expert outputs for `u[T×D]`, without the
/// residual. Returns the per-token selected expert indices and counts them
/// into `router`'s current window.
pub fn moe_experts(
    g: &mut Graph,
    u: Var,
    vars: &MoeVars,
    router: &mut RouterState,
    config: &MoeConfig,
) -> Result<(Var, Vec<Vec<usize>>)> {
    config.validate()?;
    if vars.routed.len() != config.routed
        || vars.shared.len() != config.shared
        || router.routed() != config.routed
    {
        return Err(Error::Config(format!(
            "MoE layer holds {} shared / {} routed experts and {} router slots, config wants {}/{}",
            vars.shared.len(),
            vars.routed.len(),
            router.routed(),
            config.shared,
            config.routed
        )));
    }
    let tokens = g.shape(u)[0];
    let et = g.transpose(vars.centroids)?;
    let logits = g.matmul(u, et)?;
    let scores = g.sigmoid(logits);

    let n_r = config.routed;
    let mut selected = Vec::with_capacity(tokens);
    let mut mask = vec![false; tokens * n_r];
    for t in 0..tokens {
        let row = g.value(scores).row(t);
        let pick = select_topk(row, &router.biases, config.active)?;
        for &e in &pick {
            mask[t * n_r + e] = true;
        }
        selected.push(pick);
    }
    let gates = g.masked_normalize(scores, &mask)?;

    let mut acc: Option<Var> = None;
    let mut accumulate = |g: &mut Graph, y: Var| -> Result<()> {
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
        Ok(())
    };
    for w in &vars.shared {
        let y = expert_graph(g, u, w)?;
        accumulate(g, y)?;
    }
    for (e, w) in vars.routed.iter().enumerate() {
        let rows: Vec<usize> = (0..tokens).filter(|&t| mask[t * n_r + e]).collect();
        if rows.is_empty() {
            continue;
        }
        let x = g.index_select(u, &rows)?;
        let y = expert_graph(g, x, w)?;
        let entries: Vec<(usize, usize)> = rows.iter().map(|&t| (t, e)).collect();
        let gv = g.gather_entries(gates, &entries)?;
        let y = g.scale_rows(y, gv)?;
        let y = g.scatter_add(y, &rows, tokens)?;
        accumulate(g, y)?;
    }
    router.record(&selected);
    let out = acc.ok_or_else(|| Error::Routing("no expert produced output".into()))?;
    Ok((out, selected))
}

/// `h = u + Σ shared(u) + Σ g·routed(u)` for every row of `u[T×D]`.
pub fn moe_forward(
    u: &Tensor,
    shared: &[ExpertWeights],
    routed: &[ExpertWeights],
    centroids: &Tensor,
    router: &mut RouterState,
    config: &MoeConfig,
) -> Result<(Tensor, Vec<Vec<usize>>)> {
    if u.ndim() != 2 || centroids.ndim() != 2 || centroids.shape()[1] != u.shape()[1] {
        return Err(Error::shape("moe_forward", u.shape(), centroids.shape()));
    }
    let mut g = Graph::new();
    let x = g.constant(u.clone());
    let vars = MoeVars {
        shared: shared.iter().map(|w| w.bind(&mut g, false)).collect(),
        routed: routed.iter().map(|w| w.bind(&mut g, false)).collect(),
        centroids: g.constant(centroids.clone()),
    };
    let (y, selected) = moe_experts(&mut g, x, &vars, router, config)?;
    let h = g.add(x, y)?;
    Ok((g.value(h).clone(), selected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_token_scores_half() {
        let c = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap();
        let u = Tensor::new([3], vec![0.0, 0.0, 5.0]).unwrap();
        assert_eq!(affinity(&u, &c).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn aligned_token_score() {
        let c = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]).unwrap();
        let u = Tensor::new([2], vec![2.0, 0.0]).unwrap();
        let s = affinity(&u, &c).unwrap();
        assert!((s.data()[0] - 0.982_013_790_037_908_5).abs() < 1e-12);
    }

    #[test]
    fn topk_tie_break_lowest_index() {
        let s = [0.9, 0.1, 0.5, 0.5];
        assert_eq!(select_topk(&s, &[0.0; 4], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_topk(&s, &[0.0; 4], 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(select_topk(&s, &[0.0; 4], 5).is_err());
    }

    #[test]
    fn bias_changes_selection_not_gate() {
        let s = [0.6, 0.5];
        let pick = select_topk(&s, &[-0.3, 0.0], 1).unwrap();
        assert_eq!(pick, vec![1]);
        assert_eq!(gate_values(&s, &pick).unwrap(), vec![1.0]);
        let s3 = [0.6, 0.5, 0.2];
        let pick = select_topk(&s3, &[-0.3, 0.0, 0.0], 2).unwrap();
        assert_eq!(pick, vec![0, 1]);
        let gates = gate_values(&s3, &pick).unwrap();
        assert!((gates[0] - 0.6 / 1.1).abs() < 1e-15);
        assert!((gates[1] - 0.5 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn gate_arithmetic() {
        assert_eq!(gate_values(&[0.5, 0.5], &[0, 1]).unwrap(), vec![0.5, 0.5]);
        let g = gate_values(&[0.6, 0.2], &[0, 1]).unwrap();
        assert!((g[0] - 0.75).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);
        assert_eq!(gate_values(&[0.3], &[0]).unwrap(), vec![1.0]);
        assert!(gate_values(&[0.3], &[]).is_err());
    }

    #[test]
    fn expert_scalar_case() {
        let w = ExpertWeights {
            gate: Tensor::ones([1, 1]),
            up: Tensor::ones([1, 1]),
            down: Tensor::ones([1, 1]),
        };
        let y = expert_forward(&Tensor::ones([1]), &w).unwrap();
        assert!((y.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let z = expert_forward(&Tensor::zeros([1]), &w).unwrap();
        assert_eq!(z.data(), &[0.0]);
    }

    #[test]
    fn bias_update_rule() {
        let mut r = RouterState::new(2, 0.01);
        r.record(&vec![vec![0]; 10]);
        r.update_bias();
        assert_eq!(r.biases, vec![-0.01, 0.01]);
        assert_eq!(r.loads(), &[0, 0]);
        assert_eq!(r.windows(), 1);

        let mut r = RouterState::new(3, 0.01);
        r.record(&[vec![0, 1], vec![1, 2], vec![0, 2]]);
        r.update_bias();
        assert_eq!(r.biases, vec![0.0; 3]);
    }

    #[test]
    fn degenerate_single_expert_is_plain_ffn() {
        let w = ExpertWeights {
            gate: Tensor::from_fn([2, 3], |i| 0.1 * i as f64),
            up: Tensor::from_fn([2, 3], |i| 0.2 - 0.05 * i as f64),
            down: Tensor::from_fn([3, 2], |i| 0.3 * i as f64 - 0.4),
        };
        let cfg = MoeConfig {
            shared: 0,
            routed: 1,
            active: 1,
            intermediate: 3,
        };
        let u = Tensor::from_fn([4, 2], |i| i as f64 * 0.25 - 0.5);
        let centroids = Tensor::ones([1, 2]);
        let mut router = RouterState::new(1, 0.01);
        let (h, sel) = moe_forward(&u, &[], std::slice::from_ref(&w), &centroids, &mut router, &cfg).unwrap();
        let ffn = expert_forward(&u, &w).unwrap();
        let expect = u.zip_with(&ffn, |a, b| a + b).unwrap();
        assert!(h.max_abs_diff(&expect) < 1e-15);
        assert!(sel.iter().all(|s| s == &[0]));
        assert_eq!(router.loads(), &[4]);
    }

    #[test]
    fn zero_routed_experts_leave_shared_path() {
        let d = 3;
        let shared = ExpertWeights {
            gate: Tensor::from_fn([d, 4], |i| (i as f64).sin()),
            up: Tensor::from_fn([d, 4], |i| (i as f64).cos()),
            down: Tensor::from_fn([4, d], |i| 0.1 * i as f64),
        };
        let routed = vec![ExpertWeights::zeros(d, 4); 4];
        let cfg = MoeConfig {
            shared: 1,
            routed: 4,
            active: 2,
            intermediate: 4,
        };
        let u = Tensor::from_fn([5, d], |i| (i as f64 * 0.7).sin());
        let centroids = Tensor::from_fn([4, d], |i| (i as f64 * 1.3).cos());
        let mut router = RouterState::new(4, 0.01);
        let (h, _) = moe_forward(&u, std::slice::from_ref(&shared), &routed, &centroids, &mut router, &cfg)
            .unwrap();
        let s = expert_forward(&u, &shared).unwrap();
        let expect = u.zip_with(&s, |a, b| a + b).unwrap();
        assert!(h.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn load_std_of_balanced_is_zero() {
        assert_eq!(load_std(&[3, 3, 3]), 0.0);
        assert!((load_std(&[10, 0]) - 5.0).abs() < 1e-15);
    }
}
