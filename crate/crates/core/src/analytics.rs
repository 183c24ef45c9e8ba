//! Expert-usage statistics from routing traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::model::DiTMoE;
use crate::tensor::Tensor;

/// Routing of one token through one MoE layer during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    /// Forward-pass counter (a sampler evaluation or a training step).
    pub step: u64,
    /// Ordinal among MoE layers.
    pub layer: usize,
    /// Image index inside the batch.
    pub image: usize,
    pub token: usize,
    pub class: usize,
    pub timestep: f64,
    pub experts: Vec<usize>,
}

pub const TRACE_HEADER: &str = "step,layer,image,token,class,timestep,experts";

/// Expands one forward's per-layer selections into token traces.
pub fn traces_from_routing(
    step: u64,
    routing: &[crate::model::LayerRouting],
    tokens: usize,
    classes: &[usize],
    t: &[f64],
) -> Vec<RoutingTrace> {
    let mut out = Vec::new();
    for layer in routing {
        for (row, sel) in layer.selected.iter().enumerate() {
            let image = row / tokens;
            out.push(RoutingTrace {
                step,
                layer: layer.moe_layer,
                image,
                token: row % tokens,
                class: classes[image],
                timestep: t[image],
                experts: sel.clone(),
            });
        }
    }
    out
}

/// Wraps a model so every forward pass is recorded.
pub struct TracingField<'a> {
    pub model: &'a mut DiTMoE,
    pub traces: Vec<RoutingTrace>,
    evals: u64,
}

impl<'a> TracingField<'a> {
    pub fn new(model: &'a mut DiTMoE) -> Self {
        Self {
            model,
            traces: Vec::new(),
            evals: 0,
        }
    }
}

impl VelocityField for TracingField<'_> {
    fn velocity(&mut self, x: &Tensor, t: &[f64], classes: &[usize]) -> Result<Tensor> {
        let out = self.model.forward(x, t, classes)?;
        let tokens = self.model.config().tokens();
        self.traces
            .extend(traces_from_routing(self.evals, &out.routing, tokens, classes, t));
        self.evals += 1;
        Ok(out.prediction)
    }

    fn null_class(&self) -> usize {
        self.model.config().num_classes
    }
}

pub fn write_traces(path: &Path, routed: usize, traces: &[RoutingTrace]) -> Result<()> {
    fs::write(path, format_traces(routed, traces)).map_err(|e| Error::io(path, e))
}

pub fn format_traces(routed: usize, traces: &[RoutingTrace]) -> String {
    let mut s = format!("# routed_experts={routed}\n{TRACE_HEADER}\n");
    for tr in traces {
        let experts: Vec<String> = tr.experts.iter().map(usize::to_string).collect();
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            tr.step,
            tr.layer,
            tr.image,
            tr.token,
            tr.class,
            tr.timestep,
            experts.join(";")
        )
        .expect("writing to a String");
    }
    s
}

/// Parses a trace file, returning the routed-expert count and the traces.
pub fn parse_traces(text: &str) -> Result<(usize, Vec<RoutingTrace>)> {
    let bad = |line: usize, msg: &str| Error::TraceFormat(format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate();
    let routed = match lines.next() {
        Some((_, l)) => l
            .strip_prefix("# routed_experts=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(1, "expected '# routed_experts=N'"))?,
        None => return Err(Error::EmptyTraces),
    };
    match lines.next() {
        Some((_, l)) if l == TRACE_HEADER => {}
        _ => return Err(bad(2, "missing trace header")),
    }
    let mut traces = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(i + 1, "expected 7 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
        let experts = f[6]
            .split(';')
            .map(&num)
            .collect::<Result<Vec<_>>>()?;
        if let Some(&e) = experts.iter().find(|&&e| e >= routed) {
            return Err(bad(i + 1, &format!("expert {e} out of range")));
        }
        traces.push(RoutingTrace {
            step: f[0].parse().map_err(|_| bad(i + 1, "bad step"))?,
            layer: num(f[1])?,
            image: num(f[2])?,
            token: num(f[3])?,
            class: num(f[4])?,
            timestep: f[5].parse().map_err(|_| bad(i + 1, "bad timestep"))?,
            experts,
        });
    }
    Ok((routed, traces))
}

pub fn read_traces(path: &Path) -> Result<(usize, Vec<RoutingTrace>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_traces(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsageReport {
    pub routed: usize,
    pub layers: Vec<usize>,
    pub classes: Vec<usize>,
    /// `[class][layer]`: distinct experts per image per forward pass,
    /// averaged over the class's images.
    pub distinct: Vec<Vec<f64>>,
    /// `[layer][expert]`: share of a class's tokens routed to the expert,
    /// averaged over classes. Rows sum to the number of active experts.
    pub frequency: Vec<Vec<f64>>,
    /// Experts never selected in any layer.
    pub unused: Vec<usize>,
}

pub fn analyze_usage(traces: &[RoutingTrace], routed: usize) -> Result<UsageReport> {
    if traces.is_empty() {
        return Err(Error::EmptyTraces);
    }
    let layers: Vec<usize> = traces.iter().map(|t| t.layer).collect::<BTreeSet<_>>().into_iter().collect();
    let classes: Vec<usize> = traces.iter().map(|t| t.class).collect::<BTreeSet<_>>().into_iter().collect();
    let li = |l: usize| layers.binary_search(&l).expect("collected above");
    let ci = |c: usize| classes.binary_search(&c).expect("collected above");

    // (layer, class, step, image) -> distinct experts
    let mut per_image: BTreeMap<(usize, usize, u64, usize), BTreeSet<usize>> = BTreeMap::new();
    let mut counts = vec![vec![vec![0u64; routed]; classes.len()]; layers.len()];
    let mut tokens = vec![vec![0u64; classes.len()]; layers.len()];
    for t in traces {
        let (l, c) = (li(t.layer), ci(t.class));
        per_image
            .entry((l, c, t.step, t.image))
            .or_default()
            .extend(t.experts.iter().copied());
        tokens[l][c] += 1;
        for &e in &t.experts {
            if e >= routed {
                return Err(Error::TraceFormat(format!("expert {e} out of range {routed}")));
            }
            counts[l][c][e] += 1;
        }
    }

    let mut sums = vec![vec![(0.0, 0u64); layers.len()]; classes.len()];
    for ((l, c, _, _), set) in &per_image {
        let s = &mut sums[*c][*l];
        s.0 += set.len() as f64;
        s.1 += 1;
    }
    let distinct = sums
        .iter()
        .map(|row| row.iter().map(|&(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect())
        .collect();

    let mut frequency = vec![vec![0.0; routed]; layers.len()];
    for l in 0..layers.len() {
        let seen: Vec<usize> = (0..classes.len()).filter(|&c| tokens[l][c] > 0).collect();
        for &c in &seen {
            for e in 0..routed {
                frequency[l][e] += counts[l][c][e] as f64 / tokens[l][c] as f64 / seen.len() as f64;
            }
        }
    }
    let unused = (0..routed)
        .filter(|&e| frequency.iter().all(|row| row[e] == 0.0))
        .collect();
    Ok(UsageReport {
        routed,
        layers,
        classes,
        distinct,
        frequency,
        unused,
    })
}

impl UsageReport {
    /// Class × layer table of distinct experts per image.
    pub fn distinct_csv(&self) -> String {
        let mut s = String::from(
            "# distinct routed experts activated per image in one forward pass, averaged over the images of each class\n",
        );
        let cols: Vec<String> = self.layers.iter().map(|l| format!("layer_{l}")).collect();
        writeln!(s, "class,{}", cols.join(",")).expect("string write");
        for (c, row) in self.classes.iter().zip(&self.distinct) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(s, "{c},{}", vals.join(",")).expect("string write");
        }
        s
    }

    /// Layer × expert table of activation frequencies.
    pub fn frequency_csv(&self) -> String {
        let mut s = String::from(
            "# fraction of each class's tokens routed to the expert, averaged over classes; each row sums to the active experts per token\n",
        );
        if !self.unused.is_empty() {
            let ids: Vec<String> = self.unused.iter().map(usize::to_string).collect();
            writeln!(s, "# unused expert: {}", ids.join(";")).expect("string write");
        }
        let cols: Vec<String> = (0..self.routed).map(|e| format!("expert_{e}")).collect();
        writeln!(s, "layer,{}", cols.join(",")).expect("string write");
        for (l, row) in self.layers.iter().zip(&self.frequency) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(s, "{l},{}", vals.join(",")).expect("string write");
        }
        s
    }

    /// Writes `usage_by_class.csv` and `usage_by_layer.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("usage_by_class.csv", self.distinct_csv()),
            ("usage_by_layer.csv", self.frequency_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trace(step: u64, image: usize, token: usize, class: usize, experts: Vec<usize>) -> RoutingTrace {
        RoutingTrace {
            step,
            layer: 0,
            image,
            token,
            class,
            timestep: 0.5,
            experts,
        }
    }

    #[test]
    fn fixed_routing_single_class() {
        let traces: Vec<_> = (0..10).map(|t| trace(0, t / 5, t % 5, 3, vec![0, 1])).collect();
        let r = analyze_usage(&traces, 4).unwrap();
        assert_eq!(r.distinct, vec![vec![2.0]]);
        assert_eq!(r.frequency, vec![vec![1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(r.unused, vec![2, 3]);
        assert!(r.frequency_csv().contains("# unused expert: 2;3"));
    }

    fn uniform_stream(seed: u64, n: usize) -> Vec<RoutingTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut e = sample(&mut rng, 16, 2).into_vec();
                e.sort();
                trace(0, i / 64, i % 64, i % 4, e)
            })
            .collect()
    }

    #[test]
    fn uniform_routing_frequencies() {
        // one expert's frequency has std ≈ 0.0033 at 1e4 tokens, so 0.01 is
        // about 3σ; the 1e5 stream leaves a ~10σ margin
        for (seed, n) in [(1, 10_000), (2, 100_000)] {
            let r = analyze_usage(&uniform_stream(seed, n), 16).unwrap();
            for f in &r.frequency[0] {
                assert!((f - 0.125).abs() < 0.01, "{f}");
            }
            assert!((r.frequency[0].iter().sum::<f64>() - 2.0).abs() < 1e-12);
            assert!(r.unused.is_empty());
        }
    }

    #[test]
    fn empty_traces_error() {
        assert!(matches!(analyze_usage(&[], 4), Err(Error::EmptyTraces)));
    }

    #[test]
    fn trace_text_round_trip() {
        let traces = vec![
            trace(0, 0, 0, 1, vec![0, 3]),
            RoutingTrace {
                timestep: 0.1 + 0.2,
                ..trace(7, 1, 2, 0, vec![1, 2])
            },
        ];
        let text = format_traces(4, &traces);
        assert_eq!(parse_traces(&text).unwrap(), (4, traces));
        assert!(parse_traces("# routed_experts=2\nstep,layer,image,token,class,timestep,experts\n0,0,0,0,0,0.5,5\n").is_err());
    }
}
