use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Subject, SubjectDataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    InNetwork,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    /// `x = Σ wₚ·parentₚ + noise`.
    LinearGaussian,
    /// `x = MLP(w ∘ parents) + noise` with one fixed random tanh layer per node.
    MlpNonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub role: Role,
    /// Network label written to `labels.csv`.
    pub network: String,
    /// Overrides the spec-wide noise scale.
    #[serde(default)]
    pub noise_scale: Option<f64>,
    /// Whether this node's noise scale is redrawn per subject.
    #[serde(default)]
    pub modulated: bool,
}

impl NodeSpec {
    pub fn new(name: &str, role: Role, network: &str) -> Self {
        NodeSpec {
            name: name.to_string(),
            role,
            network: network.to_string(),
            noise_scale: None,
            modulated: false,
        }
    }

    pub fn noise(mut self, scale: f64) -> Self {
        self.noise_scale = Some(scale);
        self
    }

    pub fn modulated(mut self) -> Self {
        self.modulated = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub weight: f64,
}

/// Per-subject variation. Every edge weight is multiplied by a factor drawn
/// uniformly from `coef_jitter`; every modulated node's noise scale by a
/// factor drawn log-uniformly from `source_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    pub coef_jitter: (f64, f64),
    pub source_scale: (f64, f64),
}

impl Default for Heterogeneity {
    fn default() -> Self {
        Heterogeneity {
            coef_jitter: (1.0, 1.0),
            source_scale: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
    pub mechanism: Mechanism,
    pub heterogeneity: Heterogeneity,
    pub noise_scale: f64,
}

impl ScmSpec {
    pub fn node_names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.name.clone()).collect()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn nodes_with_role(&self, role: Role) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.role == role)
            .map(|n| n.name.clone())
            .collect()
    }

    pub fn parents(&self, node: &str) -> Vec<String> {
        self.edges
            .iter()
            .filter(|e| e.to == node)
            .map(|e| e.from.clone())
            .collect()
    }

    pub fn children(&self, node: &str) -> Vec<String> {
        self.edges
            .iter()
            .filter(|e| e.from == node)
            .map(|e| e.to.clone())
            .collect()
    }

    /// Node indices in an order where every parent precedes its children
    /// (Kahn's algorithm, ties broken by declaration order).
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.edges {
            let (f, t) = (self.index(&e.from)?, self.index(&e.to)?);
            if f == t {
                return Err(Error::CyclicSpec(e.from.clone()));
            }
            indeg[t] += 1;
            kids[f].push(t);
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &k in &kids[i] {
                indeg[k] -= 1;
                if indeg[k] == 0 {
                    ready.insert(k);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).expect("some node is on a cycle");
            return Err(Error::CyclicSpec(self.nodes[stuck].name.clone()));
        }
        Ok(order)
    }

    /// Structural checks: known endpoints, no duplicate nodes or edges, acyclic.
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(&n.name) {
                return Err(Error::InvalidArgument(format!("duplicate node `{}`", n.name)));
            }
            if let Some(s) = n.noise_scale {
                if !(s > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "noise scale of `{}` must be positive",
                        n.name
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if !seen.insert((&e.from, &e.to)) {
                return Err(Error::InvalidArgument(format!("duplicate edge {}→{}", e.from, e.to)));
            }
        }
        if !(self.noise_scale > 0.0) {
            return Err(Error::InvalidArgument("noise scale must be positive".into()));
        }
        let (lo, hi) = self.heterogeneity.coef_jitter;
        let (slo, shi) = self.heterogeneity.source_scale;
        if !(lo > 0.0 && lo <= hi && slo > 0.0 && slo <= shi) {
            return Err(Error::InvalidArgument(
                "heterogeneity ranges must be positive and ordered".into(),
            ));
        }
        self.topological_order().map(|_| ())
    }

    /// Undirected adjacency among `subset` (pairs sorted, `a < b`).
    pub fn skeleton_among(&self, subset: &[String]) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .filter(|e| subset.contains(&e.from) && subset.contains(&e.to))
            .map(|e| {
                if e.from < e.to {
                    (e.from.clone(), e.to.clone())
                } else {
                    (e.to.clone(), e.from.clone())
                }
            })
            .collect()
    }
}

/// A small fixed random network standing in for one nonlinear mechanism.
struct NodeMlp {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

const MLP_HIDDEN: usize = 8;

impl NodeMlp {
    fn new(n_in: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let s1 = 1.0 / (n_in as f64).sqrt();
        let w1 = (0..MLP_HIDDEN)
            .map(|_| (0..n_in).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let b1 = (0..MLP_HIDDEN)
            .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let s2 = 2.0 / (MLP_HIDDEN as f64).sqrt();
        let w2 = (0..MLP_HIDDEN)
            .map(|_| s2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        NodeMlp { w1, b1, w2 }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .map(|((row, b), w)| w * (row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b).tanh())
            .sum()
    }
}

/// Ancestral sampling of `n_subjects` independent subjects.
pub fn generate_random_scm(spec: &ScmSpec, n_subjects: usize, n_samples: usize, seed: u64) -> Result<SubjectDataset> {
    spec.validate()?;
    if n_subjects == 0 || n_samples < crate::kernelstats::MIN_TEST_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need ≥ 1 subject and ≥ {} samples",
            crate::kernelstats::MIN_TEST_SAMPLES
        )));
    }
    let order = spec.topological_order()?;
    let n = spec.nodes.len();
    let parent_edges: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| {
            spec.edges
                .iter()
                .enumerate()
                .filter(|(_, e)| e.to == spec.nodes[i].name)
                .map(|(k, e)| (k, spec.index(&e.from).expect("validated")))
                .collect()
        })
        .collect();
    let mlps: Vec<Option<NodeMlp>> = (0..n)
        .map(|i| match spec.mechanism {
            Mechanism::MlpNonlinear if !parent_edges[i].is_empty() => Some(NodeMlp::new(
                parent_edges[i].len(),
                seed::derive(seed, &["mlp", &spec.nodes[i].name]),
            )),
            _ => None,
        })
        .collect();

    let subjects: Vec<Subject> = (0..n_subjects)
        .into_par_iter()
        .map(|j| {
            let id = format!("{j:03}");
            let mut hrng = seed::derive_rng(seed, &["heterogeneity", &id]);
            let (lo, hi) = spec.heterogeneity.coef_jitter;
            let weights: Vec<f64> = spec
                .edges
                .iter()
                .map(|e| {
                    e.weight
                        * if hi > lo {
                            hrng.sample(Uniform::new(lo, hi).expect("ordered"))
                        } else {
                            lo
                        }
                })
                .collect();
            let (slo, shi) = spec.heterogeneity.source_scale;
            let noise: Vec<f64> = spec
                .nodes
                .iter()
                .map(|nd| {
                    let base = nd.noise_scale.unwrap_or(spec.noise_scale);
                    if nd.modulated && shi > slo {
                        base * hrng.sample(Uniform::new(slo.ln(), shi.ln()).expect("ordered")).exp()
                    } else if nd.modulated {
                        base * slo
                    } else {
                        base
                    }
                })
                .collect();
            let mut rng = seed::derive_rng(seed, &["noise", &id]);
            let mut cols = vec![vec![0.0; n_samples]; n];
            let mut inputs = Vec::new();
            #[allow(clippy::needless_range_loop)]
            for t in 0..n_samples {
                for &i in &order {
                    let eps: f64 = Normal::new(0.0, noise[i]).expect("positive").sample(&mut rng);
                    let signal = match &mlps[i] {
                        None => parent_edges[i]
                            .iter()
                            .map(|&(k, p)| weights[k] * cols[p][t])
                            .sum::<f64>(),
                        Some(mlp) => {
                            inputs.clear();
                            inputs.extend(parent_edges[i].iter().map(|&(k, p)| weights[k] * cols[p][t]));
                            mlp.eval(&inputs)
                        }
                    };
                    cols[i][t] = signal + eps;
                }
            }
            Subject::new(id, cols)
        })
        .collect();

    SubjectDataset::new(
        spec.node_names(),
        spec.nodes.iter().map(|nd| nd.network.clone()).collect(),
        subjects,
    )
}

/// Random DAG over `n` nodes named `v0…`: each forward pair (in a random
/// order) gets an edge with probability `p`, weight magnitude in [0.5, 1.5]
/// with a random sign.
pub fn random_dag_spec(n: usize, p: f64, seed: u64) -> ScmSpec {
    let mut rng = seed::rng(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let nodes = (0..n)
        .map(|i| NodeSpec::new(&format!("v{i}"), Role::InNetwork, "net"))
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if rng.random::<f64>() < p {
                let mag = rng.random_range(0.5..1.5);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                edges.push(EdgeSpec {
                    from: format!("v{}", perm[a]),
                    to: format!("v{}", perm[b]),
                    weight: sign * mag,
                });
            }
        }
    }
    ScmSpec {
        nodes,
        edges,
        mechanism: Mechanism::LinearGaussian,
        heterogeneity: Heterogeneity::default(),
        noise_scale: 1.0,
    }
}

/// Whether `a` and `b` are d-separated given `cond` in the DAG of `spec`.
///
/// Reachability over (node, direction) states: a trail may pass a
/// non-collider only if it is unobserved, and a collider only if it or one of
/// its descendants is observed. A node in `cond` is separated from
/// everything; a node is never separated from itself.
pub fn d_separated(spec: &ScmSpec, a: &str, b: &str, cond: &[String]) -> Result<bool> {
    let n = spec.nodes.len();
    let ia = spec.index(a)?;
    let ib = spec.index(b)?;
    let mut observed = vec![false; n];
    for c in cond {
        observed[spec.index(c)?] = true;
    }
    if observed[ia] || observed[ib] {
        return Ok(true);
    }
    if ia == ib {
        return Ok(false);
    }
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &spec.edges {
        let (f, t) = (spec.index(&e.from)?, spec.index(&e.to)?);
        parents[t].push(f);
        children[f].push(t);
    }
    // observed nodes and their ancestors
    let mut anc = observed.clone();
    let mut stack: Vec<usize> = (0..n).filter(|&i| observed[i]).collect();
    while let Some(v) = stack.pop() {
        for &p in &parents[v] {
            if !anc[p] {
                anc[p] = true;
                stack.push(p);
            }
        }
    }
    // direction: true = arrived from a child (travelling up)
    let mut visited: HashSet<(usize, bool)> = HashSet::new();
    let mut queue = vec![(ia, true)];
    while let Some((v, up)) = queue.pop() {
        if !visited.insert((v, up)) {
            continue;
        }
        if v == ib {
            return Ok(false);
        }
        if up {
            if !observed[v] {
                queue.extend(parents[v].iter().map(|&p| (p, true)));
                queue.extend(children[v].iter().map(|&c| (c, false)));
            }
        } else {
            if !observed[v] {
                queue.extend(children[v].iter().map(|&c| (c, false)));
            }
            if anc[v] {
                queue.extend(parents[v].iter().map(|&p| (p, true)));
            }
        }
    }
    Ok(true)
}
