//! PC skeleton search, capped at conditioning sets of size two.
//!
//! Starts from the complete graph. Level 0 removes unconditionally
//! independent pairs, level 1 pairs separated by one current neighbour of
//! either endpoint, level 2 pairs separated by two. Within a level every edge
//! is tested against the graph as it stood when the level began and removals
//! are applied together at the end, so the result does not depend on the
//! order in which edges are visited. No orientation step follows.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernelstats::{self, Conditioner, FeatureMap, NullConfig, SampleVector};
use crate::seed;

/// Largest conditioning set searched.
pub const MAX_LEVEL: usize = 2;

pub type Edge = (String, String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub nodes: Vec<String>,
    pub edges: BTreeSet<Edge>,
    pub separating_sets: BTreeMap<String, Vec<String>>,
}

fn edge(a: &str, b: &str) -> Edge {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Map key for a removed pair, `a|b` with `a < b` (JSON needs string keys).
pub fn pair_key(a: &str, b: &str) -> String {
    let (a, b) = edge(a, b);
    format!("{a}|{b}")
}

impl Skeleton {
    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.edges.contains(&edge(a, b))
    }

    pub fn separating_set(&self, a: &str, b: &str) -> Option<&[String]> {
        self.separating_sets.get(&pair_key(a, b)).map(|v| v.as_slice())
    }

    /// Edges whose endpoints both lie in `subset`.
    pub fn restricted_to(&self, subset: &[String]) -> BTreeSet<Edge> {
        self.edges
            .iter()
            .filter(|(a, b)| subset.contains(a) && subset.contains(b))
            .cloned()
            .collect()
    }

    /// One `a<TAB>b` line per edge, sorted, `a < b`.
    pub fn to_edge_list(&self) -> String {
        self.edges.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    pub fn parse_edge_list(text: &str) -> Result<BTreeSet<Edge>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| match l.split('\t').collect::<Vec<_>>().as_slice() {
                [a, b] => Ok(edge(a, b)),
                _ => Err(Error::InvalidArgument(format!("bad edge line `{l}`"))),
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }
}

fn subsets(pool: &[String], size: usize) -> Vec<Vec<String>> {
    match size {
        0 => vec![Vec::new()],
        1 => pool.iter().map(|c| vec![c.clone()]).collect(),
        2 => {
            let mut out = Vec::new();
            for i in 0..pool.len() {
                for j in (i + 1)..pool.len() {
                    out.push(vec![pool[i].clone(), pool[j].clone()]);
                }
            }
            out
        }
        _ => unreachable!("conditioning sets are capped at {MAX_LEVEL}"),
    }
}

fn test_seed(base: u64, a: &str, b: &str, cond: &[String]) -> u64 {
    let mut tags = vec!["pc", a, b];
    tags.extend(cond.iter().map(|s| s.as_str()));
    seed::derive(base, &tags)
}

/// First conditioning set (in lexicographic order) under which `a ⟂ b` is
/// not rejected at `alpha`, if any.
fn find_separator(
    data: &BTreeMap<String, SampleVector>,
    marg: &BTreeMap<String, FeatureMap>,
    (a, b): &Edge,
    sets: &[Vec<String>],
    alpha: f64,
    cfg: &NullConfig,
) -> Result<Option<Vec<String>>> {
    for set in sets {
        let c = cfg.with_seed(test_seed(cfg.seed, a, b, set));
        let r = if set.is_empty() {
            kernelstats::uncond_from_maps(&marg[a], &marg[b], &c)?
        } else {
            let zcols: Vec<&[f64]> = set.iter().map(|s| data[s].values()).collect();
            let cond = Conditioner::new(&zcols, cfg)?;
            let fa = cond.feature_map(data[a].values(), cfg)?;
            let fb = cond.feature_map(data[b].values(), cfg)?;
            kernelstats::cond_from_maps(&fa, &fb, &c)?
        };
        if r.pvalue > alpha {
            return Ok(Some(set.clone()));
        }
    }
    Ok(None)
}

/// Skeleton over all nodes in `data`, searching conditioning sets up to
/// size [`MAX_LEVEL`].
pub fn pc_skeleton(data: &BTreeMap<String, SampleVector>, alpha: f64, cfg: &NullConfig) -> Result<Skeleton> {
    pc_skeleton_to_level(data, alpha, cfg, MAX_LEVEL)
}

/// As [`pc_skeleton`] but stopping after `max_level` (≤ 2).
pub fn pc_skeleton_to_level(
    data: &BTreeMap<String, SampleVector>,
    alpha: f64,
    cfg: &NullConfig,
    max_level: usize,
) -> Result<Skeleton> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidArgument(
            "the skeleton search needs at least two nodes".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if max_level > MAX_LEVEL {
        return Err(Error::Config(format!("conditioning sets are capped at {MAX_LEVEL}")));
    }
    let n = data.values().next().map(|v| v.len()).unwrap_or(0);
    if let Some(v) = data.values().find(|v| v.len() != n) {
        return Err(Error::LengthMismatch(n, v.len()));
    }
    let std: BTreeMap<String, SampleVector> = data
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.standardize()?)))
        .collect::<Result<_>>()?;
    let marg: BTreeMap<String, FeatureMap> = std
        .iter()
        .map(|(k, v)| Ok((k.clone(), FeatureMap::marginal(&[v.values()], cfg)?)))
        .collect::<Result<_>>()?;
    let nodes: Vec<String> = std.keys().cloned().collect();
    let mut edges: BTreeSet<Edge> = BTreeSet::new();
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            edges.insert(edge(a, b));
        }
    }
    let mut separating_sets = BTreeMap::new();

    for level in 0..=max_level {
        let adj = |v: &str, edges: &BTreeSet<Edge>| -> BTreeSet<String> {
            edges
                .iter()
                .filter_map(|(a, b)| {
                    if a == v {
                        Some(b.clone())
                    } else if b == v {
                        Some(a.clone())
                    } else {
                        None
                    }
                })
                .collect()
        };
        let work: Vec<(Edge, Vec<Vec<String>>)> = edges
            .iter()
            .map(|e| {
                let mut pool: BTreeSet<String> = adj(&e.0, &edges);
                pool.extend(adj(&e.1, &edges));
                pool.remove(&e.0);
                pool.remove(&e.1);
                let pool: Vec<String> = pool.into_iter().collect();
                (e.clone(), subsets(&pool, level))
            })
            .filter(|(_, sets)| !sets.is_empty())
            .collect();
        if work.is_empty() {
            break;
        }
        let found: Vec<Option<(Edge, Vec<String>)>> = work
            .par_iter()
            .map(|(e, sets)| Ok(find_separator(&std, &marg, e, sets, alpha, cfg)?.map(|s| (e.clone(), s))))
            .collect::<Result<_>>()?;
        for (e, set) in found.into_iter().flatten() {
            edges.remove(&e);
            separating_sets.insert(pair_key(&e.0, &e.1), set);
        }
    }
    Ok(Skeleton {
        nodes,
        edges,
        separating_sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_random_scm, EdgeSpec, Heterogeneity, Mechanism, NodeSpec, Role, ScmSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn chain_data(n: usize, s: u64) -> BTreeMap<String, SampleVector> {
        let spec = ScmSpec {
            nodes: ["z1", "z2", "z3"]
                .iter()
                .map(|x| NodeSpec::new(x, Role::InNetwork, "z"))
                .collect(),
            edges: vec![
                EdgeSpec {
                    from: "z1".into(),
                    to: "z2".into(),
                    weight: 1.0,
                },
                EdgeSpec {
                    from: "z2".into(),
                    to: "z3".into(),
                    weight: 1.0,
                },
            ],
            mechanism: Mechanism::LinearGaussian,
            heterogeneity: Heterogeneity::default(),
            noise_scale: 1.0,
        };
        let ds = generate_random_scm(&spec, 1, n, s).unwrap();
        ds.nodes()
            .iter()
            .map(|k| (k.clone(), ds.sample_vector(0, k).unwrap()))
            .collect()
    }

    fn noise_data(k: usize, n: usize, s: u64) -> BTreeMap<String, SampleVector> {
        let mut rng = seed::rng(s);
        (0..k)
            .map(|i| {
                let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                (format!("v{i}"), SampleVector::new(v).unwrap())
            })
            .collect()
    }

    #[test]
    fn independent_pair_has_no_edge() {
        let sk = pc_skeleton(&noise_data(2, 300, 1), 0.05, &NullConfig::default()).unwrap();
        assert!(sk.edges.is_empty());
        assert_eq!(sk.separating_set("v0", "v1"), Some(&[][..]));
    }

    #[test]
    fn chain_skeleton_and_separator() {
        let sk = pc_skeleton(&chain_data(1000, 4), 0.05, &NullConfig::default()).unwrap();
        let want: BTreeSet<Edge> = [edge("z1", "z2"), edge("z2", "z3")].into_iter().collect();
        assert_eq!(sk.edges, want);
        assert_eq!(sk.separating_set("z3", "z1"), Some(&["z2".to_string()][..]));
        assert_eq!(sk.to_edge_list(), "z1\tz2\nz2\tz3\n");
        assert_eq!(Skeleton::parse_edge_list(&sk.to_edge_list()).unwrap(), sk.edges);
    }

    #[test]
    fn deterministic() {
        let d = chain_data(300, 8);
        let cfg = NullConfig::default().with_seed(5);
        assert_eq!(
            pc_skeleton(&d, 0.05, &cfg).unwrap(),
            pc_skeleton(&d, 0.05, &cfg).unwrap()
        );
    }

    #[test]
    fn rejects_bad_input() {
        let one = noise_data(1, 50, 1);
        assert!(pc_skeleton(&one, 0.05, &NullConfig::default()).is_err());
        let d = noise_data(2, 50, 1);
        assert!(pc_skeleton_to_level(&d, 0.05, &NullConfig::default(), 3).is_err());
        assert!(pc_skeleton(&d, 1.5, &NullConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn invariants_and_level0_monotonicity(s in 0u64..1000, k in 2usize..5) {
            // mix some dependence in
            let mut d = noise_data(k, 80, s);
            let v0 = d["v0"].values().to_vec();
            let v1: Vec<f64> = d["v1"].values().iter().zip(&v0).map(|(a, b)| a + 0.4 * b).collect();
            d.insert("v1".into(), SampleVector::new(v1).unwrap());
            let cfg = NullConfig::default().with_seed(s);
            let sk = pc_skeleton(&d, 0.05, &cfg).unwrap();
            for (a, b) in &sk.edges {
                prop_assert!(a < b && d.contains_key(a) && d.contains_key(b));
                prop_assert!(sk.separating_set(a, b).is_none());
            }
            for set in sk.separating_sets.values() {
                prop_assert!(set.len() <= MAX_LEVEL);
            }
            // An edge goes when p > α. A pair removed at α = 0.10 has
            // p > 0.10 > 0.01, so with a single level the α = 0.01 graph is a
            // subset of the α = 0.10 one.
            let lo = pc_skeleton_to_level(&d, 0.01, &cfg, 0).unwrap();
            let hi = pc_skeleton_to_level(&d, 0.10, &cfg, 0).unwrap();
            prop_assert!(lo.edges.is_subset(&hi.edges));
        }
    }
}
