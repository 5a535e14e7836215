use super::*;
use crate::linalg;
use crate::Error;
use proptest::prelude::*;

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Brute-force d-separation: enumerate every simple undirected path and
/// check each interior node by the collider rule.
pub(crate) fn brute_force_dsep(spec: &ScmSpec, a: &str, b: &str, cond: &[String]) -> bool {
    if cond.iter().any(|c| c == a || c == b) {
        return true;
    }
    if a == b {
        return false;
    }
    let names = spec.node_names();
    let n = names.len();
    let idx = |s: &str| names.iter().position(|x| x == s).unwrap();
    let mut directed = vec![vec![false; n]; n];
    for e in &spec.edges {
        directed[idx(&e.from)][idx(&e.to)] = true;
    }
    let observed: Vec<bool> = names.iter().map(|x| cond.contains(x)).collect();
    let mut desc = vec![vec![false; n]; n];
    #[allow(clippy::needless_range_loop)]
    for s in 0..n {
        let mut stack = vec![s];
        desc[s][s] = true;
        while let Some(v) = stack.pop() {
            for w in 0..n {
                if directed[v][w] && !desc[s][w] {
                    desc[s][w] = true;
                    stack.push(w);
                }
            }
        }
    }
    let collider_ok = |m: usize| (0..n).any(|d| desc[m][d] && observed[d]);
    fn walk(
        path: &mut Vec<usize>,
        target: usize,
        n: usize,
        directed: &[Vec<bool>],
        observed: &[bool],
        collider_ok: &dyn Fn(usize) -> bool,
    ) -> bool {
        let last = *path.last().unwrap();
        if last == target {
            for w in path.windows(3) {
                let (p, m, q) = (w[0], w[1], w[2]);
                let collider = directed[p][m] && directed[q][m];
                if collider && !collider_ok(m) || !collider && observed[m] {
                    return false;
                }
            }
            return true;
        }
        for next in 0..n {
            if (directed[last][next] || directed[next][last]) && !path.contains(&next) {
                path.push(next);
                if walk(path, target, n, directed, observed, collider_ok) {
                    return true;
                }
                path.pop();
            }
        }
        false
    }
    let mut path = vec![idx(a)];
    !walk(&mut path, idx(b), n, &directed, &observed, &collider_ok)
}

fn collider() -> ScmSpec {
    ScmSpec {
        nodes: ["a", "m", "b"]
            .iter()
            .map(|n| NodeSpec::new(n, Role::InNetwork, "net"))
            .collect(),
        edges: vec![
            EdgeSpec {
                from: "a".into(),
                to: "m".into(),
                weight: 1.0,
            },
            EdgeSpec {
                from: "b".into(),
                to: "m".into(),
                weight: 1.0,
            },
        ],
        mechanism: Mechanism::LinearGaussian,
        heterogeneity: Heterogeneity::default(),
        noise_scale: 1.0,
    }
}

fn chain() -> ScmSpec {
    let mut s = collider();
    s.edges[1] = EdgeSpec {
        from: "m".into(),
        to: "b".into(),
        weight: 1.0,
    };
    s
}

#[test]
fn collider_examples() {
    let s = collider();
    assert!(d_separated(&s, "a", "b", &[]).unwrap());
    assert!(!d_separated(&s, "a", "b", &names(&["m"])).unwrap());
    assert!(matches!(d_separated(&s, "a", "x", &[]), Err(Error::UnknownNode(_))));
}

#[test]
fn chain_middle_separates() {
    let s = chain();
    assert!(!d_separated(&s, "a", "b", &[]).unwrap());
    assert!(d_separated(&s, "a", "b", &names(&["m"])).unwrap());
}

#[test]
fn fig2_shape() {
    let (ds, spec) = generate_fig2_scm(1, 8, Mechanism::LinearGaussian, 1).unwrap();
    assert_eq!(ds.n_subjects(), 1);
    assert_eq!(ds.subjects()[0].n_samples(), 8);
    assert_eq!(ds.n_nodes(), 10);
    assert_eq!(spec.nodes_with_role(Role::InNetwork), in_network());
    assert_eq!(spec.nodes_with_role(Role::External), external());
}

#[test]
fn fig2_d_separation_facts() {
    let spec = fig2_spec(Mechanism::LinearGaussian);
    // pairs confounded only by one external node
    for (a, b, c) in [("z1", "z2", "s2"), ("z3", "z4", "s4")] {
        assert!(!d_separated(&spec, a, b, &[]).unwrap());
        assert!(d_separated(&spec, a, b, &names(&[c])).unwrap());
        // hidden confounder: no subset of the other z's separates them
        let others: Vec<String> = in_network().into_iter().filter(|x| x != a && x != b).collect();
        for mask in 0..(1u32 << others.len()) {
            let cond: Vec<String> = others
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, x)| x.clone())
                .collect();
            assert!(!d_separated(&spec, a, b, &cond).unwrap());
        }
    }
    // the collider opens z1–z3
    assert!(d_separated(&spec, "z1", "z3", &[]).unwrap());
    assert!(!d_separated(&spec, "z1", "z3", &names(&[COLLIDER])).unwrap());
    // isolated node
    for z in IN_NETWORK {
        assert!(d_separated(&spec, z, ISOLATED, &[]).unwrap());
    }
    let zs = in_network();
    let sk = spec.skeleton_among(&zs);
    assert_eq!(
        sk.into_iter().collect::<Vec<_>>(),
        vec![("z2".into(), "z5".into()), ("z4".into(), "z5".into())]
    );
}

#[test]
fn linear_residual_uncorrelated_with_parents() {
    // Regress each node on its parents by least squares; the residual should
    // be uncorrelated with every parent.
    let spec = fig2_spec(Mechanism::LinearGaussian);
    let mut spec = spec;
    spec.heterogeneity = Heterogeneity::default();
    let ds = generate_random_scm(&spec, 1, 5000, 9).unwrap();
    for node in spec.node_names() {
        let parents = spec.parents(&node);
        if parents.is_empty() {
            continue;
        }
        let y = ds.series(0, &node).unwrap();
        let n = y.len();
        let x = nalgebra::DMatrix::from_fn(n, parents.len(), |t, k| ds.series(0, &parents[k]).unwrap()[t]);
        let yv = nalgebra::DVector::from_column_slice(y);
        let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * &yv)).unwrap();
        let resid: Vec<f64> = (&yv - &x * &beta).iter().copied().collect();
        for p in &parents {
            let r = linalg::pearson(&resid, ds.series(0, p).unwrap());
            assert!(r.abs() < 0.05, "{node} vs {p}: {r}");
        }
        // and the fitted weights are the generating ones
        for (k, p) in parents.iter().enumerate() {
            let w = spec.edges.iter().find(|e| &e.from == p && e.to == node).unwrap().weight;
            assert!((beta[k] - w).abs() < 0.1, "{node} ← {p}: {} vs {w}", beta[k]);
        }
    }
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let (a, _) = generate_fig2_scm(3, 20, Mechanism::MlpNonlinear, 5).unwrap();
    let (b, _) = generate_fig2_scm(3, 20, Mechanism::MlpNonlinear, 5).unwrap();
    let (c, _) = generate_fig2_scm(3, 20, Mechanism::MlpNonlinear, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn cyclic_spec_rejected() {
    let mut s = chain();
    s.edges.push(EdgeSpec {
        from: "b".into(),
        to: "a".into(),
        weight: 1.0,
    });
    assert!(matches!(generate_random_scm(&s, 1, 10, 0), Err(Error::CyclicSpec(_))));
}

#[test]
fn empty_edge_list_gives_independent_nodes() {
    let mut s = collider();
    s.edges.clear();
    let ds = generate_random_scm(&s, 1, 3000, 4).unwrap();
    let r = linalg::pearson(ds.series(0, "a").unwrap(), ds.series(0, "b").unwrap());
    assert!(r.abs() < 0.06, "{r}");
}

#[test]
fn confounder_scale_varies_across_subjects() {
    let (ds, _) = generate_fig2_scm(20, 400, Mechanism::LinearGaussian, 2).unwrap();
    let sds: Vec<f64> = (0..20).map(|j| linalg::std_dev(ds.series(j, "s2").unwrap())).collect();
    let lo = sds.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sds.iter().copied().fold(0.0, f64::max);
    assert!(hi / lo > 1.8, "{sds:?}");
}

#[test]
fn oracle_matches_brute_force_on_twenty_nodes() {
    let spec = random_dag_spec(20, 0.15, 77);
    let names = spec.node_names();
    let mut rng = crate::seed::rng(3);
    use rand::Rng;
    for _ in 0..150 {
        let a = &names[rng.random_range(0..20)];
        let b = &names[rng.random_range(0..20)];
        let cond: Vec<String> = names.iter().filter(|_| rng.random::<f64>() < 0.15).cloned().collect();
        assert_eq!(
            d_separated(&spec, a, b, &cond).unwrap(),
            brute_force_dsep(&spec, a, b, &cond),
            "{a} {b} {cond:?}"
        );
    }
}

proptest! {
    #[test]
    fn oracle_matches_brute_force_small(n in 2usize..=6, p in 0.0f64..0.9, s in 0u64..10_000, mask in 0u32..64, ia in 0usize..6, ib in 0usize..6) {
        let spec = random_dag_spec(n, p, s);
        let names = spec.node_names();
        let a = &names[ia % n];
        let b = &names[ib % n];
        let cond: Vec<String> = names.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, x)| x.clone()).collect();
        prop_assert_eq!(d_separated(&spec, a, b, &cond).unwrap(), brute_force_dsep(&spec, a, b, &cond));
        // symmetry
        prop_assert_eq!(d_separated(&spec, a, b, &cond).unwrap(), d_separated(&spec, b, a, &cond).unwrap());
    }

    #[test]
    fn random_dags_are_acyclic(n in 1usize..12, p in 0.0f64..1.0, s in 0u64..1000) {
        prop_assert!(random_dag_spec(n, p, s).validate().is_ok());
    }
}
