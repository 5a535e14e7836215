//! The two-confounder benchmark network.
//!
//! In-network nodes `z1…z5`; external nodes `s1…s5`:
//!
//! | label | role                                   |
//! |-------|----------------------------------------|
//! | `s1`  | mediator on `z2 → s1 → z5`             |
//! | `s2`  | confounder `c1`, parent of `z1`, `z2`  |
//! | `s3`  | collider child of `z1` and `z3`        |
//! | `s4`  | confounder `c2`, parent of `z3`, `z4`  |
//! | `s5`  | isolated node                          |
//!
//! Edges (base weights before per-subject jitter):
//!
//! ```text
//! s2 → z1  1.5     s2 → z2  1.5     s4 → z3  1.5     s4 → z4  1.5
//! z2 → z5  0.5     z4 → z5  0.5
//! z2 → s1  0.5     s1 → z5  0.5
//! z1 → s3  0.5     z3 → s3  0.5
//! ```
//!
//! The only edges among `z1…z5` are `z2–z5` and `z4–z5`. With the
//! confounders hidden, no subset of `z`'s separates `z1` from `z2` or `z3`
//! from `z4`, so a skeleton search over `z` alone keeps those two spurious
//! edges.
//!
//! Noise is unit-variance except for the mediator (sd 4) and the collider
//! (sd 3). Those two carry mostly their own noise, so a latent model of
//! `z` has no reason to track them. Each subject draws every edge weight
//! times `U[0.8, 1.25]`, and the two confounders' noise sd times a
//! log-uniform factor in `[0.5, 2]`. That per-subject variance change is
//! what lets a subject-conditioned latent model single the confounders out.

use super::generate_random_scm;
use super::scm::{EdgeSpec, Heterogeneity, Mechanism, NodeSpec, Role, ScmSpec};
use crate::dataset::SubjectDataset;
use crate::error::Result;

pub const IN_NETWORK: [&str; 5] = ["z1", "z2", "z3", "z4", "z5"];
pub const EXTERNAL: [&str; 5] = ["s1", "s2", "s3", "s4", "s5"];
pub const CONFOUNDERS: [&str; 2] = ["s2", "s4"];
pub const MEDIATOR: &str = "s1";
pub const COLLIDER: &str = "s3";
pub const ISOLATED: &str = "s5";

pub const IN_NETWORK_LABEL: &str = "z";
pub const EXTERNAL_LABEL: &str = "external";

const LOADING: f64 = 1.5;
const CHAIN: f64 = 0.5;

/// The benchmark specification.
pub fn fig2_spec(mechanism: Mechanism) -> ScmSpec {
    let z = |n: &str| NodeSpec::new(n, Role::InNetwork, IN_NETWORK_LABEL);
    let s = |n: &str| NodeSpec::new(n, Role::External, EXTERNAL_LABEL);
    let nodes = vec![
        z("z1"),
        z("z2"),
        z("z3"),
        z("z4"),
        z("z5"),
        s("s1").noise(4.0),
        s("s2").modulated(),
        s("s3").noise(3.0),
        s("s4").modulated(),
        s("s5"),
    ];
    let e = |from: &str, to: &str, weight: f64| EdgeSpec {
        from: from.into(),
        to: to.into(),
        weight,
    };
    let edges = vec![
        e("s2", "z1", LOADING),
        e("s2", "z2", LOADING),
        e("s4", "z3", LOADING),
        e("s4", "z4", LOADING),
        e("z2", "z5", CHAIN),
        e("z4", "z5", CHAIN),
        e("z2", "s1", CHAIN),
        e("s1", "z5", CHAIN),
        e("z1", "s3", CHAIN),
        e("z3", "s3", CHAIN),
    ];
    ScmSpec {
        nodes,
        edges,
        mechanism,
        heterogeneity: Heterogeneity {
            coef_jitter: (0.8, 1.25),
            source_scale: (0.5, 2.0),
        },
        noise_scale: 1.0,
    }
}

/// Sample the benchmark: `n_subjects` matrices of `n_samples × 10`.
pub fn generate_fig2_scm(
    n_subjects: usize,
    n_samples: usize,
    mechanism: Mechanism,
    seed: u64,
) -> Result<(SubjectDataset, ScmSpec)> {
    let spec = fig2_spec(mechanism);
    let ds = generate_random_scm(&spec, n_subjects, n_samples, seed)?;
    Ok((ds, spec))
}

pub fn in_network() -> Vec<String> {
    IN_NETWORK.iter().map(|s| s.to_string()).collect()
}

pub fn external() -> Vec<String> {
    EXTERNAL.iter().map(|s| s.to_string()).collect()
}

pub fn confounders() -> Vec<String> {
    CONFOUNDERS.iter().map(|s| s.to_string()).collect()
}
