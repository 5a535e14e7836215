//! Candidate screening.
//!
//! For every in-network pair `(zᵢ, zₖ)` and external candidate `l`, each
//! subject contributes one unconditional p-value (`zᵢ ⟂ zₖ`) and one
//! conditional p-value (`zᵢ ⟂ zₖ | l`). A confounder (or mediator) makes the
//! pair dependent but conditionally independent, so across subjects the
//! conditional p-values are larger. A candidate is admitted for a pair when a
//! two-sample KS test separates the two p-value vectors at level `alpha` and
//! the conditional mean is the larger one. Colliders fail the second
//! condition: conditioning on a common effect lowers the p-values.

mod ks;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SubjectDataset;
use crate::error::{Error, Result};
use crate::kernelstats::{self, Conditioner, FeatureMap, NullConfig, SampleVector};
use crate::seed;

pub use ks::{kolmogorov_sf, ks_two_sample, KsResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    /// KS level.
    pub alpha: f64,
    pub null: NullConfig,
    /// A profile with more than this fraction of skipped subjects is invalid.
    pub max_skip_fraction: f64,
    /// Apply Benjamini–Hochberg to the KS p-values of the whole grid.
    pub benjamini_hochberg: bool,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig {
            alpha: 0.05,
            null: NullConfig::default(),
            max_skip_fraction: 0.2,
            benjamini_hochberg: false,
        }
    }
}

/// Per-subject p-values for one (pair, candidate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestProfile {
    pub pair: (String, String),
    pub candidate: String,
    pub u_unc: Vec<f64>,
    pub u_cond: Vec<f64>,
    /// Ids of subjects left out because a series was degenerate.
    pub skipped: Vec<String>,
}

fn order_invariant_mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s.iter().sum::<f64>() / s.len() as f64
}

impl TestProfile {
    pub fn mean_unc(&self) -> f64 {
        order_invariant_mean(&self.u_unc)
    }

    pub fn mean_cond(&self) -> f64 {
        order_invariant_mean(&self.u_cond)
    }
}

/// KS comparison for one (pair, candidate), admitted or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvidence {
    pub candidate: String,
    pub pair_a: String,
    pub pair_b: String,
    pub ks_d: f64,
    pub ks_pvalue: f64,
    pub mean_unc: f64,
    pub mean_cond: f64,
    pub admitted: bool,
}

/// Screened candidates with the pairs that support them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: BTreeMap<String, Vec<PairEvidence>>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.candidates.keys().cloned().collect()
    }

    pub fn contains(&self, node: &str) -> bool {
        self.candidates.contains_key(node)
    }

    /// Rows `candidate,pair_a,pair_b,ks_pvalue,mean_unc,mean_cond`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["candidate", "pair_a", "pair_b", "ks_pvalue", "mean_unc", "mean_cond"])?;
        for ev in self.candidates.values().flatten() {
            w.write_record([
                ev.candidate.clone(),
                ev.pair_a.clone(),
                ev.pair_b.clone(),
                ev.ks_pvalue.to_string(),
                ev.mean_unc.to_string(),
                ev.mean_cond.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Everything screening produced: the admitted set plus the full grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningOutcome {
    pub candidates: CandidateSet,
    pub evaluations: Vec<PairEvidence>,
    pub profiles: Vec<TestProfile>,
}

fn canonical(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn unc_seed(base: u64, subject: &str, a: &str, b: &str) -> u64 {
    seed::derive(base, &["screen-unc", subject, a, b])
}

fn cond_seed(base: u64, subject: &str, a: &str, b: &str, l: &str) -> u64 {
    seed::derive(base, &["screen-cond", subject, a, b, l])
}

/// Smallest p-value screening distinguishes. The Monte Carlo nulls cannot
/// go below `1/(1 + draws)`; the gamma null is clipped to the same floor, so
/// that two p-values deep in the tail (say 1e-17 vs 1e-14) count as equal
/// instead of letting the KS test react to approximation noise.
pub fn pvalue_resolution(cfg: &NullConfig) -> f64 {
    let draws = match cfg.method {
        kernelstats::NullMethod::Permutation => cfg.n_permutations,
        _ => cfg.n_draws,
    };
    1.0 / (1.0 + draws as f64)
}

enum Entry {
    Ok(f64, f64),
    Skipped,
}

/// p-values for one subject, or `Skipped` if a series is degenerate.
fn subject_entry(ds: &SubjectDataset, j: usize, a: &str, b: &str, l: &str, cfg: &NullConfig) -> Result<Entry> {
    let id = &ds.subjects()[j].id;
    let std = |node: &str| -> Result<Option<SampleVector>> {
        match ds.sample_vector(j, node)?.standardize() {
            Ok(v) => Ok(Some(v)),
            Err(Error::DegenerateSample(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let (Some(xa), Some(xb), Some(xl)) = (std(a)?, std(b)?, std(l)?) else {
        log::warn!("subject {id}: degenerate series among {a}, {b}, {l}; skipped");
        return Ok(Entry::Skipped);
    };
    let fa = FeatureMap::marginal(&[xa.values()], cfg)?;
    let fb = FeatureMap::marginal(&[xb.values()], cfg)?;
    let unc = kernelstats::uncond_from_maps(&fa, &fb, &cfg.with_seed(unc_seed(cfg.seed, id, a, b)))?;
    let cond = Conditioner::new(&[xl.values()], cfg)?;
    let ca = cond.feature_map(xa.values(), cfg)?;
    let cb = cond.feature_map(xb.values(), cfg)?;
    let c = kernelstats::cond_from_maps(&ca, &cb, &cfg.with_seed(cond_seed(cfg.seed, id, a, b, l)))?;
    let floor = pvalue_resolution(cfg);
    Ok(Entry::Ok(unc.pvalue.max(floor), c.pvalue.max(floor)))
}

fn finish_profile(
    pair: (String, String),
    candidate: &str,
    entries: Vec<(String, Entry)>,
    max_skip_fraction: f64,
) -> Result<TestProfile> {
    let total = entries.len();
    let mut p = TestProfile {
        pair,
        candidate: candidate.to_string(),
        u_unc: Vec::with_capacity(total),
        u_cond: Vec::with_capacity(total),
        skipped: Vec::new(),
    };
    for (id, e) in entries {
        match e {
            Entry::Ok(u, c) => {
                p.u_unc.push(u);
                p.u_cond.push(c);
            }
            Entry::Skipped => p.skipped.push(id),
        }
    }
    if p.skipped.len() as f64 > max_skip_fraction * total as f64 || p.u_unc.is_empty() {
        return Err(Error::InvalidProfile {
            pair_a: p.pair.0,
            pair_b: p.pair.1,
            candidate: p.candidate,
            skipped: p.skipped.len(),
            total,
        });
    }
    Ok(p)
}

/// Per-subject unconditional and conditional p-values for one pair and one
/// candidate. Subject order is preserved.
pub fn collect_pair_profiles(
    ds: &SubjectDataset,
    pair: (&str, &str),
    candidate: &str,
    cfg: &ScreeningConfig,
) -> Result<TestProfile> {
    cfg.null.validate()?;
    for n in [pair.0, pair.1, candidate] {
        ds.node_index(n)?;
    }
    let (a, b) = canonical(pair.0, pair.1);
    let entries = (0..ds.n_subjects())
        .map(|j| {
            Ok((
                ds.subjects()[j].id.clone(),
                subject_entry(ds, j, &a, &b, candidate, &cfg.null)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    finish_profile((a, b), candidate, entries, cfg.max_skip_fraction)
}

/// Per-subject results for the whole grid, sharing feature maps.
struct SubjectGrid {
    id: String,
    /// unc p-value per pair (None if skipped)
    unc: Vec<Option<f64>>,
    /// cond p-value per (pair, candidate), pair-major
    cond: Vec<Option<f64>>,
}

fn subject_grid(
    ds: &SubjectDataset,
    j: usize,
    pairs: &[(String, String)],
    cands: &[String],
    cfg: &NullConfig,
) -> Result<SubjectGrid> {
    let id = ds.subjects()[j].id.clone();
    let floor = pvalue_resolution(cfg);
    let mut std_cache: HashMap<&str, Option<SampleVector>> = HashMap::new();
    for node in pairs
        .iter()
        .flat_map(|(a, b)| [a.as_str(), b.as_str()])
        .chain(cands.iter().map(|s| s.as_str()))
    {
        if std_cache.contains_key(node) {
            continue;
        }
        let v = match ds.sample_vector(j, node)?.standardize() {
            Ok(v) => Some(v),
            Err(Error::DegenerateSample(_)) => {
                log::warn!("subject {id}: node {node} is degenerate; dependent tests skipped");
                None
            }
            Err(e) => return Err(e),
        };
        std_cache.insert(node, v);
    }
    let mut marg: HashMap<&str, FeatureMap> = HashMap::new();
    let mut unc = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let (Some(xa), Some(xb)) = (&std_cache[a.as_str()], &std_cache[b.as_str()]) else {
            unc.push(None);
            continue;
        };
        for (name, v) in [(a.as_str(), xa), (b.as_str(), xb)] {
            if !marg.contains_key(name) {
                marg.insert(name, FeatureMap::marginal(&[v.values()], cfg)?);
            }
        }
        let r = kernelstats::uncond_from_maps(
            &marg[a.as_str()],
            &marg[b.as_str()],
            &cfg.with_seed(unc_seed(cfg.seed, &id, a, b)),
        )?;
        unc.push(Some(r.pvalue.max(floor)));
    }
    let mut cond = vec![None; pairs.len() * cands.len()];
    for (ci, l) in cands.iter().enumerate() {
        let Some(xl) = &std_cache[l.as_str()] else { continue };
        let conditioner = Conditioner::new(&[xl.values()], cfg)?;
        let mut cmaps: HashMap<&str, FeatureMap> = HashMap::new();
        for (pi, (a, b)) in pairs.iter().enumerate() {
            let (Some(xa), Some(xb)) = (&std_cache[a.as_str()], &std_cache[b.as_str()]) else {
                continue;
            };
            for (name, v) in [(a.as_str(), xa), (b.as_str(), xb)] {
                if !cmaps.contains_key(name) {
                    cmaps.insert(name, conditioner.feature_map(v.values(), cfg)?);
                }
            }
            let r = kernelstats::cond_from_maps(
                &cmaps[a.as_str()],
                &cmaps[b.as_str()],
                &cfg.with_seed(cond_seed(cfg.seed, &id, a, b, l)),
            )?;
            cond[pi * cands.len() + ci] = Some(r.pvalue.max(floor));
        }
    }
    Ok(SubjectGrid { id, unc, cond })
}

/// Benjamini–Hochberg adjusted p-values (step-up, monotone).
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adj = vec![0.0; m];
    let mut running = 1.0_f64;
    for (rank, &i) in idx.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        adj[i] = running.min(1.0);
    }
    adj
}

/// Screen `candidates` against every unordered pair of `z`.
///
/// Runs on the current rayon pool; results do not depend on the pool size.
pub fn screen_candidates(
    ds: &SubjectDataset,
    z: &[String],
    candidates: &[String],
    cfg: &ScreeningConfig,
) -> Result<ScreeningOutcome> {
    cfg.null.validate()?;
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0,1), got {}", cfg.alpha)));
    }
    for n in z.iter().chain(candidates) {
        ds.node_index(n)?;
    }
    if let Some(shared) = candidates.iter().find(|c| z.contains(c)) {
        return Err(Error::InvalidArgument(format!(
            "`{shared}` is both in-network and a candidate"
        )));
    }
    if ds.n_subjects() < 10 {
        log::warn!(
            "only {} subjects; the KS comparison has little power below 10",
            ds.n_subjects()
        );
    }
    let mut cands: Vec<String> = candidates.to_vec();
    cands.sort();
    cands.dedup();
    let mut pairs = Vec::new();
    for (i, a) in z.iter().enumerate() {
        for b in &z[i + 1..] {
            pairs.push(canonical(a, b));
        }
    }
    pairs.sort();
    pairs.dedup();
    if cands.is_empty() || pairs.is_empty() {
        return Ok(ScreeningOutcome {
            candidates: CandidateSet::default(),
            evaluations: Vec::new(),
            profiles: Vec::new(),
        });
    }

    let grids: Vec<SubjectGrid> = (0..ds.n_subjects())
        .into_par_iter()
        .map(|j| subject_grid(ds, j, &pairs, &cands, &cfg.null))
        .collect::<Result<_>>()?;

    let mut profiles = Vec::with_capacity(pairs.len() * cands.len());
    for (pi, pair) in pairs.iter().enumerate() {
        for (ci, l) in cands.iter().enumerate() {
            let entries = grids
                .iter()
                .map(|g| {
                    let e = match (g.unc[pi], g.cond[pi * cands.len() + ci]) {
                        (Some(u), Some(c)) => Entry::Ok(u, c),
                        _ => Entry::Skipped,
                    };
                    (g.id.clone(), e)
                })
                .collect();
            profiles.push(finish_profile(pair.clone(), l, entries, cfg.max_skip_fraction)?);
        }
    }

    let raw: Vec<KsResult> = profiles.iter().map(|p| ks_two_sample(&p.u_unc, &p.u_cond)).collect();
    let pvals: Vec<f64> = if cfg.benjamini_hochberg {
        benjamini_hochberg(&raw.iter().map(|r| r.pvalue).collect::<Vec<_>>())
    } else {
        raw.iter().map(|r| r.pvalue).collect()
    };
    let mut set = CandidateSet::default();
    let mut evaluations = Vec::with_capacity(profiles.len());
    for ((p, ks), pv) in profiles.iter().zip(&raw).zip(pvals) {
        let (mu, mc) = (p.mean_unc(), p.mean_cond());
        let admitted = pv < cfg.alpha && mu < mc;
        let ev = PairEvidence {
            candidate: p.candidate.clone(),
            pair_a: p.pair.0.clone(),
            pair_b: p.pair.1.clone(),
            ks_d: ks.d,
            ks_pvalue: pv,
            mean_unc: mu,
            mean_cond: mc,
            admitted,
        };
        if admitted {
            set.candidates.entry(p.candidate.clone()).or_default().push(ev.clone());
        }
        evaluations.push(ev);
    }
    Ok(ScreeningOutcome {
        candidates: set,
        evaluations,
        profiles,
    })
}
