//! Central finite-difference verification of the analytic gradients.

use serde::Serialize;

use super::objective::{draw_noise, evaluate_with_noise, Batch};
use super::{NfIvaeModel, Params};

/// Worst relative error found in one parameter group for one objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub objective: &'static str,
    pub group: String,
    pub n_checked: usize,
    pub max_rel_error: f64,
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps entries whose true
/// gradient is zero from being judged on rounding noise alone.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn group_of(name: &str) -> String {
    match name.split('.').next() {
        Some("decoder") if name == "decoder.logvar" => "decoder.logvar".into(),
        Some(g) => g.into(),
        None => name.into(),
    }
}

/// Compare analytic and central-difference gradients of the ELBO (every
/// parameter group) and of the score-matching loss (the groups it
/// depends on once the encoder is frozen) on one batch with fixed noise.
pub fn check_gradients(model: &NfIvaeModel, batch: &Batch, seed: u64, step: f64) -> Vec<GroupCheck> {
    let eps = draw_noise(batch.len(), model.latent_dim(), seed);
    let base = evaluate_with_noise(&model.params, batch, &eps);
    let shapes = model.params.shapes();
    let mut out: Vec<GroupCheck> = Vec::new();
    let mut record = |objective: &'static str, group: String, err: f64| {
        if let Some(g) = out.iter_mut().find(|g| g.objective == objective && g.group == group) {
            g.n_checked += 1;
            g.max_rel_error = g.max_rel_error.max(err);
        } else {
            out.push(GroupCheck {
                objective,
                group,
                n_checked: 1,
                max_rel_error: err,
            });
        }
    };
    let elbo_grad = base
        .elbo_grad
        .tensors()
        .into_iter()
        .map(<[f64]>::to_vec)
        .collect::<Vec<_>>();
    let sm_grad = base
        .sm_grad
        .tensors()
        .into_iter()
        .map(<[f64]>::to_vec)
        .collect::<Vec<_>>();
    let eval_at = |params: &Params| {
        let e = evaluate_with_noise(params, batch, &eps);
        (e.elbo.total(), e.score_matching)
    };
    for (t, (name, _, _)) in shapes.iter().enumerate() {
        let group = group_of(name);
        for i in 0..elbo_grad[t].len() {
            let mut plus = model.params.clone();
            plus.tensors_mut()[t][i] += step;
            let mut minus = model.params.clone();
            minus.tensors_mut()[t][i] -= step;
            let (ep, sp) = eval_at(&plus);
            let (em, sm) = eval_at(&minus);
            let num_elbo = (ep - em) / (2.0 * step);
            record("elbo", group.clone(), relative_error(elbo_grad[t][i], num_elbo, 1e-6));
            // Score matching treats the encoder's samples as data.
            if group != "encoder" {
                let num_sm = (sp - sm) / (2.0 * step);
                record(
                    "score_matching",
                    group.clone(),
                    relative_error(sm_grad[t][i], num_sm, 1e-6),
                );
            }
        }
    }
    out
}
