//! The two training objectives and their analytic gradients.
//!
//! Both objectives share one reparameterised draw `s = μ + σ·ε` per row.
//! Gradients are returned for *every* parameter group (the ELBO gradient
//! includes the prior parameters, the score-matching gradient the prior
//! parameters only); the trainer applies the stop-gradient split.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::mlp::{Mlp, Trace};
use super::Params;
use crate::seed;

pub(crate) const LOGVAR_MIN: f64 = -8.0;
pub(crate) const LOGVAR_MAX: f64 = 8.0;

/// A minibatch in model space: standardized rows plus subject indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub(crate) z: DMatrix<f64>,
    pub(crate) subjects: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn subjects(&self) -> &[usize] {
        &self.subjects
    }
}

/// The three ELBO terms, each averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// `E_q[log p(z | s)]`.
    pub reconstruction: f64,
    /// `E_q[log p̂(s | j)]` with the unnormalised prior.
    pub prior: f64,
    /// `−E_q[log q(s | z, j)]`.
    pub entropy: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.prior + self.entropy
    }
}

pub(crate) struct Evaluation {
    pub elbo: ElboTerms,
    pub score_matching: f64,
    pub elbo_grad: Params,
    pub sm_grad: Params,
}

/// Standard-normal noise for a batch, filled row by row.
pub(crate) fn draw_noise(rows: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(seed);
    let mut eps = DMatrix::zeros(rows, dim);
    for r in 0..rows {
        for c in 0..dim {
            eps[(r, c)] = StandardNormal.sample(&mut rng);
        }
    }
    eps
}

pub(crate) fn encoder_input(z: &DMatrix<f64>, subjects: &[usize], n_subjects: usize) -> DMatrix<f64> {
    let p = z.ncols();
    let mut x = DMatrix::zeros(z.nrows(), p + n_subjects);
    x.columns_mut(0, p).copy_from(z);
    for (r, &j) in subjects.iter().enumerate() {
        x[(r, p + j)] = 1.0;
    }
    x
}

/// Mean and clamped log-variance of `q(s | z, j)`, plus the raw encoder
/// trace for backpropagation.
pub(crate) fn encode(params: &Params, batch: &Batch) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Trace) {
    let d = params.latent_dim();
    let x = encoder_input(&batch.z, &batch.subjects, params.n_subjects());
    let trace = params.encoder.forward_traced(&x);
    let out = trace.output();
    let mu = out.columns(0, d).into_owned();
    let raw_lv = out.columns(d, d).into_owned();
    let lv = raw_lv.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
    (mu, raw_lv, lv, trace)
}

/// The prior's pieces for a batch of latents: value of `log p̂`, the
/// T_NN trace and the score `∂ log p̂ / ∂s`.
struct PriorEval {
    log_density: Vec<f64>,
    tnn_trace: Trace,
    /// Rows of `λ_NN(j)` (batch × k).
    lam_nn: DMatrix<f64>,
    score: DMatrix<f64>,
}

fn eval_prior(params: &Params, s: &DMatrix<f64>, subjects: &[usize]) -> PriorEval {
    let (b, d) = s.shape();
    let k = params.tnn.output_dim();
    let trace = params.tnn.forward_traced(s);
    let t = trace.output();
    let mut lam_nn = DMatrix::zeros(b, k);
    for (r, &j) in subjects.iter().enumerate() {
        for q in 0..k {
            lam_nn[(r, q)] = params.lambda[(j, 2 * d + q)];
        }
    }
    // ∂(λ_NN·T_NN)/∂s through the network.
    let mut scratch = Mlp::zeros_like(&params.tnn);
    let nn_score = params.tnn.backward(&trace, &lam_nn, &mut scratch);
    let log_q_const = -0.5 * d as f64 * (2.0 * PI).ln();
    let mut log_density = vec![0.0; b];
    let mut score = DMatrix::zeros(b, d);
    for (r, &j) in subjects.iter().enumerate() {
        let mut acc = log_q_const;
        for c in 0..d {
            let sv = s[(r, c)];
            let (l1, l2) = (params.lambda[(j, c)], params.lambda[(j, d + c)]);
            acc += -0.5 * sv * sv + l1 * sv + l2 * sv * sv;
            score[(r, c)] = -sv + l1 + 2.0 * l2 * sv + nn_score[(r, c)];
        }
        for q in 0..k {
            acc += lam_nn[(r, q)] * t[(r, q)];
        }
        log_density[r] = acc;
    }
    PriorEval {
        log_density,
        tnn_trace: trace,
        lam_nn,
        score,
    }
}

/// `log Q(s) + T(s)ᵀλ(j)` for one latent vector.
pub(crate) fn prior_log_density(params: &Params, s: &[f64], j: usize) -> f64 {
    let sm = DMatrix::from_row_slice(1, s.len(), s);
    eval_prior(params, &sm, &[j]).log_density[0]
}

/// Gradient of [`prior_log_density`] with respect to `s`.
pub(crate) fn prior_score(params: &Params, s: &[f64], j: usize) -> Vec<f64> {
    let sm = DMatrix::from_row_slice(1, s.len(), s);
    eval_prior(params, &sm, &[j]).score.row(0).iter().copied().collect()
}

/// Score-matching loss and its gradient for given latents (treated as
/// data). Used by [`evaluate`] and directly by prior-only fits.
pub(crate) fn score_matching_on(params: &Params, s: &DMatrix<f64>, subjects: &[usize]) -> (f64, Params) {
    let (b, d) = s.shape();
    let inv_b = 1.0 / b as f64;
    let prior = eval_prior(params, s, subjects);
    let g = &prior.score;
    let mut grad = Params::zeros_like(params);
    let mut loss = 0.0;
    for (r, &j) in subjects.iter().enumerate() {
        for c in 0..d {
            let l2 = params.lambda[(j, d + c)];
            let gv = g[(r, c)];
            // ReLU networks have zero second derivative almost everywhere,
            // so only the quadratic statistic contributes curvature.
            loss += -1.0 + 2.0 * l2 + 0.5 * gv * gv;
            grad.lambda[(j, c)] += gv * inv_b;
            grad.lambda[(j, d + c)] += (2.0 + 2.0 * gv * s[(r, c)]) * inv_b;
        }
    }
    // ½‖g‖² depends on the network through J_NN(s)ᵀλ_NN.
    let (tangents, jg) = params.tnn.tangent(&prior.tnn_trace, g);
    for (r, &j) in subjects.iter().enumerate() {
        for q in 0..jg.ncols() {
            grad.lambda[(j, 2 * d + q)] += jg[(r, q)] * inv_b;
        }
    }
    let r_out = &prior.lam_nn * inv_b;
    params
        .tnn
        .tangent_backward(&prior.tnn_trace, &tangents, &r_out, &mut grad.tnn);
    (loss * inv_b, grad)
}

/// Evaluate both objectives and all gradients for one batch with noise
/// `eps` (batch × latent_dim).
pub(crate) fn evaluate_with_noise(params: &Params, batch: &Batch, eps: &DMatrix<f64>) -> Evaluation {
    let (b, p) = batch.z.shape();
    let d = params.latent_dim();
    let inv_b = 1.0 / b as f64;
    let half_log_2pi = 0.5 * (2.0 * PI).ln();

    let (mu, raw_lv, lv, enc_trace) = encode(params, batch);
    let sigma = lv.map(|v| (0.5 * v).exp());
    let s = &mu + sigma.component_mul(eps);

    // Reconstruction.
    let dec_trace = params.decoder.forward_traced(&s);
    let m = dec_trace.output();
    let dlv: Vec<f64> = params
        .dec_logvar
        .iter()
        .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
        .collect();
    let mut grad = Params::zeros_like(params);
    let mut rec = 0.0;
    let mut dm = DMatrix::zeros(b, p);
    for r in 0..b {
        for i in 0..p {
            let resid = batch.z[(r, i)] - m[(r, i)];
            let prec = (-dlv[i]).exp();
            rec += -half_log_2pi - 0.5 * dlv[i] - 0.5 * resid * resid * prec;
            dm[(r, i)] = resid * prec * inv_b;
            if (LOGVAR_MIN..=LOGVAR_MAX).contains(&params.dec_logvar[i]) {
                grad.dec_logvar[i] += (-0.5 + 0.5 * resid * resid * prec) * inv_b;
            }
        }
    }
    let ds_rec = params.decoder.backward(&dec_trace, &dm, &mut grad.decoder);

    // Prior (its parameters get their true ELBO gradient here; the trainer
    // discards it).
    let prior = eval_prior(params, &s, &batch.subjects);
    let t = prior.tnn_trace.output();
    for (r, &j) in batch.subjects.iter().enumerate() {
        for c in 0..d {
            let sv = s[(r, c)];
            grad.lambda[(j, c)] += sv * inv_b;
            grad.lambda[(j, d + c)] += sv * sv * inv_b;
        }
        for q in 0..t.ncols() {
            grad.lambda[(j, 2 * d + q)] += t[(r, q)] * inv_b;
        }
    }
    let lam_scaled = &prior.lam_nn * inv_b;
    params.tnn.backward(&prior.tnn_trace, &lam_scaled, &mut grad.tnn);
    let prior_total: f64 = prior.log_density.iter().sum();

    // Entropy −log q(s) = Σ ½log2π + ½lv + ½ε².
    let mut ent = 0.0;
    for r in 0..b {
        for c in 0..d {
            ent += half_log_2pi + 0.5 * lv[(r, c)] + 0.5 * eps[(r, c)] * eps[(r, c)];
        }
    }

    // Back to the encoder through s = μ + σ·ε.
    let gs = ds_rec + &prior.score * inv_b;
    let mut enc_out = DMatrix::zeros(b, 2 * d);
    for r in 0..b {
        for c in 0..d {
            enc_out[(r, c)] = gs[(r, c)];
            let inside = (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw_lv[(r, c)]);
            if inside {
                enc_out[(r, d + c)] = gs[(r, c)] * 0.5 * sigma[(r, c)] * eps[(r, c)] + 0.5 * inv_b;
            }
        }
    }
    params.encoder.backward(&enc_trace, &enc_out, &mut grad.encoder);

    let (sm, sm_grad) = score_matching_on(params, &s, &batch.subjects);
    Evaluation {
        elbo: ElboTerms {
            reconstruction: rec * inv_b,
            prior: prior_total * inv_b,
            entropy: ent * inv_b,
        },
        score_matching: sm,
        elbo_grad: grad,
        sm_grad,
    }
}

pub(crate) fn evaluate(params: &Params, batch: &Batch, seed: u64) -> Evaluation {
    let eps = draw_noise(batch.len(), params.latent_dim(), seed);
    evaluate_with_noise(params, batch, &eps)
}
