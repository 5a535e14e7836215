//! Non-factorised identifiable VAE over the in-network nodes, conditioned
//! on the subject index.
//!
//! The generative side is `p(z | s)`: a Gaussian whose mean comes from a tanh
//! decoder and whose per-dimension log-variance is a free parameter. The
//! latent prior is an exponential family with a standard-normal base measure,
//!
//! ```text
//! log p̂(s | j) = log N(s; 0, I) + T(s)ᵀ λ(j),   T(s) = [s, s², T_NN(s)],
//! ```
//!
//! where `T_NN` is a ReLU network and `λ` is a table with one row per
//! subject. The normaliser is intractable because of `T_NN`, so the prior is
//! fitted by score matching, and the encoder/decoder are fitted by the ELBO
//! with the prior frozen. The two losses touch disjoint parameter groups and
//! are minimised jointly with Adam.

mod checkpoint;
mod gradcheck;
mod mlp;
mod objective;

use std::io::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::SubjectDataset;
use crate::error::{Error, Result};
use crate::seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, relative_error, GroupCheck};
pub use mlp::{Activation, Mlp};
pub use objective::{Batch, ElboTerms};

/// Hidden layers allowed per network.
pub const MAX_HIDDEN_LAYERS: usize = 3;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NfIvaeConfig {
    /// Number of latent dimensions; the pipeline sets this to the number of
    /// screened candidates.
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// Hidden widths of the ReLU sufficient-statistic network.
    pub tnn_widths: Vec<usize>,
    /// Output dimension of the sufficient-statistic network.
    pub tnn_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub score_match_weight: f64,
}

impl Default for NfIvaeConfig {
    fn default() -> Self {
        NfIvaeConfig {
            latent_dim: 2,
            encoder_widths: vec![32],
            decoder_widths: vec![32],
            tnn_widths: vec![16],
            tnn_dim: 4,
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 256,
            seed: 0,
            score_match_weight: 1.0,
        }
    }
}

impl NfIvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be ≥ 1".into()));
        }
        for (name, widths) in [
            ("encoder_widths", &self.encoder_widths),
            ("decoder_widths", &self.decoder_widths),
            ("tnn_widths", &self.tnn_widths),
        ] {
            if widths.is_empty() || widths.len() > MAX_HIDDEN_LAYERS {
                return Err(Error::Config(format!(
                    "{name} must list 1..={MAX_HIDDEN_LAYERS} hidden layer sizes"
                )));
            }
            if widths.contains(&0) {
                return Err(Error::Config(format!("{name} entries must be ≥ 1")));
            }
        }
        if self.tnn_dim == 0 {
            return Err(Error::Config("tnn_dim must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.score_match_weight > 0.0) || !self.score_match_weight.is_finite() {
            return Err(Error::Config("score_match_weight must be positive".into()));
        }
        Ok(())
    }

    /// Dimension of the full sufficient statistic `T(s)`.
    pub fn stat_dim(&self) -> usize {
        2 * self.latent_dim + self.tnn_dim
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `(z, onehot(j)) → (μ, log σ²)`.
    pub(crate) encoder: Mlp,
    /// `s → mean of z`.
    pub(crate) decoder: Mlp,
    /// Per-dimension log-variance of `p(z | s)`.
    pub(crate) dec_logvar: DVector<f64>,
    /// ReLU sufficient-statistic network `s → T_NN(s)`.
    pub(crate) tnn: Mlp,
    /// Natural parameters, one row per subject: `[λ₁ (d), λ₂ (d), λ_NN (k)]`.
    pub(crate) lambda: DMatrix<f64>,
}

impl Params {
    fn init(cfg: &NfIvaeConfig, n_observed: usize, n_subjects: usize) -> Params {
        let d = cfg.latent_dim;
        let mut rng = seed::derive_rng(cfg.seed, &["nfivae-init"]);
        let sizes = |input: usize, hidden: &[usize], output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(output);
            v
        };
        let encoder = Mlp::new(
            &sizes(n_observed + n_subjects, &cfg.encoder_widths, 2 * d),
            Activation::Tanh,
            &mut rng,
        );
        let decoder = Mlp::new(&sizes(d, &cfg.decoder_widths, n_observed), Activation::Tanh, &mut rng);
        let tnn = Mlp::new(&sizes(d, &cfg.tnn_widths, cfg.tnn_dim), Activation::Relu, &mut rng);
        Params {
            encoder,
            decoder,
            dec_logvar: DVector::zeros(n_observed),
            tnn,
            lambda: DMatrix::zeros(n_subjects, cfg.stat_dim()),
        }
    }

    pub(crate) fn zeros_like(other: &Params) -> Params {
        Params {
            encoder: Mlp::zeros_like(&other.encoder),
            decoder: Mlp::zeros_like(&other.decoder),
            dec_logvar: DVector::zeros(other.dec_logvar.len()),
            tnn: Mlp::zeros_like(&other.tnn),
            lambda: DMatrix::zeros(other.lambda.nrows(), other.lambda.ncols()),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn n_subjects(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn n_observed(&self) -> usize {
        self.dec_logvar.len()
    }

    /// Tensors in a fixed order, grouped as encoder, decoder, decoder
    /// log-variance, T_NN, λ.
    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        out.extend(self.decoder.tensors());
        out.push(self.dec_logvar.as_slice());
        out.extend(self.tnn.tensors());
        out.push(self.lambda.as_slice());
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        out.push(self.dec_logvar.as_mut_slice());
        out.extend(self.tnn.tensors_mut());
        out.push(self.lambda.as_mut_slice());
        out
    }

    /// `(name, rows, cols)` per tensor, matching `tensors()`.
    pub(crate) fn shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (prefix, net) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            out.extend(
                net.shapes()
                    .into_iter()
                    .map(|(n, r, c)| (format!("{prefix}.{n}"), r, c)),
            );
        }
        out.push(("decoder.logvar".into(), self.dec_logvar.len(), 1));
        out.extend(
            self.tnn
                .shapes()
                .into_iter()
                .map(|(n, r, c)| (format!("tnn.{n}"), r, c)),
        );
        out.push(("lambda".into(), self.lambda.nrows(), self.lambda.ncols()));
        out
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// A trained (or freshly initialised) model.
#[derive(Debug, Clone, PartialEq)]
pub struct NfIvaeModel {
    pub(crate) config: NfIvaeConfig,
    pub(crate) nodes: Vec<String>,
    /// Per-node location and scale used to standardize inputs.
    pub(crate) z_mean: Vec<f64>,
    pub(crate) z_scale: Vec<f64>,
    pub(crate) params: Params,
}

impl NfIvaeModel {
    /// A freshly initialised model for data with the given node names and
    /// subject count; inputs are assumed already standardized.
    pub fn initialize(cfg: &NfIvaeConfig, nodes: Vec<String>, n_subjects: usize) -> Result<NfIvaeModel> {
        cfg.validate()?;
        if nodes.is_empty() || n_subjects == 0 {
            return Err(Error::InvalidArgument("model needs ≥ 1 node and ≥ 1 subject".into()));
        }
        let p = nodes.len();
        Ok(NfIvaeModel {
            config: cfg.clone(),
            params: Params::init(cfg, p, n_subjects),
            nodes,
            z_mean: vec![0.0; p],
            z_scale: vec![1.0; p],
        })
    }

    pub fn config(&self) -> &NfIvaeConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn latent_dim(&self) -> usize {
        self.params.latent_dim()
    }

    pub fn n_subjects(&self) -> usize {
        self.params.n_subjects()
    }

    pub fn n_observed(&self) -> usize {
        self.params.n_observed()
    }

    /// Natural-parameter row `λ(j)`.
    pub fn lambda(&self, subject: usize) -> Vec<f64> {
        self.params.lambda.row(subject).iter().copied().collect()
    }

    /// Replace `λ(j)`; the row must have length `2·latent_dim + tnn_dim`.
    pub fn set_lambda(&mut self, subject: usize, row: &[f64]) -> Result<()> {
        let want = self.params.lambda.ncols();
        if row.len() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                got: row.len(),
            });
        }
        self.params.lambda.row_mut(subject).copy_from_slice(row);
        Ok(())
    }

    /// Zero every weight and bias of `T_NN`, reducing the prior to its
    /// factorised quadratic part.
    pub fn zero_tnn(&mut self) {
        for t in self.params.tnn.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// Force the decoder log-variance (before clamping) for every dimension.
    pub fn set_decoder_logvar(&mut self, value: f64) {
        self.params.dec_logvar.fill(value);
    }

    /// Standardize raw rows (samples × nodes) into model space.
    pub fn batch(&self, rows: &DMatrix<f64>, subjects: &[usize]) -> Result<Batch> {
        if rows.ncols() != self.n_observed() {
            return Err(Error::DimensionMismatch {
                expected: self.n_observed(),
                got: rows.ncols(),
            });
        }
        if rows.nrows() != subjects.len() {
            return Err(Error::LengthMismatch(rows.nrows(), subjects.len()));
        }
        if let Some(&bad) = subjects.iter().find(|&&j| j >= self.n_subjects()) {
            return Err(Error::InvalidArgument(format!(
                "subject index {bad} out of range for {} subjects",
                self.n_subjects()
            )));
        }
        let mut z = rows.clone();
        for (c, mut col) in z.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.z_mean[c]) / self.z_scale[c]);
        }
        Ok(Batch {
            z,
            subjects: subjects.to_vec(),
        })
    }

    /// Posterior means for raw rows.
    pub fn encode_rows(&self, rows: &DMatrix<f64>, subjects: &[usize]) -> Result<DMatrix<f64>> {
        let batch = self.batch(rows, subjects)?;
        Ok(objective::encode(&self.params, &batch).0)
    }
}

/// `log Q(s) + T(s)ᵀλ(j)`, the prior's log-density without its normaliser.
pub fn prior_log_density_unnormalized(s: &[f64], j: usize, model: &NfIvaeModel) -> Result<f64> {
    check_latent(s, j, model)?;
    Ok(objective::prior_log_density(&model.params, s, j))
}

/// `∂/∂s` of [`prior_log_density_unnormalized`].
pub fn prior_score(s: &[f64], j: usize, model: &NfIvaeModel) -> Result<Vec<f64>> {
    check_latent(s, j, model)?;
    Ok(objective::prior_score(&model.params, s, j))
}

fn check_latent(s: &[f64], j: usize, model: &NfIvaeModel) -> Result<()> {
    if s.len() != model.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.latent_dim(),
            got: s.len(),
        });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("latent vector must be finite".into()));
    }
    if j >= model.n_subjects() {
        return Err(Error::InvalidArgument(format!("subject index {j} out of range")));
    }
    Ok(())
}

/// One-sample Monte Carlo ELBO, averaged over the batch.
pub fn elbo(batch: &Batch, model: &NfIvaeModel, seed: u64) -> Result<f64> {
    Ok(elbo_terms(batch, model, seed)?.total())
}

/// The ELBO split into its three terms.
pub fn elbo_terms(batch: &Batch, model: &NfIvaeModel, seed: u64) -> Result<ElboTerms> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let eval = objective::evaluate(&model.params, batch, seed);
    let terms = eval.elbo;
    if !terms.total().is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            elbo: terms.total(),
            score_matching: eval.score_matching,
        });
    }
    Ok(terms)
}

/// Score-matching objective of the prior on latents drawn from the current
/// encoder, averaged over the batch.
pub fn score_matching_loss(batch: &Batch, model: &NfIvaeModel, seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let eval = objective::evaluate(&model.params, batch, seed);
    if !eval.score_matching.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            elbo: eval.elbo.total(),
            score_matching: eval.score_matching,
        });
    }
    Ok(eval.score_matching)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub elbo: f64,
    pub score_matching: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Loss of the initial model on the full data, before any update.
    pub initial_total: f64,
    pub epochs: Vec<EpochLog>,
    /// Non-fatal warnings raised before training.
    pub diagnostics: Vec<String>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("epoch,elbo,score_matching,total\n");
        for e in &self.epochs {
            text.push_str(&format!("{},{},{},{}\n", e.epoch, e.elbo, e.score_matching, e.total));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Posterior means, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEstimate {
    pub values: DMatrix<f64>,
    pub subjects: Vec<usize>,
}

impl LatentEstimate {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.column(k).iter().copied().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["subject".to_string()];
        header.extend((0..self.latent_dim()).map(|k| format!("latent_{k}")));
        w.write_record(&header)?;
        for (r, j) in self.subjects.iter().enumerate() {
            let mut rec = vec![j.to_string()];
            rec.extend(self.values.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Pooled rows of a dataset (subjects stacked in order) and their subjects.
fn pooled_matrix(ds: &SubjectDataset) -> (DMatrix<f64>, Vec<usize>) {
    let subjects = ds.row_subjects();
    let mut rows = DMatrix::zeros(subjects.len(), ds.n_nodes());
    let mut offset = 0;
    for subj in ds.subjects() {
        let n = subj.n_samples();
        for (c, col) in subj.columns().iter().enumerate() {
            rows.view_mut((offset, c), (n, 1)).copy_from_slice(col);
        }
        offset += n;
    }
    (rows, subjects)
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grad: &Params) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut i = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grad.tensors()) {
            for (pv, &gv) in p.iter_mut().zip(g) {
                self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * gv;
                self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * gv * gv;
                *pv -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
                i += 1;
            }
        }
    }
}

/// Gradient of `−ELBO + w·SM` under the stop-gradient split: encoder and
/// decoder see only the ELBO, the prior parameters only score matching.
fn combined_gradient(eval: objective::Evaluation, w: f64) -> Params {
    let objective::Evaluation { elbo_grad, sm_grad, .. } = eval;
    let mut g = elbo_grad;
    for t in g.encoder.tensors_mut().into_iter().chain(g.decoder.tensors_mut()) {
        t.iter_mut().for_each(|v| *v = -*v);
    }
    g.dec_logvar.neg_mut();
    g.tnn = sm_grad.tnn;
    for t in g.tnn.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= w);
    }
    g.lambda = sm_grad.lambda * w;
    g
}

fn standardization(rows: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::new();
    let mut scale = Vec::new();
    for col in rows.column_iter() {
        let v: Vec<f64> = col.iter().copied().collect();
        let m = crate::linalg::mean(&v);
        let s = crate::linalg::std_dev(&v);
        mean.push(m);
        scale.push(if s > 0.0 { s } else { 1.0 });
    }
    (mean, scale)
}

/// Fit the model to every node of `ds` (callers restrict the dataset to the
/// in-network nodes first).
pub fn train_nfivae(ds: &SubjectDataset, cfg: &NfIvaeConfig) -> Result<(NfIvaeModel, TrainingLog)> {
    cfg.validate()?;
    let (raw, subjects) = pooled_matrix(ds);
    let n_subjects = ds.n_subjects();
    let mut model = NfIvaeModel::initialize(cfg, ds.nodes().to_vec(), n_subjects)?;
    let (z_mean, z_scale) = standardization(&raw);
    model.z_mean = z_mean;
    model.z_scale = z_scale;

    let mut log = TrainingLog::default();
    if cfg.latent_dim > ds.n_nodes() {
        log.diagnostics.push(format!(
            "latent_dim {} exceeds the {} observed nodes",
            cfg.latent_dim,
            ds.n_nodes()
        ));
    }
    if n_subjects < cfg.stat_dim() + 1 {
        log.diagnostics.push(format!(
            "{n_subjects} subjects is fewer than the {} distinct auxiliary values the identifiability argument asks for",
            cfg.stat_dim() + 1
        ));
    }
    for d in &log.diagnostics {
        warn!("{d}");
    }

    let data = model.batch(&raw, &subjects)?;
    let n = data.len();
    // The progress check compares full-data losses under one fixed noise
    // draw, so the comparison is not blurred by minibatch noise.
    let check_seed = seed::derive(cfg.seed, &["nfivae-progress"]);
    let full_total = |params: &Params| {
        let e = objective::evaluate(params, &data, check_seed);
        -e.elbo.total() + cfg.score_match_weight * e.score_matching
    };
    log.initial_total = full_total(&model.params);
    if cfg.epochs == 0 {
        return Ok((model, log));
    }

    let window = (0.2 * cfg.epochs as f64).ceil() as usize;
    let mut adam = Adam::new(model.params.n_params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = seed::derive_rng(cfg.seed, &["nfivae-shuffle"]);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_elbo, mut sum_sm) = (0.0, 0.0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch {
                z: data.z.select_rows(chunk.iter()),
                subjects: chunk.iter().map(|&r| data.subjects[r]).collect(),
            };
            let batch_seed = seed::derive(cfg.seed, &["nfivae-noise", &epoch.to_string(), &bi.to_string()]);
            let eval = objective::evaluate(&model.params, &batch, batch_seed);
            let (e, sm) = (eval.elbo.total(), eval.score_matching);
            if !e.is_finite() || !sm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    elbo: e,
                    score_matching: sm,
                });
            }
            sum_elbo += e * chunk.len() as f64;
            sum_sm += sm * chunk.len() as f64;
            let grad = combined_gradient(eval, cfg.score_match_weight);
            adam.step(&mut model.params, &grad);
        }
        let (elbo, sm) = (sum_elbo / n as f64, sum_sm / n as f64);
        let total = -elbo + cfg.score_match_weight * sm;
        log.epochs.push(EpochLog {
            epoch,
            elbo,
            score_matching: sm,
            total,
        });
        if epoch + 1 == window {
            let now = full_total(&model.params);
            if !(now < log.initial_total) {
                return Err(Error::NoProgress {
                    window,
                    initial: log.initial_total,
                    best: now,
                });
            }
        }
    }
    Ok((model, log))
}

/// Posterior means of `q(s | z, j)` for every row of `ds`.
pub fn infer_latents(model: &NfIvaeModel, ds: &SubjectDataset) -> Result<LatentEstimate> {
    if ds.n_nodes() != model.n_observed() {
        return Err(Error::DimensionMismatch {
            expected: model.n_observed(),
            got: ds.n_nodes(),
        });
    }
    if ds.n_subjects() != model.n_subjects() {
        return Err(Error::DimensionMismatch {
            expected: model.n_subjects(),
            got: ds.n_subjects(),
        });
    }
    let (raw, subjects) = pooled_matrix(ds);
    let values = model.encode_rows(&raw, &subjects)?;
    Ok(LatentEstimate { values, subjects })
}
