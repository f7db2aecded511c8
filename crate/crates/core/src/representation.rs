//! Variational representation learner.
//!
//! Each node embedding `r` is encoded into two diagonal Gaussians: a
//! semantic factor `s` that carries the label and a variation factor `v`
//! that does not. A decoder reconstructs `r` from `(s, v)`, a classifier
//! predicts the label from `s`, and a prior couples the factors either
//! jointly (full-covariance Gaussian parameterized by its Cholesky factor)
//! or independently (standard normals).
//!
//! Training maximizes a three-term bound estimated from `S` shared
//! reparameterized samples with self-normalized weights proportional to the
//! per-sample label likelihood:
//!
//! ```text
//! T1 = log( mean_m p(y|s_m) )
//! T2 = sum_m w_m log p(r|s_m, v_m)
//! T3 = sum_m w_m ( log p(s_m, v_m) - log q(s_m, v_m|r) )
//! ```
//!
//! with `w_m = p(y|s_m) / sum_j p(y|s_j)`. Gradients are the total
//! derivatives of this expression under fixed noise (pathwise through the
//! samples, including the dependence of the weights on the classifier), so
//! the finite-difference harness with common random numbers checks them
//! directly.

use crate::numeric::{
    axpy, dot, glorot_uniform, inv_softplus, logsumexp, softplus, stable_sigmoid, DenseMatrix,
    DiffParam,
};
use crate::rng::SeededRng;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;
const LOG_VAR_MIN: f64 = -10.0;
const LOG_VAR_MAX: f64 = 10.0;
const CHOL_DIAG_FLOOR: f64 = 1e-6;
/// Floor on the mean label likelihood; below it the classifier has collapsed
/// and the node is counted as degenerate.
const Q_HAT_FLOOR: f64 = 1e-30;

/// Per-node diagonal Gaussians, one row per node.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DenseMatrix,
    pub log_var: DenseMatrix,
}

/// One encoder head: two affine maps producing mean and log-variance.
#[derive(Debug, Clone)]
pub struct GaussianEncoderParams {
    pub w_mean: DiffParam,
    pub b_mean: DiffParam,
    pub w_logvar: DiffParam,
    pub b_logvar: DiffParam,
}

impl GaussianEncoderParams {
    /// Glorot mean weights, zero log-variance weights (unit variance start).
    pub fn init(prefix: &str, input_dim: usize, latent_dim: usize, rng: &mut SeededRng) -> Self {
        GaussianEncoderParams {
            w_mean: DiffParam::new(
                format!("{prefix}.w_mean"),
                glorot_uniform(input_dim, latent_dim, rng),
            ),
            b_mean: DiffParam::new(format!("{prefix}.b_mean"), DenseMatrix::zeros(1, latent_dim)),
            w_logvar: DiffParam::new(
                format!("{prefix}.w_logvar"),
                DenseMatrix::zeros(input_dim, latent_dim),
            ),
            b_logvar: DiffParam::new(
                format!("{prefix}.b_logvar"),
                DenseMatrix::zeros(1, latent_dim),
            ),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_mean.value.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_mean.value.cols()
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        vec![&self.w_mean, &self.b_mean, &self.w_logvar, &self.b_logvar]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        vec![
            &mut self.w_mean,
            &mut self.b_mean,
            &mut self.w_logvar,
            &mut self.b_logvar,
        ]
    }
}

/// The semantic and variation encoder pair.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub semantic: GaussianEncoderParams,
    pub variation: GaussianEncoderParams,
}

/// Affine decoder from `(s || v)` back to the embedding, plus a shared
/// log standard deviation for the reconstruction density.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub weight: DiffParam,
    pub bias: DiffParam,
    pub log_sigma_r: DiffParam,
}

impl DecoderParams {
    pub fn init(latent_dim: usize, output_dim: usize, rng: &mut SeededRng) -> Self {
        DecoderParams {
            weight: DiffParam::new("dec.weight", glorot_uniform(latent_dim, output_dim, rng)),
            bias: DiffParam::new("dec.bias", DenseMatrix::zeros(1, output_dim)),
            log_sigma_r: DiffParam::new("dec.log_sigma_r", DenseMatrix::zeros(1, 1)),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma_r.value.get(0, 0).exp()
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        vec![&self.weight, &self.bias, &self.log_sigma_r]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        vec![&mut self.weight, &mut self.bias, &mut self.log_sigma_r]
    }
}

/// Affine classifier over the semantic factor.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub weight: DiffParam,
    pub bias: DiffParam,
}

impl ClassifierParams {
    pub fn init(prefix: &str, input_dim: usize, num_classes: usize, rng: &mut SeededRng) -> Self {
        ClassifierParams {
            weight: DiffParam::new(
                format!("{prefix}.weight"),
                glorot_uniform(input_dim, num_classes, rng),
            ),
            bias: DiffParam::new(format!("{prefix}.bias"), DenseMatrix::zeros(1, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Joint full-covariance prior or factorized standard normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PriorMode {
    Joint,
    Independent,
}

/// Prior over `(s, v)`. The joint covariance is `L L^T` where `L` is lower
/// triangular with diagonal `softplus(raw) + 1e-6`; independent mode ignores
/// the factor entirely.
#[derive(Debug, Clone)]
pub struct PriorParams {
    pub mode: PriorMode,
    pub chol_raw: DiffParam,
}

impl PriorParams {
    /// Identity effective covariance in either mode.
    pub fn identity(mode: PriorMode, latent_dim: usize) -> Self {
        let raw_diag = inv_softplus(1.0 - CHOL_DIAG_FLOOR);
        let raw = DenseMatrix::from_fn(latent_dim, latent_dim, |i, j| {
            if i == j {
                raw_diag
            } else {
                0.0
            }
        });
        PriorParams {
            mode,
            chol_raw: DiffParam::new("prior.chol_raw", raw),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.chol_raw.value.rows()
    }

    /// Lower-triangular factor with the positive diagonal applied.
    pub fn effective_cholesky(&self) -> DenseMatrix {
        let k = self.latent_dim();
        DenseMatrix::from_fn(k, k, |i, j| {
            if j > i {
                0.0
            } else if i == j {
                softplus(self.chol_raw.value.get(i, i)) + CHOL_DIAG_FLOOR
            } else {
                self.chol_raw.value.get(i, j)
            }
        })
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        vec![&self.chol_raw]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        vec![&mut self.chol_raw]
    }
}

/// Everything the representation learner trains.
#[derive(Debug, Clone)]
pub struct RepParams {
    pub encoders: EncoderParams,
    pub decoder: DecoderParams,
    pub classifier: ClassifierParams,
    pub prior: PriorParams,
}

impl RepParams {
    pub fn init(
        rep_dim: usize,
        semantic_dim: usize,
        variation_dim: usize,
        num_classes: usize,
        mode: PriorMode,
        rng: &mut SeededRng,
    ) -> Self {
        RepParams {
            encoders: EncoderParams {
                semantic: GaussianEncoderParams::init("enc_s", rep_dim, semantic_dim, rng),
                variation: GaussianEncoderParams::init("enc_v", rep_dim, variation_dim, rng),
            },
            decoder: DecoderParams::init(semantic_dim + variation_dim, rep_dim, rng),
            classifier: ClassifierParams::init("clf", semantic_dim, num_classes, rng),
            prior: PriorParams::identity(mode, semantic_dim + variation_dim),
        }
    }

    pub fn semantic_dim(&self) -> usize {
        self.encoders.semantic.latent_dim()
    }

    pub fn variation_dim(&self) -> usize {
        self.encoders.variation.latent_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        let mut out = self.encoders.semantic.params();
        out.extend(self.encoders.variation.params());
        out.extend(self.decoder.params());
        out.extend(self.classifier.params());
        out.extend(self.prior.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        let mut out = self.encoders.semantic.params_mut();
        out.extend(self.encoders.variation.params_mut());
        out.extend(self.decoder.params_mut());
        out.extend(self.classifier.params_mut());
        out.extend(self.prior.params_mut());
        out
    }
}

/// One encoded row: clamped log-variances, plus the pre-clamp values the
/// backward pass needs to gate gradients.
#[derive(Debug, Clone)]
struct EncodedRow {
    mean: Vec<f64>,
    log_var: Vec<f64>,
    pre_log_var: Vec<f64>,
}

fn encode_row(r: &[f64], enc: &GaussianEncoderParams) -> EncodedRow {
    let mut mean = enc.b_mean.value.row(0).to_vec();
    let mut pre = enc.b_logvar.value.row(0).to_vec();
    for (i, &x) in r.iter().enumerate() {
        if x != 0.0 {
            axpy(&mut mean, enc.w_mean.value.row(i), x);
            axpy(&mut pre, enc.w_logvar.value.row(i), x);
        }
    }
    let log_var = pre
        .iter()
        .map(|&v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
        .collect();
    EncodedRow {
        mean,
        log_var,
        pre_log_var: pre,
    }
}

/// Encodes one embedding row into its semantic and variation posteriors
/// (means and clamped log-variances).
pub fn encode(
    r: &[f64],
    encoders: &EncoderParams,
) -> ((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>)) {
    let s = encode_row(r, &encoders.semantic);
    let v = encode_row(r, &encoders.variation);
    ((s.mean, s.log_var), (v.mean, v.log_var))
}

/// Encodes every row of `reps` with one encoder head.
pub fn encode_all(reps: &DenseMatrix, enc: &GaussianEncoderParams) -> GaussianPosterior {
    let k = enc.latent_dim();
    let mut mean = DenseMatrix::zeros(reps.rows(), k);
    let mut log_var = DenseMatrix::zeros(reps.rows(), k);
    for i in 0..reps.rows() {
        let row = encode_row(reps.row(i), enc);
        mean.row_mut(i).copy_from_slice(&row.mean);
        log_var.row_mut(i).copy_from_slice(&row.log_var);
    }
    GaussianPosterior { mean, log_var }
}

/// Reparameterized draw `mean + exp(log_var/2) * eps` with fresh noise.
pub fn reparam_sample(mean: &[f64], log_var: &[f64], rng: &mut SeededRng) -> Vec<f64> {
    let eps: Vec<f64> = (0..mean.len()).map(|_| rng.standard_normal()).collect();
    reparam_with_eps(mean, log_var, &eps)
}

/// Deterministic reparameterization given the noise vector.
pub fn reparam_with_eps(mean: &[f64], log_var: &[f64], eps: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (lv / 2.0).exp() * e)
        .collect()
}

/// Decoder mean for a latent pair.
pub fn decode_mean(s: &[f64], v: &[f64], dec: &DecoderParams) -> Vec<f64> {
    let mut out = dec.bias.value.row(0).to_vec();
    for (i, &x) in s.iter().chain(v).enumerate() {
        if x != 0.0 {
            axpy(&mut out, dec.weight.value.row(i), x);
        }
    }
    out
}

/// Log-density of `r` under the decoder Gaussian `N(mu_r, sigma_r^2 I)`.
pub fn decode_log_density(r: &[f64], s: &[f64], v: &[f64], dec: &DecoderParams) -> f64 {
    let mu = decode_mean(s, v, dec);
    let lsr = dec.log_sigma_r.value.get(0, 0);
    let inv_var = (-2.0 * lsr).exp();
    let sq: f64 = r.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = r.len() as f64;
    -0.5 * d * LN_2PI - d * lsr - 0.5 * sq * inv_var
}

/// Raw affine logits of the classifier.
pub fn class_logits(s: &[f64], clf: &ClassifierParams) -> Vec<f64> {
    let mut logits = clf.bias.value.row(0).to_vec();
    for (i, &x) in s.iter().enumerate() {
        if x != 0.0 {
            axpy(&mut logits, clf.weight.value.row(i), x);
        }
    }
    logits
}

/// Class log-probabilities (softmax of the affine logits).
pub fn classify_log_probs(s: &[f64], clf: &ClassifierParams) -> Vec<f64> {
    let logits = class_logits(s, clf);
    let lse = logsumexp(&logits).expect("classifier has at least one class");
    logits.iter().map(|&l| l - lse).collect()
}

/// Class probabilities; sums to 1 up to rounding.
pub fn classify(s: &[f64], clf: &ClassifierParams) -> Vec<f64> {
    classify_log_probs(s, clf).iter().map(|&l| l.exp()).collect()
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_class(probs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    (best, probs[best])
}

/// Deterministic prediction from the semantic posterior mean.
pub fn predict_mean(r: &[f64], rep: &RepParams) -> (usize, f64) {
    let encoded = encode_row(r, &rep.encoders.semantic);
    argmax_class(&classify(&encoded.mean, &rep.classifier))
}

/// Monte Carlo prediction: averages class probabilities over `samples`
/// draws from the semantic posterior.
pub fn predict_mc(r: &[f64], rep: &RepParams, samples: usize, rng: &mut SeededRng) -> (usize, f64) {
    assert!(samples >= 1);
    let encoded = encode_row(r, &rep.encoders.semantic);
    let c = rep.num_classes();
    let mut acc = vec![0.0; c];
    for _ in 0..samples {
        let s = reparam_sample(&encoded.mean, &encoded.log_var, rng);
        axpy(&mut acc, &classify(&s, &rep.classifier), 1.0 / samples as f64);
    }
    argmax_class(&acc)
}

/// Value and per-term breakdown of one node's bound.
#[derive(Debug, Clone, Copy)]
pub struct ElboOutcome {
    pub value: f64,
    /// T1, the log mean label likelihood.
    pub classification: f64,
    /// T2, the weighted reconstruction term.
    pub reconstruction: f64,
    /// T3, the weighted prior-minus-posterior term.
    pub prior_gap: f64,
    /// Self-normalized weight total (1 up to rounding).
    pub weight_sum: f64,
    /// True when the mean label likelihood hit the degeneracy floor.
    pub degenerate: bool,
}

/// Forward-only bound for one node (used by finite-difference closures).
pub fn elbo_node(
    r: &[f64],
    y: usize,
    num_samples: usize,
    rep: &RepParams,
    rng: &mut SeededRng,
) -> Result<ElboOutcome> {
    elbo_impl::<false>(r, y, num_samples, &mut rep.clone(), 0.0, rng).map(|(o, _)| o)
}

/// Bound plus gradients for one node. Accumulates `grad_scale *
/// d(ELBO)/d(theta)` into `rep` and returns `d(ELBO)/dr` alongside the
/// outcome. The caller owns the sign: the training loss uses `-ELBO`, so it
/// passes a negative scale.
pub fn elbo_node_with_grad(
    r: &[f64],
    y: usize,
    num_samples: usize,
    rep: &mut RepParams,
    grad_scale: f64,
    rng: &mut SeededRng,
) -> Result<(ElboOutcome, Vec<f64>)> {
    elbo_impl::<true>(r, y, num_samples, rep, grad_scale, rng)
}

#[allow(clippy::needless_range_loop)]
fn elbo_impl<const GRAD: bool>(
    r: &[f64],
    y: usize,
    num_samples: usize,
    rep: &mut RepParams,
    grad_scale: f64,
    rng: &mut SeededRng,
) -> Result<(ElboOutcome, Vec<f64>)> {
    if num_samples == 0 {
        return Err(Error::Config("elbo needs at least one sample".into()));
    }
    let num_classes = rep.num_classes();
    if y >= num_classes {
        return Err(Error::LabelOutOfRange {
            node: 0,
            label: y,
            num_classes,
        });
    }
    let ks = rep.semantic_dim();
    let kv = rep.variation_dim();
    let k = ks + kv;
    let d = r.len() as f64;

    let enc_s = encode_row(r, &rep.encoders.semantic);
    let enc_v = encode_row(r, &rep.encoders.variation);
    let sigma_s: Vec<f64> = enc_s.log_var.iter().map(|&lv| (lv / 2.0).exp()).collect();
    let sigma_v: Vec<f64> = enc_v.log_var.iter().map(|&lv| (lv / 2.0).exp()).collect();

    let chol = rep.prior.effective_cholesky();
    let lsr = rep.decoder.log_sigma_r.value.get(0, 0);
    let inv_var_r = (-2.0 * lsr).exp();

    struct Sample {
        eps_s: Vec<f64>,
        eps_v: Vec<f64>,
        latent: Vec<f64>, // s || v
        log_probs: Vec<f64>,
        p: f64,
        mu_r: Vec<f64>,
        log_rec: f64,
        log_prior: f64,
        log_post: f64,
        solved: Vec<f64>, // L^{-1} z, joint mode only
    }

    // log q(s,v|r) at a reparameterized point depends only on the
    // log-variances once the noise is substituted in.
    let base_log_post_s: f64 = enc_s.log_var.iter().map(|lv| -0.5 * (LN_2PI + lv)).sum();
    let base_log_post_v: f64 = enc_v.log_var.iter().map(|lv| -0.5 * (LN_2PI + lv)).sum();

    let mut samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let eps_s: Vec<f64> = (0..ks).map(|_| rng.standard_normal()).collect();
        let eps_v: Vec<f64> = (0..kv).map(|_| rng.standard_normal()).collect();
        let s = reparam_with_eps(&enc_s.mean, &enc_s.log_var, &eps_s);
        let v = reparam_with_eps(&enc_v.mean, &enc_v.log_var, &eps_v);
        let latent: Vec<f64> = s.iter().chain(&v).copied().collect();

        let log_probs = classify_log_probs(&s, &rep.classifier);
        let p = log_probs[y].exp();

        let mu_r = decode_mean(&s, &v, &rep.decoder);
        let sq: f64 = r.iter().zip(&mu_r).map(|(a, b)| (a - b) * (a - b)).sum();
        let log_rec = -0.5 * d * LN_2PI - d * lsr - 0.5 * sq * inv_var_r;

        let (log_prior, solved) = match rep.prior.mode {
            PriorMode::Independent => {
                let sq: f64 = latent.iter().map(|z| z * z).sum();
                (-0.5 * k as f64 * LN_2PI - 0.5 * sq, Vec::new())
            }
            PriorMode::Joint => {
                // forward substitution a = L^{-1} z
                let mut a = vec![0.0; k];
                for i in 0..k {
                    let mut acc = latent[i];
                    for j in 0..i {
                        acc -= chol.get(i, j) * a[j];
                    }
                    a[i] = acc / chol.get(i, i);
                }
                let log_det: f64 = (0..k).map(|i| chol.get(i, i).ln()).sum();
                let sq: f64 = a.iter().map(|x| x * x).sum();
                (-0.5 * k as f64 * LN_2PI - log_det - 0.5 * sq, a)
            }
        };
        let eps_sq: f64 = eps_s.iter().map(|e| e * e).sum::<f64>()
            + eps_v.iter().map(|e| e * e).sum::<f64>();
        let log_post = base_log_post_s + base_log_post_v - 0.5 * eps_sq;

        samples.push(Sample {
            eps_s,
            eps_v,
            latent,
            log_probs,
            p,
            mu_r,
            log_rec,
            log_prior,
            log_post,
            solved,
        });
    }

    let total_p: f64 = samples.iter().map(|s| s.p).sum();
    let degenerate = total_p / num_samples as f64 <= Q_HAT_FLOOR;
    let q_hat = if degenerate {
        Q_HAT_FLOOR
    } else {
        total_p / num_samples as f64
    };
    let norm = q_hat * num_samples as f64;
    let weights: Vec<f64> = samples.iter().map(|s| s.p / norm).collect();
    let weight_sum: f64 = weights.iter().sum();

    let t1 = q_hat.ln();
    let t2: f64 = samples.iter().zip(&weights).map(|(s, w)| w * s.log_rec).sum();
    let t3: f64 = samples
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * (s.log_prior - s.log_post))
        .sum();
    let outcome = ElboOutcome {
        value: t1 + t2 + t3,
        classification: t1,
        reconstruction: t2,
        prior_gap: t3,
        weight_sum,
        degenerate,
    };
    if !GRAD {
        return Ok((outcome, Vec::new()));
    }

    // ---- backward ----
    let mut grad_r = vec![0.0; r.len()];
    let payload: Vec<f64> = samples
        .iter()
        .map(|s| s.log_rec + s.log_prior - s.log_post)
        .collect();
    let payload_mean: f64 = payload.iter().zip(&weights).map(|(g, w)| g * w).sum();

    // accumulated per-sample latent gradients fold into these
    let mut g_mu_s = vec![0.0; ks];
    let mut g_lv_s = vec![0.0; ks];
    let mut g_mu_v = vec![0.0; kv];
    let mut g_lv_v = vec![0.0; kv];
    let mut g_chol = DenseMatrix::zeros(k, k); // wrt the effective factor

    for (m, sample) in samples.iter().enumerate() {
        let w = weights[m];
        // d(value)/d p_m: 1/total from T1 plus the self-normalized weight
        // shuffle on the payload terms (degenerate nodes freeze T1 and the
        // weights at the floor, so no likelihood gradient flows).
        let dv_dp = if degenerate {
            0.0
        } else {
            (1.0 + payload[m] - payload_mean) / total_p
        };

        // classifier path: p_m = exp(logit_y - lse)
        let probs: Vec<f64> = sample.log_probs.iter().map(|&l| l.exp()).collect();
        let mut g_logits = vec![0.0; num_classes];
        for c in 0..num_classes {
            let onehot = if c == y { 1.0 } else { 0.0 };
            g_logits[c] = dv_dp * sample.p * (onehot - probs[c]);
        }
        let s_part = &sample.latent[..ks];
        for i in 0..ks {
            for c in 0..num_classes {
                rep.classifier
                    .weight
                    .grad
                    .add_at(i, c, grad_scale * s_part[i] * g_logits[c]);
            }
        }
        for c in 0..num_classes {
            rep.classifier.bias.grad.add_at(0, c, grad_scale * g_logits[c]);
        }
        let mut g_latent = vec![0.0; k];
        for i in 0..ks {
            g_latent[i] += dot(&g_logits, rep.classifier.weight.value.row(i));
        }

        // reconstruction path, weight w on log_rec
        let residual: Vec<f64> = r.iter().zip(&sample.mu_r).map(|(a, b)| a - b).collect();
        for (i, &res) in residual.iter().enumerate() {
            let g_mu = w * res * inv_var_r; // d log_rec / d mu_r[i]
            rep.decoder.bias.grad.add_at(0, i, grad_scale * g_mu);
            for j in 0..k {
                rep.decoder
                    .weight
                    .grad
                    .add_at(j, i, grad_scale * g_mu * sample.latent[j]);
                g_latent[j] += g_mu * rep.decoder.weight.value.get(j, i);
            }
            grad_r[i] += -w * res * inv_var_r; // d log_rec / d r[i]
        }
        let sq: f64 = residual.iter().map(|x| x * x).sum();
        rep.decoder
            .log_sigma_r
            .grad
            .add_at(0, 0, grad_scale * w * (-d + sq * inv_var_r));

        // prior path, weight w on log_prior
        match rep.prior.mode {
            PriorMode::Independent => {
                for j in 0..k {
                    g_latent[j] += w * (-sample.latent[j]);
                }
            }
            PriorMode::Joint => {
                // d log_prior / d z = -L^{-T} a ; d/dL = b a^T - diag(1/L_ii)
                let a = &sample.solved;
                let mut b = vec![0.0; k];
                for i in (0..k).rev() {
                    let mut acc = a[i];
                    for j in (i + 1)..k {
                        acc -= chol.get(j, i) * b[j];
                    }
                    b[i] = acc / chol.get(i, i);
                }
                for j in 0..k {
                    g_latent[j] += w * (-b[j]);
                }
                for i in 0..k {
                    for j in 0..=i {
                        let mut g = b[i] * a[j];
                        if i == j {
                            g -= 1.0 / chol.get(i, i);
                        }
                        g_chol.add_at(i, j, w * g);
                    }
                }
            }
        }

        // posterior path, weight -w on log_post: only the log-variances
        for gl in g_lv_s.iter_mut() {
            *gl += w * 0.5;
        }
        for gl in g_lv_v.iter_mut() {
            *gl += w * 0.5;
        }

        // reparameterization: s = mu + sigma(eps) pulls latent grads back
        for j in 0..ks {
            g_mu_s[j] += g_latent[j];
            g_lv_s[j] += g_latent[j] * 0.5 * sigma_s[j] * sample.eps_s[j];
        }
        for j in 0..kv {
            g_mu_v[j] += g_latent[ks + j];
            g_lv_v[j] += g_latent[ks + j] * 0.5 * sigma_v[j] * sample.eps_v[j];
        }
    }

    // chain the effective Cholesky gradient onto the raw parameter
    if rep.prior.mode == PriorMode::Joint {
        for i in 0..k {
            for j in 0..=i {
                let mut g = g_chol.get(i, j);
                if i == j {
                    g *= stable_sigmoid(rep.prior.chol_raw.value.get(i, i));
                }
                rep.prior.chol_raw.grad.add_at(i, j, grad_scale * g);
            }
        }
    }

    // encoder affine backprop with the clamp gate on log-variances
    let push_encoder = |enc: &mut GaussianEncoderParams,
                            row: &EncodedRow,
                            g_mu: &[f64],
                            g_lv: &[f64],
                            grad_r: &mut [f64]| {
        let klat = enc.latent_dim();
        let gated: Vec<f64> = (0..klat)
            .map(|j| {
                let pre = row.pre_log_var[j];
                if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&pre) {
                    g_lv[j]
                } else {
                    0.0
                }
            })
            .collect();
        for (i, &x) in r.iter().enumerate() {
            for j in 0..klat {
                enc.w_mean.grad.add_at(i, j, grad_scale * x * g_mu[j]);
                enc.w_logvar.grad.add_at(i, j, grad_scale * x * gated[j]);
            }
            grad_r[i] += dot(g_mu, enc.w_mean.value.row(i)) + dot(&gated, enc.w_logvar.value.row(i));
        }
        for j in 0..klat {
            enc.b_mean.grad.add_at(0, j, grad_scale * g_mu[j]);
            enc.b_logvar.grad.add_at(0, j, grad_scale * gated[j]);
        }
    };
    push_encoder(&mut rep.encoders.semantic, &enc_s, &g_mu_s, &g_lv_s, &mut grad_r);
    push_encoder(&mut rep.encoders.variation, &enc_v, &g_mu_v, &g_lv_v, &mut grad_r);

    Ok((outcome, grad_r))
}

/// Closed-form KL(q || N(0, I)) for a diagonal Gaussian.
pub fn kl_to_standard_normal(mean: &[f64], log_var: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}
