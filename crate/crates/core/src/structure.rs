//! Latent structure learner.
//!
//! Node representations are reweighted elementwise by a trainable vector,
//! projected onto a small set of pivot directions, and pairwise-scored with a
//! scaled dot product squashed through a sigmoid. The resulting matrix `F`
//! holds independent per-pair edge probabilities; refined adjacencies are
//! drawn as symmetric Bernoulli samples from it.
//!
//! Sampling is not differentiable, so the learner trains on a score-function
//! surrogate: each sample's log-probability under `F` is weighted by its
//! centered smoothness + sparsity reward, with the batch mean reward as the
//! variance-reducing baseline. Rewards are constants to the gradient; the
//! only differentiable path runs through `F`.

use crate::numeric::{dot, glorot_uniform, stable_sigmoid, DenseMatrix, DiffParam};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Largest representable probability strictly below 1.
const F_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Trainable state: elementwise reweighting plus pivot projection.
#[derive(Debug, Clone)]
pub struct StructParams {
    /// 1 x d reweighting vector applied to every representation row.
    pub w_hat: DiffParam,
    /// d x P projection onto pivot directions.
    pub pivot_proj: DiffParam,
}

impl StructParams {
    /// Neutral reweighting (all ones) and Glorot-initialized pivots.
    pub fn init(rep_dim: usize, pivots: usize, rng: &mut SeededRng) -> Self {
        assert!(pivots >= 1, "need at least one pivot");
        let w = DenseMatrix::from_fn(1, rep_dim, |_, _| 1.0);
        StructParams {
            w_hat: DiffParam::new("struct.w_hat", w),
            pivot_proj: DiffParam::new("struct.pivot_proj", glorot_uniform(rep_dim, pivots, rng)),
        }
    }

    pub fn rep_dim(&self) -> usize {
        self.w_hat.value.cols()
    }

    pub fn pivots(&self) -> usize {
        self.pivot_proj.value.cols()
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        vec![&self.w_hat, &self.pivot_proj]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        vec![&mut self.w_hat, &mut self.pivot_proj]
    }
}

/// Sampling and reward hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct StructLearnerConfig {
    /// Number of adjacency samples per forward pass (H).
    pub num_samples: usize,
    /// Smoothness weight.
    pub alpha: f64,
    /// Sparsity weight.
    pub beta: f64,
    /// Pivot count (P).
    pub pivots: usize,
}

impl Default for StructLearnerConfig {
    fn default() -> Self {
        StructLearnerConfig {
            num_samples: 5,
            alpha: 0.1,
            beta: 0.1,
            pivots: 10,
        }
    }
}

impl StructLearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 1 {
            return Err(Error::Config("num_samples must be >= 1".into()));
        }
        if self.pivots < 1 {
            return Err(Error::Config("pivots must be >= 1".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// One sampled refined adjacency with its log-probability under the `F` it
/// was drawn from, and (once filled) its reward.
#[derive(Debug, Clone)]
pub struct StructSample {
    /// Symmetric 0/1 matrix with zero diagonal.
    pub adjacency: DenseMatrix,
    pub log_prob: f64,
    pub reward: Option<f64>,
}

/// Pivot scores Z = (R elementwise rows * w_hat) * pivot_proj.
fn pivot_scores(reps: &DenseMatrix, params: &StructParams) -> Result<DenseMatrix> {
    if reps.cols() != params.rep_dim() {
        return Err(Error::ShapeMismatch(format!(
            "representations have dim {}, structure learner expects {}",
            reps.cols(),
            params.rep_dim()
        )));
    }
    let w = params.w_hat.value.row(0);
    let weighted = DenseMatrix::from_fn(reps.rows(), reps.cols(), |i, j| reps.get(i, j) * w[j]);
    Ok(weighted.matmul(&params.pivot_proj.value))
}

/// Per-pair edge probabilities: sigmoid of the pivot-score Gram matrix
/// scaled by 1/sqrt(P). Symmetric, zero diagonal, entries in [0, 1).
pub fn edge_probs(reps: &DenseMatrix, params: &StructParams) -> Result<DenseMatrix> {
    let z = pivot_scores(reps, params)?;
    let scale = 1.0 / (params.pivots() as f64).sqrt();
    let n = reps.rows();
    let mut f = DenseMatrix::zeros(n, n);
    for j in 0..n {
        for k in (j + 1)..n {
            let t = dot(z.row(j), z.row(k)) * scale;
            let p = stable_sigmoid(t).min(F_MAX);
            f.set(j, k, p);
            f.set(k, j, p);
        }
    }
    Ok(f)
}

/// Log-probability of a binary symmetric adjacency under independent
/// per-pair Bernoulli probabilities, counting each unordered pair once.
pub fn sample_log_prob(a_prime: &DenseMatrix, f: &DenseMatrix) -> Result<f64> {
    assert_eq!(a_prime.shape(), f.shape(), "adjacency/probability shape mismatch");
    let n = f.rows();
    let mut log_prob = 0.0;
    for j in 0..n {
        for k in (j + 1)..n {
            let p = f.get(j, k);
            let edge = a_prime.get(j, k) != 0.0;
            let prob = if edge { p } else { 1.0 - p };
            if prob == 0.0 {
                return Err(Error::ImpossibleSample { j, k });
            }
            if prob < 1.0 {
                log_prob += prob.ln();
            }
        }
    }
    Ok(log_prob)
}

/// Draws `h` independent symmetric Bernoulli adjacencies from `F`.
/// Rewards are left unset.
pub fn sample_structures(
    f: &DenseMatrix,
    h: usize,
    rng: &mut SeededRng,
) -> Result<Vec<StructSample>> {
    let n = f.rows();
    let mut samples = Vec::with_capacity(h);
    for _ in 0..h {
        let mut a = DenseMatrix::zeros(n, n);
        for j in 0..n {
            for k in (j + 1)..n {
                if rng.bernoulli(f.get(j, k)) {
                    a.set(j, k, 1.0);
                    a.set(k, j, 1.0);
                }
            }
        }
        let log_prob = sample_log_prob(&a, f)?;
        samples.push(StructSample {
            adjacency: a,
            log_prob,
            reward: None,
        });
    }
    Ok(samples)
}

/// Smoothness + sparsity reward of a sampled adjacency:
/// -alpha * sum_{j<k} A'_{jk} ||r_j - r_k||^2 - beta * |edges|.
pub fn structure_reward(
    a_prime: &DenseMatrix,
    reps: &DenseMatrix,
    cfg: &StructLearnerConfig,
) -> f64 {
    let n = a_prime.rows();
    let mut smooth = 0.0;
    let mut count = 0.0;
    for j in 0..n {
        for k in (j + 1)..n {
            if a_prime.get(j, k) != 0.0 {
                let rj = reps.row(j);
                let rk = reps.row(k);
                let sq: f64 = rj.iter().zip(rk).map(|(a, b)| (a - b) * (a - b)).sum();
                smooth += sq;
                count += 1.0;
            }
        }
    }
    -cfg.alpha * smooth - cfg.beta * count
}

/// Computes every sample's reward from the given representations.
pub fn fill_rewards(samples: &mut [StructSample], reps: &DenseMatrix, cfg: &StructLearnerConfig) {
    for s in samples.iter_mut() {
        s.reward = Some(structure_reward(&s.adjacency, reps, cfg));
    }
}

/// Score-function surrogate loss
/// `L = -(1/H) sum_h log Phi(A'_h) * (B_h - mean B)`
/// evaluated with `F` recomputed from the current parameters, so repeated
/// calls during inner adaptation re-score the same fixed samples.
///
/// Gradients (times `grad_scale`) are accumulated into `params`; rewards and
/// the baseline are treated as constants. Returns the surrogate value.
pub fn reinforce_surrogate_loss(
    samples: &[StructSample],
    reps: &DenseMatrix,
    params: &mut StructParams,
    grad_scale: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("reinforce surrogate needs at least one sample".into()));
    }
    let h = samples.len() as f64;
    let mut rewards = Vec::with_capacity(samples.len());
    for s in samples {
        rewards.push(s.reward.ok_or_else(|| {
            Error::Config("reinforce surrogate called before rewards were filled".into())
        })?);
    }
    let baseline = rewards.iter().sum::<f64>() / h;

    let z = pivot_scores(reps, params)?;
    let scale = 1.0 / (params.pivots() as f64).sqrt();
    let n = reps.rows();
    let mut f = DenseMatrix::zeros(n, n);
    for j in 0..n {
        for k in (j + 1)..n {
            let t = dot(z.row(j), z.row(k)) * scale;
            let p = stable_sigmoid(t).min(F_MAX);
            f.set(j, k, p);
            f.set(k, j, p);
        }
    }

    // d logPhi / d t_{jk} = A'_{jk} - F_{jk}; fold the per-sample weight
    // -(B_h - baseline)/H into a single symmetric coefficient matrix.
    let mut loss = 0.0;
    let mut coeff = DenseMatrix::zeros(n, n);
    for (s, &reward) in samples.iter().zip(&rewards) {
        let log_phi = sample_log_prob(&s.adjacency, &f)?;
        let weight = -(reward - baseline) / h;
        loss += weight * log_phi;
        for j in 0..n {
            for k in (j + 1)..n {
                let g = weight * (s.adjacency.get(j, k) - f.get(j, k));
                coeff.add_at(j, k, g);
                coeff.add_at(k, j, g);
            }
        }
    }

    // t = Z Z^T / sqrt(P)  =>  dL/dZ = C Z / sqrt(P) with C symmetric.
    let mut grad_z = coeff.matmul(&z);
    grad_z.scale(scale);
    // Z = (R . w) V
    let weighted = {
        let w = params.w_hat.value.row(0);
        DenseMatrix::from_fn(reps.rows(), reps.cols(), |i, j| reps.get(i, j) * w[j])
    };
    let grad_pivot = weighted.matmul_tn(&grad_z);
    let grad_weighted = grad_z.matmul_nt(&params.pivot_proj.value);
    let mut grad_w = vec![0.0; params.rep_dim()];
    for i in 0..reps.rows() {
        let gr = grad_weighted.row(i);
        let rr = reps.row(i);
        for (d, gw) in grad_w.iter_mut().enumerate() {
            *gw += gr[d] * rr[d];
        }
    }

    params.pivot_proj.grad.add_scaled(&grad_pivot, grad_scale);
    for (d, g) in grad_w.iter().enumerate() {
        params.w_hat.grad.add_at(0, d, grad_scale * g);
    }
    Ok(loss)
}

/// All 2^(n(n-1)/2) binary symmetric adjacencies on `n` nodes. Intended for
/// enumeration oracles at n <= 3.
pub fn enumerate_structures(n: usize) -> Vec<DenseMatrix> {
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|j| ((j + 1)..n).map(move |k| (j, k)))
        .collect();
    let mut out = Vec::with_capacity(1 << pairs.len());
    for mask in 0u32..(1 << pairs.len()) {
        let mut a = DenseMatrix::zeros(n, n);
        for (bit, &(j, k)) in pairs.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                a.set(j, k, 1.0);
                a.set(k, j, 1.0);
            }
        }
        out.push(a);
    }
    out
}
