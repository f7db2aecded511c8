//! Named finite-difference checks over every differentiable operation,
//! runnable as a suite (the `gradcheck` CLI command and the gradient
//! acceptance criterion both call [`run_suite`]).
//!
//! Every check builds a handful of small random instances (at most 6 nodes,
//! latent and feature dims at most 4), computes the analytic gradients, and
//! compares them against central differences of the corresponding scalar
//! loss under common random numbers.

use crate::gnn::{gcn_backward, gcn_forward, GnnParams};
use crate::graph::{generate_sbm_domain, SbmDomainConfig};
use crate::meta::{prepare_task, task_loss, AblationMode, MetaState, TrainConfig, TaskModel};
use crate::numeric::{
    dot, finite_diff_check, group_of_grads, group_of_values, logsumexp, DenseMatrix, DiffParam,
    ParamGroup,
};
use crate::representation::{
    class_logits, decode_log_density, elbo_node, elbo_node_with_grad, encode, reparam_with_eps,
    ClassifierParams, DecoderParams, PriorMode, RepParams,
};
use crate::rng::SeededRng;
use crate::structure::{
    edge_probs, fill_rewards, reinforce_surrogate_loss, sample_log_prob, sample_structures,
    StructLearnerConfig, StructParams,
};
use crate::Result;

/// Relative-error bound every gradient must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-5;
const INSTANCES: u64 = 10;

/// Outcome of one operation's check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub operation: String,
    pub max_rel_err: f64,
    pub instances: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOLERANCE
    }
}

fn flip_sign(analytic: &mut ParamGroup) {
    for p in analytic.iter_mut() {
        p.value.scale(-1.0);
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}

fn random_operator(n: usize, rng: &mut SeededRng) -> DenseMatrix {
    let mut adj = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.bernoulli(0.5) {
                adj.set(i, j, 1.0);
                adj.set(j, i, 1.0);
            }
        }
    }
    crate::graph::normalize_dense_adjacency(&adj)
}

/// Runs `check` on `INSTANCES` seeds and reports the worst relative error.
/// `flip` negates the analytic side first (the fault-injection fixture).
fn run_instances(
    operation: &str,
    flip: bool,
    mut check: impl FnMut(u64, bool) -> Result<f64>,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        worst = worst.max(check(i, flip)?);
    }
    Ok(CheckReport {
        operation: operation.to_string(),
        max_rel_err: worst,
        instances: INSTANCES as usize,
    })
}

fn check_gcn(instance: u64, flip: bool) -> Result<f64> {
    let mut rng = SeededRng::with_stream(0x6C, instance);
    let n = 4 + (instance as usize % 3);
    let dims = [3usize, 4, 2];
    let a = random_operator(n, &mut rng);
    let ap = random_operator(n, &mut rng);
    let x = random_matrix(n, dims[0], &mut rng);
    let weights = random_matrix(n, dims[2], &mut rng);
    let lambda = rng.uniform();
    let mut params = GnnParams::init(&dims, &mut rng);

    let (_, cache) = gcn_forward(&x, &a, &ap, &params, lambda)?;
    let gx = gcn_backward(&weights, &cache, &mut params, 1.0)?;

    let mut group = group_of_values(&params.params());
    let mut analytic = group_of_grads(&params.params());
    group.push(DiffParam::new("x", x))?;
    analytic.push(DiffParam::new("x", gx))?;
    if flip {
        flip_sign(&mut analytic);
    }
    let loss = |g: &ParamGroup| {
        let mut p = GnnParams::init(&dims, &mut SeededRng::new(0));
        for (l, layer) in p.layers.iter_mut().enumerate() {
            layer.value = g.get(&format!("gnn.w{l}")).unwrap().value.clone();
        }
        let (r, _) = gcn_forward(&g.get("x").unwrap().value, &a, &ap, &p, lambda).unwrap();
        r.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    finite_diff_check(loss, &group, &analytic, EPSILON)
}

fn check_reinforce(instance: u64, flip: bool) -> Result<f64> {
    let mut rng = SeededRng::with_stream(0x5E, instance);
    let n = 3 + (instance as usize % 3);
    let d = 2 + (instance as usize % 2);
    let cfg = StructLearnerConfig {
        num_samples: 4,
        alpha: 0.5,
        beta: 0.3,
        pivots: 2,
    };
    let reps = random_matrix(n, d, &mut rng);
    let mut params = StructParams::init(d, cfg.pivots, &mut rng);
    let f = edge_probs(&reps, &params)?;
    let mut samples = sample_structures(&f, cfg.num_samples, &mut rng)?;
    fill_rewards(&mut samples, &reps, &cfg);
    reinforce_surrogate_loss(&samples, &reps, &mut params, 1.0)?;

    let mut analytic = group_of_grads(&params.params());
    let group = group_of_values(&params.params());
    if flip {
        flip_sign(&mut analytic);
    }
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward.unwrap()).collect();
    let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let loss = |g: &ParamGroup| {
        let mut p = StructParams::init(d, cfg.pivots, &mut SeededRng::new(0));
        p.w_hat.value = g.get("struct.w_hat").unwrap().value.clone();
        p.pivot_proj.value = g.get("struct.pivot_proj").unwrap().value.clone();
        let f = edge_probs(&reps, &p).unwrap();
        samples
            .iter()
            .zip(&rewards)
            .map(|(s, &b)| {
                -(b - baseline) / rewards.len() as f64 * sample_log_prob(&s.adjacency, &f).unwrap()
            })
            .sum()
    };
    finite_diff_check(loss, &group, &analytic, EPSILON)
}

fn rep_instance(instance: u64, mode: PriorMode) -> (RepParams, Vec<f64>, usize, SeededRng) {
    let mut rng = SeededRng::with_stream(0xE1B0, instance);
    let d = 3;
    let mut rep = RepParams::init(d, 2, 2, 3, mode, &mut rng);
    rep.encoders.semantic.w_logvar.value = random_matrix(d, 2, &mut rng).map(|v| 0.3 * v);
    rep.encoders.variation.w_logvar.value = random_matrix(d, 2, &mut rng).map(|v| 0.3 * v);
    rep.decoder.log_sigma_r.value.set(0, 0, 0.1);
    if mode == PriorMode::Joint {
        rep.prior.chol_raw.value.set(1, 0, 0.5);
        rep.prior.chol_raw.value.set(2, 0, -0.2);
        rep.prior.chol_raw.value.set(3, 1, 0.3);
    }
    let r: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let y = (instance % 3) as usize;
    (rep, r, y, rng)
}

fn check_elbo(mode: PriorMode) -> impl FnMut(u64, bool) -> Result<f64> {
    move |instance, flip| {
        let (mut rep, r, y, noise) = rep_instance(instance, mode);
        let (_, grad_r) = elbo_node_with_grad(&r, y, 3, &mut rep, 1.0, &mut noise.clone())?;
        let mut group = group_of_values(&rep.params());
        let mut analytic = group_of_grads(&rep.params());
        group.push(DiffParam::new("input.r", DenseMatrix::from_rows(&[r.clone()])))?;
        analytic.push(DiffParam::new(
            "input.r",
            DenseMatrix::from_rows(&[grad_r]),
        ))?;
        if flip {
            flip_sign(&mut analytic);
        }
        let template = rep.clone();
        let loss = move |g: &ParamGroup| {
            let mut rep = template.clone();
            for p in rep.params_mut() {
                p.value = g.get(p.name()).unwrap().value.clone();
            }
            let rv = g.get("input.r").unwrap().value.row(0).to_vec();
            elbo_node(&rv, y, 3, &rep, &mut noise.clone()).unwrap().value
        };
        finite_diff_check(loss, &group, &analytic, EPSILON)
    }
}

fn check_decoder(instance: u64, flip: bool) -> Result<f64> {
    let mut rng = SeededRng::with_stream(0xDEC, instance);
    let (ks, kv, d) = (2usize, 2usize, 3usize);
    let dec = DecoderParams::init(ks + kv, d, &mut rng);
    let s: Vec<f64> = (0..ks).map(|_| rng.standard_normal()).collect();
    let v: Vec<f64> = (0..kv).map(|_| rng.standard_normal()).collect();
    let r: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();

    // log N(r; W^T (s||v) + b, sigma^2 I): dmu = residual / sigma^2,
    // dlsr = -d + ||residual||^2 / sigma^2
    let mu = crate::representation::decode_mean(&s, &v, &dec);
    let lsr = dec.log_sigma_r.value.get(0, 0);
    let inv_var = (-2.0 * lsr).exp();
    let latent: Vec<f64> = s.iter().chain(&v).copied().collect();
    let mut grad_w = DenseMatrix::zeros(ks + kv, d);
    let mut grad_b = DenseMatrix::zeros(1, d);
    let mut sq = 0.0;
    for i in 0..d {
        let res = r[i] - mu[i];
        sq += res * res;
        grad_b.set(0, i, res * inv_var);
        for j in 0..(ks + kv) {
            grad_w.set(j, i, res * inv_var * latent[j]);
        }
    }
    let grad_lsr = DenseMatrix::from_rows(&[vec![-(d as f64) + sq * inv_var]]);

    let group = group_of_values(&dec.params());
    let mut analytic = ParamGroup::new();
    analytic.push(DiffParam::new("dec.weight", grad_w))?;
    analytic.push(DiffParam::new("dec.bias", grad_b))?;
    analytic.push(DiffParam::new("dec.log_sigma_r", grad_lsr))?;
    if flip {
        flip_sign(&mut analytic);
    }
    let template = dec.clone();
    let loss = move |g: &ParamGroup| {
        let mut dec = template.clone();
        for p in dec.params_mut() {
            p.value = g.get(p.name()).unwrap().value.clone();
        }
        decode_log_density(&r, &s, &v, &dec)
    };
    finite_diff_check(loss, &group, &analytic, EPSILON)
}

fn check_classifier(instance: u64, flip: bool) -> Result<f64> {
    let mut rng = SeededRng::with_stream(0xC1F, instance);
    let (k, c) = (3usize, 3usize);
    let clf = ClassifierParams::init("clf", k, c, &mut rng);
    let s: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
    let y = (instance % c as u64) as usize;

    // negative log-softmax loss: dlogits = softmax - onehot
    let logits = class_logits(&s, &clf);
    let lse = logsumexp(&logits)?;
    let mut grad_w = DenseMatrix::zeros(k, c);
    let mut grad_b = DenseMatrix::zeros(1, c);
    for cls in 0..c {
        let g = (logits[cls] - lse).exp() - if cls == y { 1.0 } else { 0.0 };
        grad_b.set(0, cls, g);
        for j in 0..k {
            grad_w.set(j, cls, g * s[j]);
        }
    }
    let mut group = ParamGroup::new();
    group.push(DiffParam::new("clf.weight", clf.weight.value.clone()))?;
    group.push(DiffParam::new("clf.bias", clf.bias.value.clone()))?;
    let mut analytic = ParamGroup::new();
    analytic.push(DiffParam::new("clf.weight", grad_w))?;
    analytic.push(DiffParam::new("clf.bias", grad_b))?;
    if flip {
        flip_sign(&mut analytic);
    }
    let template = clf.clone();
    let loss = move |g: &ParamGroup| {
        let mut clf = template.clone();
        clf.weight.value = g.get("clf.weight").unwrap().value.clone();
        clf.bias.value = g.get("clf.bias").unwrap().value.clone();
        let logits = class_logits(&s, &clf);
        logsumexp(&logits).unwrap() - logits[y]
    };
    finite_diff_check(loss, &group, &analytic, EPSILON)
}

fn check_encoder(instance: u64, flip: bool) -> Result<f64> {
    let mut rng = SeededRng::with_stream(0xE4C, instance);
    let (d, k) = (3usize, 2usize);
    let mut enc = crate::representation::GaussianEncoderParams::init("enc_s", d, k, &mut rng);
    enc.w_logvar.value = random_matrix(d, k, &mut rng).map(|v| 0.3 * v);
    let pair = crate::representation::EncoderParams {
        semantic: enc,
        variation: crate::representation::GaussianEncoderParams::init("enc_v", d, k, &mut rng),
    };
    let r: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let wm: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
    let wl: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();

    // loss = wm . mu + wl . logvar, both affine in the parameters
    let mut grad_wmean = DenseMatrix::zeros(d, k);
    let mut grad_wlog = DenseMatrix::zeros(d, k);
    for i in 0..d {
        for j in 0..k {
            grad_wmean.set(i, j, r[i] * wm[j]);
            grad_wlog.set(i, j, r[i] * wl[j]);
        }
    }
    let enc = &pair.semantic;
    let mut group = ParamGroup::new();
    let mut analytic = ParamGroup::new();
    group.push(DiffParam::new("w_mean", enc.w_mean.value.clone()))?;
    analytic.push(DiffParam::new("w_mean", grad_wmean))?;
    group.push(DiffParam::new("b_mean", enc.b_mean.value.clone()))?;
    analytic.push(DiffParam::new("b_mean", DenseMatrix::from_rows(&[wm.clone()])))?;
    group.push(DiffParam::new("w_logvar", enc.w_logvar.value.clone()))?;
    analytic.push(DiffParam::new("w_logvar", grad_wlog))?;
    group.push(DiffParam::new("b_logvar", enc.b_logvar.value.clone()))?;
    analytic.push(DiffParam::new("b_logvar", DenseMatrix::from_rows(&[wl.clone()])))?;
    if flip {
        flip_sign(&mut analytic);
    }
    let template = pair.clone();
    let loss = move |g: &ParamGroup| {
        let mut pair = template.clone();
        pair.semantic.w_mean.value = g.get("w_mean").unwrap().value.clone();
        pair.semantic.b_mean.value = g.get("b_mean").unwrap().value.clone();
        pair.semantic.w_logvar.value = g.get("w_logvar").unwrap().value.clone();
        pair.semantic.b_logvar.value = g.get("b_logvar").unwrap().value.clone();
        let ((mu, lv), _) = encode(&r, &pair);
        dot(&wm, &mu) + dot(&wl, &lv)
    };
    finite_diff_check(loss, &group, &analytic, EPSILON)
}

fn check_reparam(instance: u64, flip: bool) -> Result<f64> {
    let mut rng = SeededRng::with_stream(0x4E9A, instance);
    let k = 3usize;
    let mu: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
    let lv: Vec<f64> = (0..k).map(|_| 0.4 * rng.standard_normal()).collect();
    let eps: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
    let w: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();

    // loss = w . (mu + exp(lv/2) eps): dmu = w, dlv = w * eps * exp(lv/2)/2
    let grad_mu = DenseMatrix::from_rows(&[w.clone()]);
    let grad_lv = DenseMatrix::from_rows(&[(0..k)
        .map(|j| w[j] * eps[j] * (lv[j] / 2.0).exp() / 2.0)
        .collect::<Vec<f64>>()]);
    let mut group = ParamGroup::new();
    group.push(DiffParam::new("mu", DenseMatrix::from_rows(&[mu.clone()])))?;
    group.push(DiffParam::new("lv", DenseMatrix::from_rows(&[lv.clone()])))?;
    let mut analytic = ParamGroup::new();
    analytic.push(DiffParam::new("mu", grad_mu))?;
    analytic.push(DiffParam::new("lv", grad_lv))?;
    if flip {
        flip_sign(&mut analytic);
    }
    let loss = move |g: &ParamGroup| {
        let mu = g.get("mu").unwrap().value.row(0);
        let lv = g.get("lv").unwrap().value.row(0);
        dot(&w, &reparam_with_eps(mu, lv, &eps))
    };
    finite_diff_check(loss, &group, &analytic, EPSILON)
}

fn composed_task_cfg(mode: AblationMode) -> TrainConfig {
    TrainConfig {
        ablation: mode,
        elbo_samples: 2,
        struct_cfg: StructLearnerConfig {
            num_samples: 3,
            alpha: 0.4,
            beta: 0.2,
            pivots: 2,
        },
        hidden_dims: vec![3],
        rep_dim: 3,
        semantic_dim: 2,
        variation_dim: 2,
        prior_mode: PriorMode::Joint,
        ..TrainConfig::default()
    }
}

fn check_task_loss(mode: AblationMode) -> impl FnMut(u64, bool) -> Result<f64> {
    move |instance, flip| {
        let cfg = composed_task_cfg(mode);
        let sbm = SbmDomainConfig {
            n: 6,
            num_classes: 2,
            feature_dim: 3,
            class_means: vec![vec![1.0, 0.0, 0.3], vec![0.0, 1.0, -0.3]],
            noise_stddev: 0.4,
            p_in: 0.7,
            p_out: 0.3,
            rewire_fraction: 0.0,
        };
        let mut rng = SeededRng::with_stream(0x7A5C, instance);
        let graph = generate_sbm_domain(&sbm, "check", &mut SeededRng::with_stream(0x9, instance))?;
        let meta = MetaState::init(&cfg, 3, 2, &["check".into()], &mut rng);
        let task_rng = SeededRng::with_stream(0x77, instance);
        let setup = prepare_task(
            &graph,
            cfg.ablation.uses_structure().then_some(&meta.structure),
            &cfg,
            &task_rng,
        )?;
        let mut model = TaskModel::from_meta(&meta, "check", &cfg)?;
        let noise = task_rng.split(1234);
        task_loss(
            &graph,
            &setup.inputs,
            &setup.split.support,
            &mut model,
            &cfg,
            &mut noise.clone(),
        )?;

        let group = group_of_values(&model.params());
        let mut analytic = group_of_grads(&model.params());
        if flip {
            flip_sign(&mut analytic);
        }
        let template = model.clone();
        let graph = graph.clone();
        let setup = setup.clone();
        let cfg2 = cfg.clone();
        let loss = move |g: &ParamGroup| {
            let mut model = template.clone();
            for p in model.params_mut() {
                p.value = g.get(p.name()).unwrap().value.clone();
            }
            task_loss(
                &graph,
                &setup.inputs,
                &setup.split.support,
                &mut model,
                &cfg2,
                &mut noise.clone(),
            )
            .unwrap()
            .total
        };
        finite_diff_check(loss, &group, &analytic, EPSILON)
    }
}

/// Runs every gradient check. `fault` names one operation whose analytic
/// gradients are sign-flipped first, as a self-test of the harness.
pub fn run_suite(fault: Option<&str>) -> Result<Vec<CheckReport>> {
    let faulty = |name: &str| fault == Some(name);
    let mut reports = Vec::new();
    reports.push(run_instances("gcn_backward", faulty("gcn_backward"), check_gcn)?);
    reports.push(run_instances(
        "reinforce_surrogate_loss",
        faulty("reinforce_surrogate_loss"),
        check_reinforce,
    )?);
    reports.push(run_instances(
        "elbo_independent",
        faulty("elbo_independent"),
        check_elbo(PriorMode::Independent),
    )?);
    reports.push(run_instances(
        "elbo_joint",
        faulty("elbo_joint"),
        check_elbo(PriorMode::Joint),
    )?);
    reports.push(run_instances(
        "decode_log_density",
        faulty("decode_log_density"),
        check_decoder,
    )?);
    reports.push(run_instances(
        "classifier_cross_entropy",
        faulty("classifier_cross_entropy"),
        check_classifier,
    )?);
    reports.push(run_instances(
        "encoder_affine",
        faulty("encoder_affine"),
        check_encoder,
    )?);
    reports.push(run_instances(
        "reparam_sample",
        faulty("reparam_sample"),
        check_reparam,
    )?);
    reports.push(run_instances(
        "task_loss_full",
        faulty("task_loss_full"),
        check_task_loss(AblationMode::Full),
    )?);
    reports.push(run_instances(
        "task_loss_head",
        faulty("task_loss_head"),
        check_task_loss(AblationMode::NoRepresentation),
    )?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_clean() {
        let reports = run_suite(None).unwrap();
        assert!(reports.len() >= 8);
        for r in &reports {
            assert!(r.passed(), "{} failed with {}", r.operation, r.max_rel_err);
        }
    }

    #[test]
    fn injected_sign_flip_is_caught_and_named() {
        let reports = run_suite(Some("gcn_backward")).unwrap();
        let flipped = reports.iter().find(|r| r.operation == "gcn_backward").unwrap();
        assert!(!flipped.passed(), "sign flip went unnoticed");
        for r in reports.iter().filter(|r| r.operation != "gcn_backward") {
            assert!(r.passed(), "{} should still pass", r.operation);
        }
    }
}
