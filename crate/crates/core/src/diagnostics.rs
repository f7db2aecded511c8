//! Distribution-shift and embedding diagnostics: per-node energy scores,
//! Jensen-Shannon distances between discretized distributions, and CSV
//! export of the learned embeddings and factors.

use std::io::Write;
use std::path::Path;

use crate::gnn::{gcn_forward, GnnParams};
use crate::graph::{normalize_adjacency, Graph};
use crate::meta::{prepare_task, MetaState, TrainConfig};
use crate::numeric::{logsumexp, DenseMatrix};
use crate::representation::encode_all;
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Bins used when a continuous quantity is discretized for a JS distance.
pub const HISTOGRAM_BINS: usize = 20;

/// Finite distribution over a fixed support.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyVector);
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(CategoricalDist { probs })
    }

    /// Normalizes raw non-negative counts.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Config("empty histogram".into()));
        }
        CategoricalDist::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }
}

/// Fixed-width histogram of `values` over `[lo, hi]`, as a distribution.
/// Values at the upper edge land in the last bin.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<CategoricalDist> {
    if values.is_empty() {
        return Err(Error::EmptyVector);
    }
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) * bins as f64).floor() as isize;
        let idx = idx.clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    CategoricalDist::from_counts(&counts)
}

/// Energy score `-T * logsumexp(logits / T)`; low energy marks confident,
/// in-distribution predictions.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    Ok(-temperature * logsumexp(&scaled)?)
}

fn kl_bits(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .map(|(&pi, &mi)| {
            if pi == 0.0 {
                0.0
            } else {
                pi * (pi / mi).log2()
            }
        })
        .sum()
}

/// Jensen-Shannon distance with base-2 logarithms: the square root of the
/// divergence, a metric bounded by 1.
pub fn js_distance(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    if p.support_size() != q.support_size() {
        return Err(Error::ShapeMismatch(format!(
            "distribution supports differ: {} vs {}",
            p.support_size(),
            q.support_size()
        )));
    }
    let mid: Vec<f64> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect();
    let divergence = 0.5 * kl_bits(&p.probs, &mid) + 0.5 * kl_bits(&q.probs, &mid);
    Ok(divergence.max(0.0).sqrt())
}

/// Nine-significant-digit float formatting shared by every CSV writer.
pub fn format_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// GCN output for a graph under a trained state: the domain's own network
/// when one was trained, otherwise a fresh one drawn from `rng` (the
/// transfer setting). The propagation structure is sampled once from the
/// shared structure learner.
pub fn model_representations(
    graph: &Graph,
    meta: &MetaState,
    cfg: &TrainConfig,
    rng: &SeededRng,
) -> Result<DenseMatrix> {
    let structure = cfg.ablation.uses_structure().then_some(&meta.structure);
    let setup = prepare_task(graph, structure, cfg, rng)?;
    let gnn = match meta.task_nets.get(graph.domain()) {
        Some(net) => net.gnn.clone(),
        None => {
            let mut dims = vec![graph.feature_dim()];
            dims.extend(cfg.hidden_dims.iter().copied());
            dims.push(cfg.rep_dim);
            GnnParams::init(&dims, &mut rng.split(2))
        }
    };
    let lambda = if cfg.ablation.uses_structure() {
        cfg.mixing
    } else {
        1.0
    };
    let a_hat = normalize_adjacency(graph);
    let a_prime = setup.inputs.a_prime_hat.as_ref().unwrap_or(&a_hat);
    let (reps, _) = gcn_forward(graph.features(), &a_hat, a_prime, &gnn, lambda)?;
    Ok(reps)
}

/// Writes one CSV row per node: id, domain, label, the GCN output `r`, the
/// semantic means `s`, and the variation means `v`.
pub fn export_embeddings(
    graph: &Graph,
    reps: &DenseMatrix,
    meta: &MetaState,
    path: impl AsRef<Path>,
) -> Result<()> {
    let semantic = encode_all(reps, &meta.rep.encoders.semantic);
    let variation = encode_all(reps, &meta.rep.encoders.variation);
    let mut out = String::new();
    out.push_str("node_id,domain,label");
    for j in 0..reps.cols() {
        out.push_str(&format!(",r{j}"));
    }
    for j in 0..semantic.mean.cols() {
        out.push_str(&format!(",s{j}"));
    }
    for j in 0..variation.mean.cols() {
        out.push_str(&format!(",v{j}"));
    }
    out.push('\n');
    for node in 0..graph.num_nodes() {
        out.push_str(&format!("{node},{},{}", graph.domain(), graph.labels()[node]));
        for &v in reps.row(node) {
            out.push(',');
            out.push_str(&format_sig9(v));
        }
        for &v in semantic.mean.row(node) {
            out.push(',');
            out.push_str(&format_sig9(v));
        }
        for &v in variation.mean.row(node) {
            out.push(',');
            out.push_str(&format_sig9(v));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path.as_ref())?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm_domain, SbmDomainConfig};
    use crate::meta::MetaState;

    #[test]
    fn energy_examples() {
        let e = energy_score(&[0.0, 0.0], 1.0).unwrap();
        assert!((e + 2.0f64.ln()).abs() < 1e-12);
        // adding a constant to all logits lowers the energy by exactly it
        let base = energy_score(&[0.3, -0.7, 1.1], 1.5).unwrap();
        let shifted = energy_score(&[2.3, 1.3, 3.1], 1.5).unwrap();
        assert!((shifted - (base - 2.0)).abs() < 1e-12);
        // one dominant logit pins the energy to its negative
        let dom = energy_score(&[40.0, 0.0, -3.0], 1.0).unwrap();
        assert!((dom + 40.0).abs() < 1e-6);
        assert!(energy_score(&[0.0], 0.0).is_err());
    }

    #[test]
    fn energy_is_permutation_invariant() {
        let a = energy_score(&[0.4, -1.2, 2.0], 0.8).unwrap();
        let b = energy_score(&[2.0, 0.4, -1.2], 0.8).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn js_examples() {
        let p = CategoricalDist::new(vec![0.5, 0.5]).unwrap();
        let q = CategoricalDist::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(js_distance(&p, &p).unwrap(), 0.0);
        let disjoint_a = CategoricalDist::new(vec![1.0, 0.0]).unwrap();
        let disjoint_b = CategoricalDist::new(vec![0.0, 1.0]).unwrap();
        assert!((js_distance(&disjoint_a, &disjoint_b).unwrap() - 1.0).abs() < 1e-12);
        let d = js_distance(&p, &q).unwrap();
        assert!((d - 0.31128f64.sqrt()).abs() < 1e-4, "got {d}");

        let wide = CategoricalDist::new(vec![0.25; 4]).unwrap();
        assert!(matches!(js_distance(&p, &wide), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn js_is_a_metric_on_random_triples() {
        let mut rng = SeededRng::new(77);
        let mut random_dist = |k: usize| {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            CategoricalDist::new(raw.iter().map(|x| x / total).collect()).unwrap()
        };
        for _ in 0..1000 {
            let (p, q, z) = (random_dist(5), random_dist(5), random_dist(5));
            let pq = js_distance(&p, &q).unwrap();
            let qp = js_distance(&q, &p).unwrap();
            assert!((pq - qp).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&pq));
            let pz = js_distance(&p, &z).unwrap();
            let zq = js_distance(&z, &q).unwrap();
            assert!(pq <= pz + zq + 1e-12, "triangle violated: {pq} > {pz} + {zq}");
        }
        // zero iff equal (up to tolerance)
        let p = random_dist(5);
        let mut nudged = p.probs().to_vec();
        nudged[0] += 1e-4;
        nudged[1] -= 1e-4;
        let q = CategoricalDist::new(nudged).unwrap();
        assert!(js_distance(&p, &q).unwrap() > 0.0);
    }

    #[test]
    fn histogram_covers_edges() {
        let d = histogram(&[0.0, 0.5, 1.0, 1.0], 4, 0.0, 1.0).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.0, 0.25, 0.5]);
    }

    #[test]
    fn embedding_export_is_deterministic_and_recomputable() {
        let cfg = TrainConfig {
            hidden_dims: vec![4],
            rep_dim: 3,
            semantic_dim: 2,
            variation_dim: 2,
            ..TrainConfig::default()
        };
        let sbm = SbmDomainConfig {
            n: 2,
            num_classes: 2,
            feature_dim: 3,
            class_means: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            noise_stddev: 0.1,
            p_in: 1.0,
            p_out: 1.0,
            rewire_fraction: 0.0,
        };
        let g = generate_sbm_domain(&sbm, "two", &mut SeededRng::new(1)).unwrap();
        let meta = MetaState::init(&cfg, 3, 2, &["two".into()], &mut SeededRng::new(2));
        let rng = SeededRng::new(3);
        let reps = model_representations(&g, &meta, &cfg, &rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        export_embeddings(&g, &reps, &meta, &a).unwrap();
        export_embeddings(&g, &reps, &meta, &b).unwrap();
        let text_a = std::fs::read(&a).unwrap();
        assert_eq!(text_a, std::fs::read(&b).unwrap());

        let text = String::from_utf8(text_a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3); // header + 2 nodes
        assert_eq!(lines[0], "node_id,domain,label,r0,r1,r2,s0,s1,v0,v1");

        // the s columns are the semantic means recomputed independently
        let semantic = encode_all(&reps, &meta.rep.encoders.semantic);
        let first: Vec<&str> = lines[1].split(',').collect();
        for j in 0..2 {
            let want: f64 = format_sig9(semantic.mean.get(0, j)).parse().unwrap();
            let got: f64 = first[6 + j].parse().unwrap();
            assert_eq!(want.to_bits(), got.to_bits());
        }
    }
}
