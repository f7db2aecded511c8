//! Graph representation, file I/O, cross-domain alignment, episode splits,
//! and a stochastic-block-model generator for synthetic multi-domain suites.
//!
//! Graphs are undirected, stored once per unordered pair with no self-loops;
//! self-loops enter only inside [`normalize_adjacency`]. Domains differ in
//! per-class feature means, block edge probabilities, and a random-rewiring
//! fraction, which together shift both feature and topology distributions.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::DenseMatrix;
use crate::rng::SeededRng;
use crate::{Error, Result};

/// One domain's graph: adjacency (as an edge list), features, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
    domain: String,
}

impl Graph {
    /// Validates and canonicalizes: each edge is stored once as `(min, max)`
    /// and the list is sorted. Self-loops and duplicates are rejected.
    pub fn new(
        n: usize,
        edges: Vec<(usize, usize)>,
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
        domain: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != n {
            return Err(Error::InvalidGraph(format!(
                "features has {} rows but num_nodes = {n}",
                features.rows()
            )));
        }
        if labels.len() != n {
            return Err(Error::InvalidGraph(format!(
                "labels has {} entries but num_nodes = {n}",
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidGraph("features contains non-finite values".into()));
        }
        for (node, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    node,
                    label,
                    num_classes,
                });
            }
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (index, &(a, b)) in edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(Error::EdgeOutOfRange { index, a, b, n });
            }
            if a == b {
                return Err(Error::InvalidGraph(format!(
                    "edges: self-loop [{a}, {b}] at index {index}"
                )));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        if canon.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph("edges: duplicate pair".into()));
        }
        Ok(Graph {
            n,
            edges: canon,
            features,
            labels,
            num_classes,
            domain: domain.into(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    /// Dense symmetric 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }
}

/// On-disk schema. Field order is the write order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    num_nodes: usize,
    num_classes: usize,
    domain: String,
    edges: Vec<[usize; 2]>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

/// Reads and validates a graph file (JSON, schema above).
pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: GraphFile =
        serde_json::from_str(&text).map_err(|e| Error::InvalidGraph(e.to_string()))?;
    let width = file.features.first().map_or(0, Vec::len);
    for (i, row) in file.features.iter().enumerate() {
        if row.len() != width {
            return Err(Error::InvalidGraph(format!(
                "features: row {i} has {} entries, expected {width}",
                row.len()
            )));
        }
    }
    let flat: Vec<f64> = file.features.iter().flatten().copied().collect();
    let features = DenseMatrix::from_vec(file.features.len(), width, flat);
    Graph::new(
        file.num_nodes,
        file.edges.iter().map(|e| (e[0], e[1])).collect(),
        features,
        file.labels,
        file.num_classes,
        file.domain,
    )
}

/// Writes the same schema `load_graph` reads.
pub fn save_graph(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let file = GraphFile {
        num_nodes: graph.n,
        num_classes: graph.num_classes,
        domain: graph.domain.clone(),
        edges: graph.edges.iter().map(|&(a, b)| [a, b]).collect(),
        features: (0..graph.n).map(|i| graph.features.row(i).to_vec()).collect(),
        labels: graph.labels.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path.as_ref(), text)?;
    Ok(())
}

/// Which domains train and which one evaluates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub sources: Vec<String>,
    pub target: String,
    pub mode: ScenarioMode,
}

/// Whether source and target graphs come from the same generator family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum ScenarioMode {
    S1T1,
    S1T2,
    S12T3,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("scenario has no source domains".into()));
        }
        if self.sources.iter().any(|s| s == &self.target) {
            return Err(Error::Config(format!(
                "target domain {:?} is also a source",
                self.target
            )));
        }
        Ok(())
    }
}

/// Node index sets for one adaptation episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Stochastic-block-model domain description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SbmDomainConfig {
    pub n: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Per-class feature means, `num_classes` rows of `feature_dim` entries.
    pub class_means: Vec<Vec<f64>>,
    pub noise_stddev: f64,
    pub p_in: f64,
    pub p_out: f64,
    /// Fraction of generated edges rewired to uniformly random non-edges.
    pub rewire_fraction: f64,
}

impl SbmDomainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_in", self.p_in),
            ("p_out", self.p_out),
            ("rewire_fraction", self.rewire_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.noise_stddev < 0.0 {
            return Err(Error::Config("noise_stddev negative".into()));
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.feature_dim)
        {
            return Err(Error::Config(
                "class_means must be num_classes x feature_dim".into(),
            ));
        }
        Ok(())
    }
}

/// Samples one domain graph: round-robin labels, Gaussian features around
/// class means, block-probability edges, then uniform rewiring of a fraction
/// of the generated edges.
pub fn generate_sbm_domain(
    cfg: &SbmDomainConfig,
    domain: impl Into<String>,
    rng: &mut SeededRng,
) -> Result<Graph> {
    cfg.validate()?;
    if cfg.n < cfg.num_classes {
        return Err(Error::FewerNodesThanClasses {
            n: cfg.n,
            num_classes: cfg.num_classes,
        });
    }
    let labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.num_classes).collect();

    let mut features = DenseMatrix::zeros(cfg.n, cfg.feature_dim);
    for i in 0..cfg.n {
        let mean = &cfg.class_means[labels[i]];
        for d in 0..cfg.feature_dim {
            features.set(i, d, mean[d] + cfg.noise_stddev * rng.standard_normal());
        }
    }

    let mut edges = Vec::new();
    for i in 0..cfg.n {
        for j in (i + 1)..cfg.n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.bernoulli(p) {
                edges.push((i, j));
            }
        }
    }

    let num_rewired = (cfg.rewire_fraction * edges.len() as f64).floor() as usize;
    if num_rewired > 0 {
        let mut present: HashSet<(usize, usize)> = edges.iter().copied().collect();
        let mut order: Vec<usize> = (0..edges.len()).collect();
        rng.shuffle(&mut order);
        let total_pairs = cfg.n * (cfg.n - 1) / 2;
        for &idx in order.iter().take(num_rewired) {
            if present.len() >= total_pairs {
                break; // complete graph, nowhere to rewire
            }
            let old = edges[idx];
            present.remove(&old);
            let new = loop {
                let a = rng.index(cfg.n);
                let b = rng.index(cfg.n);
                if a == b {
                    continue;
                }
                let pair = (a.min(b), a.max(b));
                if !present.contains(&pair) {
                    break pair;
                }
            };
            present.insert(new);
            edges[idx] = new;
        }
    }

    Graph::new(cfg.n, edges, features, labels, cfg.num_classes, domain)
}

/// Pads features with zero columns up to `feature_dim` and raises
/// `num_classes` to `num_classes`; existing values and labels are unchanged.
pub fn pad_to(graph: &Graph, feature_dim: usize, num_classes: usize) -> Result<Graph> {
    if feature_dim < graph.feature_dim() {
        return Err(Error::Config(format!(
            "cannot pad features from {} down to {feature_dim}",
            graph.feature_dim()
        )));
    }
    if num_classes < graph.num_classes {
        return Err(Error::Config(format!(
            "cannot pad classes from {} down to {num_classes}",
            graph.num_classes
        )));
    }
    let mut features = DenseMatrix::zeros(graph.n, feature_dim);
    for i in 0..graph.n {
        features.row_mut(i)[..graph.feature_dim()].copy_from_slice(graph.features.row(i));
    }
    Graph::new(
        graph.n,
        graph.edges.clone(),
        features,
        graph.labels.clone(),
        num_classes,
        graph.domain.clone(),
    )
}

/// Aligns a set of graphs to common dimensions: features are zero-padded on
/// the right to the maximum feature dim, class counts raised to the maximum.
pub fn zero_pad_align(graphs: &[Graph]) -> Result<Vec<Graph>> {
    if graphs.is_empty() {
        return Err(Error::Config("zero_pad_align on empty list".into()));
    }
    let max_d = graphs.iter().map(Graph::feature_dim).max().unwrap();
    let max_c = graphs.iter().map(Graph::num_classes).max().unwrap();
    graphs.iter().map(|g| pad_to(g, max_d, max_c)).collect()
}

/// Uniform support/query partition with `round(fraction * n)` support nodes,
/// stratified so every class holding at least two nodes is represented in
/// the support set.
pub fn split_episode(graph: &Graph, support_fraction: f64, rng: &mut SeededRng) -> Result<EpisodeSplit> {
    if !(support_fraction > 0.0 && support_fraction < 1.0) {
        return Err(Error::Config(format!(
            "support_fraction {support_fraction} outside (0, 1)"
        )));
    }
    let n = graph.n;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); graph.num_classes];
    for (node, &label) in graph.labels.iter().enumerate() {
        by_class[label].push(node);
    }
    let must_cover: Vec<usize> = (0..graph.num_classes)
        .filter(|&c| by_class[c].len() >= 2)
        .collect();
    // round(fraction * n), floored/capped only when the stratification
    // constraint or a non-empty query make the rounded size infeasible.
    let target = ((support_fraction * n as f64).round() as usize)
        .max(must_cover.len())
        .min(n.saturating_sub(1).max(1));

    let mut in_support = vec![false; n];
    let mut support = Vec::with_capacity(target);
    for &c in &must_cover {
        let pick = by_class[c][rng.index(by_class[c].len())];
        in_support[pick] = true;
        support.push(pick);
    }
    let mut pool: Vec<usize> = (0..n).filter(|&i| !in_support[i]).collect();
    rng.shuffle(&mut pool);
    for &node in pool.iter().take(target.saturating_sub(support.len())) {
        in_support[node] = true;
        support.push(node);
    }
    let mut query: Vec<usize> = (0..n).filter(|&i| !in_support[i]).collect();
    support.sort_unstable();
    query.sort_unstable();
    for &c in &must_cover {
        if !by_class[c].iter().any(|&i| in_support[i]) {
            return Err(Error::Config(format!(
                "internal: class {c} missing from support after stratification"
            )));
        }
    }
    Ok(EpisodeSplit { support, query })
}

/// Symmetric GCN propagation operator D^{-1/2} (A + I) D^{-1/2} built from
/// the graph's edges.
pub fn normalize_adjacency(graph: &Graph) -> DenseMatrix {
    let mut a = graph.adjacency();
    for i in 0..graph.n {
        a.set(i, i, 1.0);
    }
    normalize_with_self_loops(&a)
}

/// Same operator for an arbitrary dense 0/1 symmetric adjacency (no
/// self-loops stored): adds I, then applies the symmetric normalization.
pub fn normalize_dense_adjacency(adj: &DenseMatrix) -> DenseMatrix {
    assert_eq!(adj.rows(), adj.cols(), "adjacency must be square");
    let mut a = adj.clone();
    for i in 0..a.rows() {
        a.set(i, i, 1.0);
    }
    normalize_with_self_loops(&a)
}

fn normalize_with_self_loops(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row(i).iter().sum();
            1.0 / d.sqrt()
        })
        .collect();
    DenseMatrix::from_fn(n, n, |i, j| a.get(i, j) * inv_sqrt_deg[i] * inv_sqrt_deg[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_class_cfg(n: usize) -> SbmDomainConfig {
        SbmDomainConfig {
            n,
            num_classes: 2,
            feature_dim: 3,
            class_means: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            noise_stddev: 0.2,
            p_in: 0.6,
            p_out: 0.1,
            rewire_fraction: 0.1,
        }
    }

    #[test]
    fn minimal_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        std::fs::write(
            &path,
            r#"{
  "num_nodes": 2,
  "num_classes": 2,
  "domain": "tiny",
  "edges": [[0, 1]],
  "features": [[0.5], [1.5]],
  "labels": [0, 1]
}"#,
        )
        .unwrap();
        let g = load_graph(&path).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.num_classes(), 2);
    }

    #[test]
    fn edge_out_of_range_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{
  "num_nodes": 3,
  "num_classes": 2,
  "domain": "bad",
  "edges": [[0, 5]],
  "features": [[0.0], [0.0], [0.0]],
  "labels": [0, 1, 0]
}"#,
        )
        .unwrap();
        let err = load_graph(&path).unwrap_err();
        assert!(err.to_string().contains("edge endpoint out of range"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.json");
        std::fs::write(
            &path,
            r#"{
  "num_nodes": 1,
  "num_classes": 1,
  "domain": "x",
  "edges": [],
  "features": [[0.0]],
  "labels": [0],
  "surprise": 1
}"#,
        )
        .unwrap();
        let err = load_graph(&path).unwrap_err();
        assert!(err.to_string().contains("surprise"), "{err}");
    }

    #[test]
    fn label_out_of_range_names_index() {
        let g = Graph::new(
            2,
            vec![],
            DenseMatrix::zeros(2, 1),
            vec![0, 3],
            2,
            "x",
        );
        match g {
            Err(Error::LabelOutOfRange { node, label, .. }) => {
                assert_eq!((node, label), (1, 3));
            }
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn sbm_pure_blocks() {
        let cfg = SbmDomainConfig {
            p_in: 1.0,
            p_out: 0.0,
            rewire_fraction: 0.0,
            ..two_class_cfg(8)
        };
        let mut rng = SeededRng::new(1);
        let g = generate_sbm_domain(&cfg, "pure", &mut rng).unwrap();
        for &(i, j) in g.edges() {
            assert_eq!(g.labels()[i], g.labels()[j]);
        }
        // every same-class pair present: classes of size 4 -> 2 * C(4,2)
        assert_eq!(g.edges().len(), 2 * 6);
    }

    #[test]
    fn sbm_deterministic_and_distinct_streams() {
        let cfg = two_class_cfg(20);
        let a = generate_sbm_domain(&cfg, "d", &mut SeededRng::with_stream(9, 4)).unwrap();
        let b = generate_sbm_domain(&cfg, "d", &mut SeededRng::with_stream(9, 4)).unwrap();
        assert_eq!(a, b);
        let c = generate_sbm_domain(&cfg, "d", &mut SeededRng::with_stream(9, 5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sbm_too_few_nodes() {
        let cfg = SbmDomainConfig {
            n: 1,
            ..two_class_cfg(8)
        };
        let err = generate_sbm_domain(&cfg, "x", &mut SeededRng::new(0)).unwrap_err();
        assert!(err.to_string().contains("fewer nodes than classes"), "{err}");
    }

    #[test]
    fn sbm_edge_count_matches_binomial() {
        // n=60, C=3 round-robin: 3 classes of 20. Same-class pairs: 3*C(20,2)=570,
        // cross-class pairs: C(60,2)-570=1200.
        let cfg = SbmDomainConfig {
            n: 60,
            num_classes: 3,
            feature_dim: 2,
            class_means: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            noise_stddev: 0.1,
            p_in: 0.3,
            p_out: 0.05,
            rewire_fraction: 0.0,
        };
        let expected: f64 = 570.0 * 0.3 + 1200.0 * 0.05;
        let variance: f64 = 570.0 * 0.3 * 0.7 + 1200.0 * 0.05 * 0.95;
        let sigma = variance.sqrt();
        let mut total = 0.0;
        let seeds = 100;
        for seed in 0..seeds {
            let g = generate_sbm_domain(&cfg, "b", &mut SeededRng::new(seed)).unwrap();
            total += g.edges().len() as f64;
        }
        let mean = total / seeds as f64;
        // mean of 100 seeds has stderr sigma/10; 4 sigma of a single draw is
        // a very loose envelope for it.
        assert!(
            (mean - expected).abs() < 4.0 * sigma,
            "mean {mean} vs expected {expected} (sigma {sigma})"
        );
    }

    #[test]
    fn pad_align_pads_right_and_is_idempotent() {
        let g1 = Graph::new(2, vec![(0, 1)], DenseMatrix::zeros(2, 2), vec![0, 1], 2, "a").unwrap();
        let mut f2 = DenseMatrix::zeros(2, 5);
        f2.set(0, 4, 7.0);
        let g2 = Graph::new(2, vec![], f2, vec![0, 0], 3, "b").unwrap();
        let padded = zero_pad_align(&[g1.clone(), g2]).unwrap();
        assert_eq!(padded[0].feature_dim(), 5);
        assert_eq!(padded[0].num_classes(), 3);
        for i in 0..2 {
            assert_eq!(&padded[0].features().row(i)[2..], &[0.0, 0.0, 0.0]);
        }
        let again = zero_pad_align(&padded).unwrap();
        assert_eq!(again, padded);

        let single = zero_pad_align(&[g1.clone()]).unwrap();
        assert_eq!(single[0], g1);
    }

    #[test]
    fn split_basic_properties() {
        let cfg = two_class_cfg(10);
        let g = generate_sbm_domain(&cfg, "s", &mut SeededRng::new(3)).unwrap();
        let split = split_episode(&g, 0.5, &mut SeededRng::new(0)).unwrap();
        assert_eq!(split.support.len(), 5);
        assert_eq!(split.query.len(), 5);
        let mut all: Vec<usize> = split.support.iter().chain(&split.query).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let replay = split_episode(&g, 0.5, &mut SeededRng::new(0)).unwrap();
        assert_eq!(replay, split);
    }

    #[test]
    fn split_support_frequency_is_uniform() {
        let cfg = SbmDomainConfig {
            noise_stddev: 0.0,
            ..two_class_cfg(10)
        };
        let g = generate_sbm_domain(&cfg, "f", &mut SeededRng::new(5)).unwrap();
        let mut counts = vec![0usize; 10];
        let trials = 1000;
        for seed in 0..trials {
            let split = split_episode(&g, 0.5, &mut SeededRng::new(seed)).unwrap();
            for &i in &split.support {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.5).abs() < 0.05, "node {i} support freq {freq}");
        }
    }

    #[test]
    fn normalize_empty_graph_is_identity() {
        let g = Graph::new(3, vec![], DenseMatrix::zeros(3, 1), vec![0, 0, 0], 1, "e").unwrap();
        let a = normalize_adjacency(&g);
        assert_eq!(a.max_abs_diff(&DenseMatrix::identity(3)), 0.0);
    }

    #[test]
    fn normalize_single_edge_is_half_everywhere() {
        let g = Graph::new(2, vec![(0, 1)], DenseMatrix::zeros(2, 1), vec![0, 0], 1, "h").unwrap();
        let a = normalize_adjacency(&g);
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.get(i, j) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalize_regular_graph_preserves_ones() {
        // 6-cycle: every node has degree 2, so deg+1 = 3 everywhere and each
        // row of the normalized operator sums to exactly 1.
        let edges = (0..6).map(|i| (i, (i + 1) % 6)).collect();
        let g = Graph::new(6, edges, DenseMatrix::zeros(6, 1), vec![0; 6], 1, "c").unwrap();
        let a = normalize_adjacency(&g);
        for i in 0..6 {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
        // symmetry, entries in [0, 1]
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(a.get(i, j).to_bits(), a.get(j, i).to_bits());
                assert!((0.0..=1.0).contains(&a.get(i, j)));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_round_trip(seed in 0u64..500, n in 2usize..14) {
            let cfg = two_class_cfg(n);
            let g = generate_sbm_domain(&cfg, "rt", &mut SeededRng::new(seed)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("g.json");
            save_graph(&g, &path).unwrap();
            let back = load_graph(&path).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn split_partitions_for_all_fractions(seed in 0u64..200, frac in 0.1f64..0.9) {
            let cfg = two_class_cfg(12);
            let g = generate_sbm_domain(&cfg, "p", &mut SeededRng::new(seed)).unwrap();
            let split = split_episode(&g, frac, &mut SeededRng::new(seed ^ 0xabc)).unwrap();
            let support: HashSet<_> = split.support.iter().copied().collect();
            let query: HashSet<_> = split.query.iter().copied().collect();
            prop_assert!(support.is_disjoint(&query));
            prop_assert_eq!(support.len() + query.len(), 12);
        }

        #[test]
        fn normalized_adjacency_is_symmetric_unit_interval(seed in 0u64..200) {
            let cfg = two_class_cfg(9);
            let g = generate_sbm_domain(&cfg, "n", &mut SeededRng::new(seed)).unwrap();
            let a = normalize_adjacency(&g);
            for i in 0..9 {
                for j in 0..9 {
                    prop_assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-15);
                    prop_assert!((0.0..=1.0).contains(&a.get(i, j)));
                }
            }
        }
    }
}
