//! Bi-level meta-training across source domains, target fine-tuning, the
//! ablation variants, and checkpoint I/O.
//!
//! One task = one source graph. Per epoch, each task samples an episode and
//! a set of refined adjacencies, adapts a copy of the shared initialization
//! on its support nodes with plain gradient steps, and reports a query loss.
//! First-order mode applies the mean query gradient (evaluated at the
//! adapted parameters) to the shared initialization; second-order mode
//! differentiates through the inner trajectory with central-difference
//! Hessian-vector products. Per-task GNNs are never meta-updated: they
//! persist across epochs through the inner loop only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gnn::{gcn_backward, gcn_forward, GnnParams};
use crate::graph::{normalize_adjacency, normalize_dense_adjacency, split_episode, EpisodeSplit, Graph};
use crate::numeric::{DenseMatrix, DiffParam};
use crate::representation::{
    classify_log_probs, elbo_node_with_grad, predict_mean, ClassifierParams, PriorMode, RepParams,
};
use crate::rng::SeededRng;
use crate::structure::{
    edge_probs, fill_rewards, reinforce_surrogate_loss, sample_structures, StructLearnerConfig,
    StructParams, StructSample,
};
use crate::{Error, Result};

// rng stream labels
const STREAM_INIT: u64 = 0xA11;
const STREAM_EPOCH: u64 = 0xE0;
const STREAM_SPLIT: u64 = 0;
const STREAM_SAMPLE: u64 = 1;
const STREAM_GNN_INIT: u64 = 2;
const STREAM_QUERY: u64 = 99;
const STREAM_STEP_BASE: u64 = 100;

/// Training variant: the full model, one of the five ablations, or the
/// pooled ERM baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum AblationMode {
    Full,
    /// No structure learner; the GNN sees only the observed graph.
    #[serde(rename = "NoSL")]
    NoStructure,
    /// No representation learner; cross-entropy on a linear head instead.
    #[serde(rename = "NoRL")]
    NoRepresentation,
    /// Independent per-task training, nothing shared or meta-updated.
    #[serde(rename = "NoMAML")]
    NoMaml,
    /// Structure learner excluded from the inner loop, still meta-updated.
    #[serde(rename = "NoInnerSL")]
    NoInnerStructure,
    /// Representation learner excluded from the inner loop, still meta-updated.
    #[serde(rename = "NoInnerRL")]
    NoInnerRepresentation,
    /// One shared GCN + linear head trained on pooled source nodes.
    #[serde(rename = "ERM")]
    Erm,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::Full,
        AblationMode::NoStructure,
        AblationMode::NoRepresentation,
        AblationMode::NoMaml,
        AblationMode::NoInnerStructure,
        AblationMode::NoInnerRepresentation,
        AblationMode::Erm,
    ];

    pub fn uses_structure(self) -> bool {
        !matches!(self, AblationMode::NoStructure | AblationMode::Erm)
    }

    pub fn uses_representation(self) -> bool {
        !matches!(self, AblationMode::NoRepresentation | AblationMode::Erm)
    }

    pub fn uses_head(self) -> bool {
        matches!(self, AblationMode::NoRepresentation | AblationMode::Erm)
    }

    fn adapts_structure_inner(self) -> bool {
        self.uses_structure() && self != AblationMode::NoInnerStructure
    }

    fn adapts_representation_inner(self) -> bool {
        self.uses_representation() && self != AblationMode::NoInnerRepresentation
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "Full",
            AblationMode::NoStructure => "NoSL",
            AblationMode::NoRepresentation => "NoRL",
            AblationMode::NoMaml => "NoMAML",
            AblationMode::NoInnerStructure => "NoInnerSL",
            AblationMode::NoInnerRepresentation => "NoInnerRL",
            AblationMode::Erm => "ERM",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// Exact MAML or its first-order approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MamlOrder {
    First,
    Second,
}

/// Every knob of a training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Inner gradient steps per task (eta).
    pub inner_steps: usize,
    /// Tasks per meta step (M); capped at the number of source graphs.
    pub tasks_per_step: usize,
    /// Weight on the structure-learner surrogate loss (lambda_r).
    pub reg_weight: f64,
    /// Weight on the observed adjacency in propagation (lambda).
    pub mixing: f64,
    pub ablation: AblationMode,
    pub maml_order: MamlOrder,
    /// Reparameterized samples per node in the bound (S).
    pub elbo_samples: usize,
    pub struct_cfg: StructLearnerConfig,
    pub epochs: usize,
    pub seed: u64,
    pub support_fraction: f64,
    /// GNN hidden widths; full layer stack is [D, hidden.., rep_dim].
    pub hidden_dims: Vec<usize>,
    /// GNN output width (d).
    pub rep_dim: usize,
    pub semantic_dim: usize,
    pub variation_dim: usize,
    pub prior_mode: PriorMode,
    /// Default number of adaptation steps on the target support set.
    pub finetune_steps: usize,
    /// Sensitivity knob: reinitialize per-task GNNs every epoch instead of
    /// letting inner adaptation persist.
    pub reset_task_nets_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inner_lr: 1e-3,
            outer_lr: 1e-1,
            inner_steps: 5,
            tasks_per_step: 8,
            reg_weight: 0.1,
            mixing: 0.7,
            ablation: AblationMode::Full,
            maml_order: MamlOrder::First,
            elbo_samples: 1,
            struct_cfg: StructLearnerConfig::default(),
            epochs: 50,
            seed: 0,
            support_fraction: 0.3,
            hidden_dims: vec![16],
            rep_dim: 16,
            semantic_dim: 8,
            variation_dim: 8,
            prior_mode: PriorMode::Joint,
            finetune_steps: 10,
            reset_task_nets_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.tasks_per_step < 1 {
            return Err(Error::Config("tasks_per_step must be >= 1".into()));
        }
        for (name, v) in [("reg_weight", self.reg_weight), ("mixing", self.mixing)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.elbo_samples < 1 {
            return Err(Error::Config("elbo_samples must be >= 1".into()));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::Config("support_fraction outside (0, 1)".into()));
        }
        if self.rep_dim < 1 || self.semantic_dim < 1 || self.variation_dim < 1 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        self.struct_cfg.validate()
    }

    fn gnn_dims(&self, feature_dim: usize) -> Vec<usize> {
        let mut dims = vec![feature_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.rep_dim);
        dims
    }

    /// The propagation mixture; forced to the observed graph when there is
    /// no structure learner.
    fn effective_mixing(&self) -> f64 {
        if self.ablation.uses_structure() {
            self.mixing
        } else {
            1.0
        }
    }
}

/// Per-task network: the GCN backbone plus, in head modes, a linear
/// classifier over the backbone output.
#[derive(Debug, Clone)]
pub struct TaskNet {
    pub gnn: GnnParams,
    pub head: Option<ClassifierParams>,
}

impl TaskNet {
    fn init(cfg: &TrainConfig, feature_dim: usize, num_classes: usize, rng: &mut SeededRng) -> Self {
        let gnn = GnnParams::init(&cfg.gnn_dims(feature_dim), rng);
        let head = cfg
            .ablation
            .uses_head()
            .then(|| ClassifierParams::init("head", cfg.rep_dim, num_classes, rng));
        TaskNet { gnn, head }
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        let mut out = self.gnn.params();
        if let Some(h) = &self.head {
            out.extend(h.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        let mut out = self.gnn.params_mut();
        if let Some(h) = &mut self.head {
            out.extend(h.params_mut());
        }
        out
    }
}

/// Shared initializations plus the per-task networks.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub structure: StructParams,
    pub rep: RepParams,
    pub task_nets: BTreeMap<String, TaskNet>,
}

/// Key for the single shared network trained by the ERM baseline.
pub const POOLED_NET: &str = "__pooled__";

impl MetaState {
    /// Fresh state for the given source domains and data dimensions.
    pub fn init(
        cfg: &TrainConfig,
        feature_dim: usize,
        num_classes: usize,
        domains: &[String],
        rng: &mut SeededRng,
    ) -> Self {
        let mut r = rng.split(STREAM_INIT);
        let structure = StructParams::init(feature_dim, cfg.struct_cfg.pivots, &mut r);
        let rep = RepParams::init(
            cfg.rep_dim,
            cfg.semantic_dim,
            cfg.variation_dim,
            num_classes,
            cfg.prior_mode,
            &mut r,
        );
        let mut task_nets = BTreeMap::new();
        if cfg.ablation == AblationMode::Erm {
            task_nets.insert(
                POOLED_NET.to_string(),
                TaskNet::init(cfg, feature_dim, num_classes, &mut r),
            );
        } else {
            for name in domains {
                task_nets.insert(
                    name.clone(),
                    TaskNet::init(cfg, feature_dim, num_classes, &mut r),
                );
            }
        }
        MetaState {
            structure,
            rep,
            task_nets,
        }
    }

    /// Shared (meta-updated) parameters, in a fixed order.
    pub fn meta_params(&self, mode: AblationMode) -> Vec<&DiffParam> {
        let mut out = Vec::new();
        if mode.uses_structure() {
            out.extend(self.structure.params());
        }
        if mode.uses_representation() {
            out.extend(self.rep.params());
        }
        out
    }

    fn meta_params_mut(&mut self, mode: AblationMode) -> Vec<&mut DiffParam> {
        let mut out = Vec::new();
        if mode.uses_structure() {
            out.extend(self.structure.params_mut());
        }
        if mode.uses_representation() {
            out.extend(self.rep.params_mut());
        }
        out
    }
}

/// One task's adaptable copy of everything its loss touches.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub structure: Option<StructParams>,
    pub rep: Option<RepParams>,
    pub net: TaskNet,
}

impl TaskModel {
    /// Copies the shared initialization and the domain's persistent network.
    pub fn from_meta(meta: &MetaState, domain: &str, cfg: &TrainConfig) -> Result<Self> {
        let net = meta
            .task_nets
            .get(domain)
            .ok_or_else(|| Error::Config(format!("no task network for domain {domain:?}")))?
            .clone();
        Ok(TaskModel {
            structure: cfg.ablation.uses_structure().then(|| meta.structure.clone()),
            rep: cfg.ablation.uses_representation().then(|| meta.rep.clone()),
            net,
        })
    }

    pub fn params(&self) -> Vec<&DiffParam> {
        let mut out = Vec::new();
        if let Some(s) = &self.structure {
            out.extend(s.params());
        }
        if let Some(r) = &self.rep {
            out.extend(r.params());
        }
        out.extend(self.net.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffParam> {
        let mut out = Vec::new();
        if let Some(s) = &mut self.structure {
            out.extend(s.params_mut());
        }
        if let Some(r) = &mut self.rep {
            out.extend(r.params_mut());
        }
        out.extend(self.net.params_mut());
        out
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// One plain gradient step on everything the mode adapts in the inner
    /// loop (per-task nets always; shared copies unless excluded).
    fn inner_step(&mut self, cfg: &TrainConfig) {
        let lr = cfg.inner_lr;
        if cfg.ablation.adapts_structure_inner() {
            if let Some(s) = &mut self.structure {
                for p in s.params_mut() {
                    p.sgd_step(lr);
                }
            }
        }
        if cfg.ablation.adapts_representation_inner() {
            if let Some(r) = &mut self.rep {
                for p in r.params_mut() {
                    p.sgd_step(lr);
                }
            }
        }
        for p in self.net.params_mut() {
            p.sgd_step(lr);
        }
    }

    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    fn load_flat_values(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for p in self.params_mut() {
            let len = p.value.data().len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        debug_assert_eq!(offset, flat.len());
    }

    /// 1.0 for coordinates the inner step updates, 0.0 for frozen ones.
    fn adapt_mask(&self, cfg: &TrainConfig) -> Vec<f64> {
        let mut mask = Vec::new();
        if let Some(s) = &self.structure {
            let on = cfg.ablation.adapts_structure_inner();
            for p in s.params() {
                mask.extend(std::iter::repeat_n(if on { 1.0 } else { 0.0 }, p.value.data().len()));
            }
        }
        if let Some(r) = &self.rep {
            let on = cfg.ablation.adapts_representation_inner();
            for p in r.params() {
                mask.extend(std::iter::repeat_n(if on { 1.0 } else { 0.0 }, p.value.data().len()));
            }
        }
        for p in self.net.params() {
            mask.extend(std::iter::repeat_n(1.0, p.value.data().len()));
        }
        mask
    }

    /// Number of leading flat coordinates that belong to the shared
    /// (meta-updated) parameters.
    fn shared_len(&self) -> usize {
        let mut len = 0;
        if let Some(s) = &self.structure {
            len += s.params().iter().map(|p| p.value.data().len()).sum::<usize>();
        }
        if let Some(r) = &self.rep {
            len += r.params().iter().map(|p| p.value.data().len()).sum::<usize>();
        }
        len
    }
}

/// Fixed per-episode inputs: the normalized observed adjacency, the drawn
/// structure samples with rewards, and the normalized propagation structure.
#[derive(Debug, Clone)]
pub struct TaskInputs {
    pub a_hat: DenseMatrix,
    pub samples: Vec<StructSample>,
    pub a_prime_hat: Option<DenseMatrix>,
}

/// Episode state fixed before adaptation: inputs plus the support/query split.
#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub inputs: TaskInputs,
    pub split: EpisodeSplit,
}

/// Samples the episode split and, when a structure learner is present, the
/// refined adjacencies (with rewards) used for this task and epoch. The
/// first sample is the propagation structure.
pub fn prepare_task(
    graph: &Graph,
    structure: Option<&StructParams>,
    cfg: &TrainConfig,
    rng: &SeededRng,
) -> Result<TaskSetup> {
    let split = split_episode(graph, cfg.support_fraction, &mut rng.split(STREAM_SPLIT))?;
    let a_hat = normalize_adjacency(graph);
    let (samples, a_prime_hat) = match structure {
        Some(params) => {
            let f = edge_probs(graph.features(), params)?;
            let mut samples = sample_structures(
                &f,
                cfg.struct_cfg.num_samples,
                &mut rng.split(STREAM_SAMPLE),
            )?;
            fill_rewards(&mut samples, graph.features(), &cfg.struct_cfg);
            let a_prime_hat = normalize_dense_adjacency(&samples[0].adjacency);
            (samples, Some(a_prime_hat))
        }
        None => (Vec::new(), None),
    };
    Ok(TaskSetup {
        inputs: TaskInputs {
            a_hat,
            samples,
            a_prime_hat,
        },
        split,
    })
}

/// Loss value plus its per-term breakdown for one node subset.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub total: f64,
    /// -mean ELBO, or mean cross-entropy in head modes.
    pub primary: f64,
    /// reg_weight * surrogate structure loss (0 without a structure learner).
    pub reg_weighted: f64,
    /// Nodes whose mean label likelihood hit the degeneracy floor.
    pub degenerate_nodes: usize,
}

/// Support and query losses of one adapted episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLosses {
    pub support: LossTerms,
    pub query: LossTerms,
}

/// Evaluates the episode loss on `nodes` and fills gradients in `model`.
///
/// The loss is `-mean ELBO + reg_weight * L_reg` (or cross-entropy on the
/// head instead of the bound in head modes). Structure samples are fixed,
/// rewards are constants; the surrogate is re-scored against the current
/// structure parameters so repeated calls see the adaptation.
pub fn task_loss(
    graph: &Graph,
    inputs: &TaskInputs,
    nodes: &[usize],
    model: &mut TaskModel,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<LossTerms> {
    if nodes.is_empty() {
        return Err(Error::EmptySubset);
    }
    model.zero_grads();
    let lambda = cfg.effective_mixing();
    let a_prime = inputs.a_prime_hat.as_ref().unwrap_or(&inputs.a_hat);
    let (reps, cache) = gcn_forward(graph.features(), &inputs.a_hat, a_prime, &model.net.gnn, lambda)?;

    let scale = 1.0 / nodes.len() as f64;
    let mut upstream = DenseMatrix::zeros(reps.rows(), reps.cols());
    let mut primary = 0.0;
    let mut degenerate_nodes = 0;

    if let Some(rep) = &mut model.rep {
        for &node in nodes {
            let (outcome, grad_r) = elbo_node_with_grad(
                reps.row(node),
                graph.labels()[node],
                cfg.elbo_samples,
                rep,
                -scale,
                rng,
            )?;
            primary -= scale * outcome.value;
            if outcome.degenerate {
                degenerate_nodes += 1;
            }
            for (j, g) in grad_r.iter().enumerate() {
                upstream.add_at(node, j, -scale * g);
            }
        }
    } else {
        let head = model
            .net
            .head
            .as_mut()
            .expect("head modes carry a linear classifier");
        for &node in nodes {
            let y = graph.labels()[node];
            let log_probs = classify_log_probs(reps.row(node), head);
            primary += -scale * log_probs[y];
            let c = log_probs.len();
            for cls in 0..c {
                let soft = log_probs[cls].exp();
                let g = scale * (soft - if cls == y { 1.0 } else { 0.0 });
                head.bias.grad.add_at(0, cls, g);
                for j in 0..reps.cols() {
                    head.weight.grad.add_at(j, cls, g * reps.get(node, j));
                    upstream.add_at(node, j, g * head.weight.value.get(j, cls));
                }
            }
        }
    }

    gcn_backward(&upstream, &cache, &mut model.net.gnn, 1.0)?;

    let mut reg_weighted = 0.0;
    if let Some(structure) = &mut model.structure {
        let raw = reinforce_surrogate_loss(
            &inputs.samples,
            graph.features(),
            structure,
            cfg.reg_weight,
        )?;
        reg_weighted = cfg.reg_weight * raw;
    }

    Ok(LossTerms {
        total: primary + reg_weighted,
        primary,
        reg_weighted,
        degenerate_nodes,
    })
}

/// Adapted model plus the losses observed along the way.
#[derive(Debug)]
pub struct AdaptOutcome {
    pub model: TaskModel,
    pub losses: EpisodeLosses,
    /// Support loss at each inner step, before that step's update.
    pub support_trace: Vec<f64>,
}

/// Inner trajectory bookkeeping for the second-order path: the flat
/// parameter vector entering each step and the rng that step consumed.
struct InnerTrace {
    steps: Vec<(Vec<f64>, SeededRng)>,
}

fn adapt_given(
    graph: &Graph,
    setup: &TaskSetup,
    model: &mut TaskModel,
    cfg: &TrainConfig,
    rng: &SeededRng,
    mut trace: Option<&mut InnerTrace>,
) -> Result<(EpisodeLosses, Vec<f64>)> {
    let mut support_trace = Vec::with_capacity(cfg.inner_steps);
    let mut support_terms = None;
    for step in 0..cfg.inner_steps {
        let mut step_rng = rng.split(STREAM_STEP_BASE + step as u64);
        if let Some(t) = trace.as_deref_mut() {
            t.steps.push((model.flat_values(), step_rng.clone()));
        }
        let terms = task_loss(graph, &setup.inputs, &setup.split.support, model, cfg, &mut step_rng)?;
        if !terms.total.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        support_trace.push(terms.total);
        model.inner_step(cfg);
        support_terms = Some(terms);
    }
    let support = match support_terms {
        Some(t) => t,
        // eta = 0: evaluate once for reporting, without updating
        None => task_loss(
            graph,
            &setup.inputs,
            &setup.split.support,
            model,
            cfg,
            &mut rng.split(STREAM_STEP_BASE),
        )?,
    };
    let query = task_loss(
        graph,
        &setup.inputs,
        &setup.split.query,
        model,
        cfg,
        &mut rng.split(STREAM_QUERY),
    )?;
    if !query.total.is_finite() {
        return Err(Error::DivergedLoss {
            step: cfg.inner_steps,
        });
    }
    Ok((EpisodeLosses { support, query }, support_trace))
}

/// Copies the shared initialization plus the task's persistent network,
/// adapts it with `inner_steps` support-set gradient steps, and evaluates
/// the query loss at the final iterate (whose gradients are left in the
/// returned model).
pub fn inner_adapt(
    graph: &Graph,
    meta: &MetaState,
    cfg: &TrainConfig,
    task_rng: &SeededRng,
) -> Result<AdaptOutcome> {
    let setup = prepare_task(graph, meta.structure_for_mode(cfg), cfg, task_rng)?;
    let mut model = TaskModel::from_meta(meta, graph.domain(), cfg)?;
    let (losses, support_trace) = adapt_given(graph, &setup, &mut model, cfg, task_rng, None)?;
    Ok(AdaptOutcome {
        model,
        losses,
        support_trace,
    })
}

impl MetaState {
    fn structure_for_mode(&self, cfg: &TrainConfig) -> Option<&StructParams> {
        cfg.ablation.uses_structure().then_some(&self.structure)
    }
}

/// Gradient of the query loss with respect to the shared initialization,
/// differentiated through the inner trajectory. The Hessian-vector products
/// along the reverse pass use central differences of the analytic gradient
/// under the recorded step noise.
pub fn second_order_outer_grad(
    graph: &Graph,
    setup: &TaskSetup,
    meta: &MetaState,
    cfg: &TrainConfig,
    task_rng: &SeededRng,
) -> Result<(Vec<f64>, TaskModel, EpisodeLosses)> {
    let mut model = TaskModel::from_meta(meta, graph.domain(), cfg)?;
    let mut trace = InnerTrace { steps: Vec::new() };
    let (losses, _) = adapt_given(graph, setup, &mut model, cfg, task_rng, Some(&mut trace))?;

    let mask = model.adapt_mask(cfg);
    let mut v = model.flat_grads();

    let support_grad_at = |flat: &[f64], step_rng: &SeededRng| -> Result<Vec<f64>> {
        let mut probe = model.clone();
        probe.load_flat_values(flat);
        task_loss(
            graph,
            &setup.inputs,
            &setup.split.support,
            &mut probe,
            cfg,
            &mut step_rng.clone(),
        )?;
        Ok(probe.flat_grads())
    };

    for (theta, step_rng) in trace.steps.iter().rev() {
        let u: Vec<f64> = v.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let norm = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if norm == 0.0 {
            continue;
        }
        let h = 1e-5;
        let up: Vec<f64> = theta.iter().zip(&u).map(|(t, x)| t + h * x / norm).collect();
        let down: Vec<f64> = theta.iter().zip(&u).map(|(t, x)| t - h * x / norm).collect();
        let g_up = support_grad_at(&up, step_rng)?;
        let g_down = support_grad_at(&down, step_rng)?;
        for i in 0..v.len() {
            let hv = (g_up[i] - g_down[i]) / (2.0 * h) * norm;
            v[i] -= cfg.inner_lr * hv;
        }
    }
    let shared = model.shared_len();
    Ok((v[..shared].to_vec(), model, losses))
}

/// One meta step over the given tasks: adapt each, persist its network, and
/// update the shared initialization from the mean query gradient.
/// Returns the per-task episode losses.
pub fn meta_step(
    tasks: &[&Graph],
    meta: &mut MetaState,
    cfg: &TrainConfig,
    epoch_rng: &SeededRng,
) -> Result<Vec<EpisodeLosses>> {
    if tasks.is_empty() {
        return Err(Error::NoSourceGraphs);
    }
    let mut losses = Vec::with_capacity(tasks.len());
    let mut mean_grad: Option<Vec<f64>> = None;
    let scale = 1.0 / tasks.len() as f64;

    for (i, graph) in tasks.iter().enumerate() {
        let task_rng = epoch_rng.split(i as u64);
        let (shared_grad, model, episode) = match cfg.maml_order {
            MamlOrder::First => {
                let outcome = inner_adapt(graph, meta, cfg, &task_rng)?;
                let shared = outcome.model.shared_len();
                let grads = outcome.model.flat_grads()[..shared].to_vec();
                (grads, outcome.model, outcome.losses)
            }
            MamlOrder::Second => {
                let setup = prepare_task(graph, meta.structure_for_mode(cfg), cfg, &task_rng)?;
                second_order_outer_grad(graph, &setup, meta, cfg, &task_rng)?
            }
        };
        let acc = mean_grad.get_or_insert_with(|| vec![0.0; shared_grad.len()]);
        for (a, g) in acc.iter_mut().zip(&shared_grad) {
            *a += scale * g;
        }
        meta.task_nets.insert(graph.domain().to_string(), model.net);
        losses.push(episode);
    }

    if let Some(grad) = mean_grad {
        let mut offset = 0;
        for p in meta.meta_params_mut(cfg.ablation) {
            let len = p.value.data().len();
            for (v, g) in p.value.data_mut().iter_mut().zip(&grad[offset..offset + len]) {
                *v -= cfg.outer_lr * g;
            }
            offset += len;
        }
        debug_assert_eq!(offset, grad.len());
    }
    Ok(losses)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub query_primary: f64,
    pub query_reg: f64,
}

fn record_from(epoch: usize, losses: &[EpisodeLosses]) -> EpochRecord {
    let n = losses.len() as f64;
    EpochRecord {
        epoch,
        support_loss: losses.iter().map(|l| l.support.total).sum::<f64>() / n,
        query_loss: losses.iter().map(|l| l.query.total).sum::<f64>() / n,
        query_primary: losses.iter().map(|l| l.query.primary).sum::<f64>() / n,
        query_reg: losses.iter().map(|l| l.query.reg_weighted).sum::<f64>() / n,
    }
}

/// Meta-trains on the source graphs from scratch. See [`resume_training`]
/// for the epoch loop itself.
pub fn train(sources: &[Graph], cfg: &TrainConfig) -> Result<(MetaState, Vec<EpochRecord>)> {
    if sources.is_empty() {
        return Err(Error::NoSourceGraphs);
    }
    let feature_dim = sources[0].feature_dim();
    let num_classes = sources[0].num_classes();
    for g in sources {
        if g.feature_dim() != feature_dim || g.num_classes() != num_classes {
            return Err(Error::Config(format!(
                "source graphs disagree on dimensions; align them first \
                 (domain {:?} has D={}, C={})",
                g.domain(),
                g.feature_dim(),
                g.num_classes()
            )));
        }
    }
    cfg.validate()?;
    let domains: Vec<String> = sources.iter().map(|g| g.domain().to_string()).collect();
    let root = SeededRng::new(cfg.seed);
    let mut meta = MetaState::init(cfg, feature_dim, num_classes, &domains, &mut root.clone());
    let records = resume_training(sources, &mut meta, cfg, 0)?;
    Ok((meta, records))
}

/// Runs epochs `start_epoch .. start_epoch + cfg.epochs` on an existing
/// state. Epoch rng streams are indexed by the absolute epoch number, so a
/// resumed run continues the same draw schedule.
pub fn resume_training(
    sources: &[Graph],
    meta: &mut MetaState,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<Vec<EpochRecord>> {
    if sources.is_empty() {
        return Err(Error::NoSourceGraphs);
    }
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let num_tasks = cfg.tasks_per_step.min(sources.len());
    let tasks: Vec<&Graph> = sources.iter().take(num_tasks).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for e in 0..cfg.epochs {
        let epoch = start_epoch + e;
        let epoch_rng = root.split(STREAM_EPOCH).split(epoch as u64);
        if cfg.reset_task_nets_each_epoch {
            let classes = meta_classes(meta);
            let mut r = epoch_rng.split(STREAM_GNN_INIT);
            for net in meta.task_nets.values_mut() {
                let dim = net.gnn.input_dim();
                let c = net_classes(net, classes);
                *net = TaskNet::init(cfg, dim, c, &mut r);
            }
        }
        let losses = match cfg.ablation {
            AblationMode::Erm => vec![erm_epoch(&tasks, meta, cfg)?],
            AblationMode::NoMaml => no_maml_epoch(&tasks, meta, cfg, &epoch_rng)?,
            _ => meta_step(&tasks, meta, cfg, &epoch_rng)?,
        };
        records.push(record_from(epoch, &losses));
    }
    Ok(records)
}

fn meta_classes(meta: &MetaState) -> usize {
    meta.rep.num_classes()
}

fn net_classes(net: &TaskNet, fallback: usize) -> usize {
    net.head.as_ref().map_or(fallback, |h| h.num_classes())
}

/// Independent per-task training: shared copies restart from the untouched
/// initialization every epoch, only the per-task networks persist, and no
/// outer update happens. Trains on all nodes (no episode split).
fn no_maml_epoch(
    tasks: &[&Graph],
    meta: &mut MetaState,
    cfg: &TrainConfig,
    epoch_rng: &SeededRng,
) -> Result<Vec<EpisodeLosses>> {
    let mut losses = Vec::with_capacity(tasks.len());
    for (i, graph) in tasks.iter().enumerate() {
        let task_rng = epoch_rng.split(i as u64);
        let setup = prepare_task(graph, Some(&meta.structure), cfg, &task_rng)?;
        let all_nodes: Vec<usize> = (0..graph.num_nodes()).collect();
        let mut model = TaskModel::from_meta(meta, graph.domain(), cfg)?;
        let mut last = None;
        for step in 0..cfg.inner_steps {
            let mut step_rng = task_rng.split(STREAM_STEP_BASE + step as u64);
            let terms = task_loss(graph, &setup.inputs, &all_nodes, &mut model, cfg, &mut step_rng)?;
            if !terms.total.is_finite() {
                return Err(Error::DivergedLoss { step });
            }
            model.inner_step(cfg);
            last = Some(terms);
        }
        let terms = match last {
            Some(t) => t,
            None => task_loss(
                graph,
                &setup.inputs,
                &all_nodes,
                &mut model,
                cfg,
                &mut task_rng.split(STREAM_STEP_BASE),
            )?,
        };
        meta.task_nets.insert(graph.domain().to_string(), model.net);
        losses.push(EpisodeLosses {
            support: terms,
            query: terms,
        });
    }
    Ok(losses)
}

/// ERM baseline epoch: one full-batch gradient step of the pooled
/// cross-entropy over every node of every source graph, on the single
/// shared network.
fn erm_epoch(tasks: &[&Graph], meta: &mut MetaState, cfg: &TrainConfig) -> Result<EpisodeLosses> {
    let mut net = meta
        .task_nets
        .get(POOLED_NET)
        .expect("ERM state carries the pooled network")
        .clone();
    let total_nodes: usize = tasks.iter().map(|g| g.num_nodes()).sum();
    let mut loss = 0.0;
    for p in net.params_mut() {
        p.zero_grad();
    }
    for graph in tasks {
        let a_hat = normalize_adjacency(graph);
        let (reps, cache) = gcn_forward(graph.features(), &a_hat, &a_hat, &net.gnn, 1.0)?;
        let head = net.head.as_mut().expect("ERM network carries a head");
        let mut upstream = DenseMatrix::zeros(reps.rows(), reps.cols());
        let scale = 1.0 / total_nodes as f64;
        for node in 0..graph.num_nodes() {
            let y = graph.labels()[node];
            let log_probs = classify_log_probs(reps.row(node), head);
            loss += -scale * log_probs[y];
            for (cls, lp) in log_probs.iter().enumerate() {
                let g = scale * (lp.exp() - if cls == y { 1.0 } else { 0.0 });
                head.bias.grad.add_at(0, cls, g);
                for j in 0..reps.cols() {
                    head.weight.grad.add_at(j, cls, g * reps.get(node, j));
                    upstream.add_at(node, j, g * head.weight.value.get(j, cls));
                }
            }
        }
        gcn_backward(&upstream, &cache, &mut net.gnn, 1.0)?;
    }
    if !loss.is_finite() {
        return Err(Error::DivergedLoss { step: 0 });
    }
    for p in net.params_mut() {
        p.sgd_step(cfg.outer_lr);
    }
    meta.task_nets.insert(POOLED_NET.to_string(), net);
    let terms = LossTerms {
        total: loss,
        primary: loss,
        reg_weighted: 0.0,
        degenerate_nodes: 0,
    };
    Ok(EpisodeLosses {
        support: terms,
        query: terms,
    })
}

/// Adapts the trained initialization to a target graph with `steps`
/// support-set gradient steps and reports query accuracy.
///
/// Meta modes start from the shared initialization with a freshly
/// initialized GNN; the ERM baseline fine-tunes its pooled network.
pub fn fine_tune_and_eval(
    meta: &MetaState,
    target: &Graph,
    steps: usize,
    cfg: &TrainConfig,
    rng: &SeededRng,
) -> Result<f64> {
    fine_tune_and_report(meta, target, steps, cfg, rng).map(|r| r.accuracy)
}

/// Accuracy plus the episode bookkeeping behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub query_size: usize,
}

/// [`fine_tune_and_eval`] with the query-set size and raw correct count.
pub fn fine_tune_and_report(
    meta: &MetaState,
    target: &Graph,
    steps: usize,
    cfg: &TrainConfig,
    rng: &SeededRng,
) -> Result<EvalReport> {
    let mut model = match cfg.ablation {
        AblationMode::Erm => TaskModel {
            structure: None,
            rep: None,
            net: meta
                .task_nets
                .get(POOLED_NET)
                .ok_or_else(|| Error::Config("ERM evaluation needs the pooled network".into()))?
                .clone(),
        },
        _ => TaskModel {
            structure: cfg.ablation.uses_structure().then(|| meta.structure.clone()),
            rep: cfg.ablation.uses_representation().then(|| meta.rep.clone()),
            net: TaskNet::init(
                cfg,
                target.feature_dim(),
                meta_classes(meta),
                &mut rng.split(STREAM_GNN_INIT),
            ),
        },
    };
    if let Some(s) = &model.structure {
        if s.rep_dim() != target.feature_dim() {
            return Err(Error::Config(format!(
                "target feature dim {} does not match the trained model ({}); pad the graph first",
                target.feature_dim(),
                s.rep_dim()
            )));
        }
    }
    if model.net.gnn.input_dim() != target.feature_dim() {
        return Err(Error::Config(format!(
            "target feature dim {} does not match the network input {}",
            target.feature_dim(),
            model.net.gnn.input_dim()
        )));
    }

    let setup = prepare_task(target, model.structure.as_ref(), cfg, rng)?;
    for step in 0..steps {
        let mut step_rng = rng.split(STREAM_STEP_BASE + step as u64);
        let terms = task_loss(target, &setup.inputs, &setup.split.support, &mut model, cfg, &mut step_rng)?;
        if !terms.total.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        model.inner_step(cfg);
    }

    let lambda = cfg.effective_mixing();
    let a_prime = setup.inputs.a_prime_hat.as_ref().unwrap_or(&setup.inputs.a_hat);
    let (reps, _) = gcn_forward(target.features(), &setup.inputs.a_hat, a_prime, &model.net.gnn, lambda)?;
    let mut correct = 0usize;
    for &node in &setup.split.query {
        let predicted = match (&model.rep, &model.net.head) {
            (Some(rep), _) => predict_mean(reps.row(node), rep).0,
            (None, Some(head)) => {
                let log_probs = classify_log_probs(reps.row(node), head);
                crate::representation::argmax_class(&log_probs).0
            }
            (None, None) => unreachable!("model has neither representation nor head"),
        };
        if predicted == target.labels()[node] {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / setup.split.query.len() as f64,
        correct,
        query_size: setup.split.query.len(),
    })
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl TensorFile {
    fn of(p: &DiffParam) -> Self {
        TensorFile {
            shape: [p.value.rows(), p.value.cols()],
            data: p.value.data().to_vec(),
        }
    }

    fn load_into(&self, p: &mut DiffParam) -> Result<()> {
        if self.shape != [p.value.rows(), p.value.cols()] {
            return Err(Error::CheckpointMismatch(format!(
                "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                p.name(),
                self.shape,
                (p.value.rows(), p.value.cols())
            )));
        }
        p.value.data_mut().copy_from_slice(&self.data);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    next_epoch: usize,
    run_config: serde_json::Value,
    params: BTreeMap<String, TensorFile>,
    task_nets: BTreeMap<String, BTreeMap<String, TensorFile>>,
}

/// Writes the shared parameters, every per-task network, the serialized run
/// configuration, and the next epoch index.
pub fn save_checkpoint(
    meta: &MetaState,
    run_config: &serde_json::Value,
    next_epoch: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut params = BTreeMap::new();
    for p in meta.structure.params().into_iter().chain(meta.rep.params()) {
        params.insert(p.name().to_string(), TensorFile::of(p));
    }
    let mut task_nets = BTreeMap::new();
    for (domain, net) in &meta.task_nets {
        let mut entry = BTreeMap::new();
        for p in net.params() {
            entry.insert(p.name().to_string(), TensorFile::of(p));
        }
        task_nets.insert(domain.clone(), entry);
    }
    let file = CheckpointFile {
        next_epoch,
        run_config: run_config.clone(),
        params,
        task_nets,
    };
    let mut out = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer(&mut out, &file)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads only the metadata of a checkpoint: the stored run configuration,
/// the next epoch index, and the task-network domain names.
pub fn peek_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(serde_json::Value, usize, Vec<String>)> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    let domains = file.task_nets.keys().cloned().collect();
    Ok((file.run_config, file.next_epoch, domains))
}

/// Loads a checkpoint into a state of matching structure. Any missing,
/// extra, or reshaped parameter is rejected. Returns the stored run config
/// and next epoch index.
pub fn load_checkpoint_into(
    meta: &mut MetaState,
    path: impl AsRef<Path>,
) -> Result<(serde_json::Value, usize)> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: CheckpointFile = serde_json::from_str(&text)?;

    let mut expected: Vec<&mut DiffParam> = meta.structure.params_mut();
    expected.extend(meta.rep.params_mut());
    if file.params.len() != expected.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} shared parameters, model expects {}",
            file.params.len(),
            expected.len()
        )));
    }
    for p in expected {
        let tensor = file.params.get(p.name()).ok_or_else(|| {
            Error::CheckpointMismatch(format!("missing parameter {}", p.name()))
        })?;
        tensor.load_into(p)?;
    }

    let domains: Vec<String> = meta.task_nets.keys().cloned().collect();
    let file_domains: Vec<String> = file.task_nets.keys().cloned().collect();
    if domains != file_domains {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint task networks {file_domains:?} do not match model domains {domains:?}"
        )));
    }
    for (domain, net) in meta.task_nets.iter_mut() {
        let entry = &file.task_nets[domain];
        let params = net.params_mut();
        if entry.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "task network {domain:?} has {} parameters in the checkpoint, model expects {}",
                entry.len(),
                params.len()
            )));
        }
        for p in params {
            let tensor = entry.get(p.name()).ok_or_else(|| {
                Error::CheckpointMismatch(format!("missing parameter {domain}:{}", p.name()))
            })?;
            tensor.load_into(p)?;
        }
    }
    Ok((file.run_config, file.next_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm_domain, SbmDomainConfig};
    use crate::representation::elbo_node;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            inner_steps: 2,
            tasks_per_step: 4,
            elbo_samples: 2,
            struct_cfg: StructLearnerConfig {
                num_samples: 3,
                alpha: 0.2,
                beta: 0.1,
                pivots: 2,
            },
            epochs: 2,
            hidden_dims: vec![4],
            rep_dim: 3,
            semantic_dim: 2,
            variation_dim: 2,
            prior_mode: PriorMode::Independent,
            ..TrainConfig::default()
        }
    }

    fn tiny_graph(seed: u64, name: &str) -> Graph {
        let cfg = SbmDomainConfig {
            n: 8,
            num_classes: 2,
            feature_dim: 3,
            class_means: vec![vec![1.0, 0.0, 0.2], vec![0.0, 1.0, -0.2]],
            noise_stddev: 0.3,
            p_in: 0.7,
            p_out: 0.2,
            rewire_fraction: 0.0,
        };
        generate_sbm_domain(&cfg, name, &mut SeededRng::new(seed)).unwrap()
    }

    fn init_state(sources: &[Graph], cfg: &TrainConfig) -> MetaState {
        let domains: Vec<String> = sources.iter().map(|g| g.domain().to_string()).collect();
        MetaState::init(
            cfg,
            sources[0].feature_dim(),
            sources[0].num_classes(),
            &domains,
            &mut SeededRng::new(cfg.seed),
        )
    }

    fn params_equal(a: &[&DiffParam], b: &[&DiffParam]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.name() == y.name()
                    && x.value.data().len() == y.value.data().len()
                    && x.value
                        .data()
                        .iter()
                        .zip(y.value.data())
                        .all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    #[test]
    fn zero_reg_weight_leaves_only_the_bound() {
        let g = tiny_graph(1, "a");
        let cfg = TrainConfig {
            reg_weight: 0.0,
            ..tiny_cfg()
        };
        let meta = init_state(std::slice::from_ref(&g), &cfg);
        let rng = SeededRng::new(7);
        let setup = prepare_task(&g, Some(&meta.structure), &cfg, &rng).unwrap();
        let mut model = TaskModel::from_meta(&meta, "a", &cfg).unwrap();
        let terms = task_loss(&g, &setup.inputs, &setup.split.support, &mut model, &cfg, &mut rng.split(50)).unwrap();
        assert_eq!(terms.reg_weighted, 0.0);
        assert_eq!(terms.total, terms.primary);
        // and no gradient reaches the structure learner
        for p in model.structure.as_ref().unwrap().params() {
            assert_eq!(p.grad.max_abs(), 0.0, "{}", p.name());
        }
    }

    #[test]
    fn no_structure_mode_ignores_struct_params() {
        let g = tiny_graph(2, "a");
        let cfg = TrainConfig {
            ablation: AblationMode::NoStructure,
            ..tiny_cfg()
        };
        let mut meta = init_state(std::slice::from_ref(&g), &cfg);
        let rng = SeededRng::new(9);
        let run = |meta: &MetaState| {
            let setup = prepare_task(&g, meta.structure_for_mode(&cfg), &cfg, &rng).unwrap();
            let mut model = TaskModel::from_meta(meta, "a", &cfg).unwrap();
            task_loss(&g, &setup.inputs, &setup.split.support, &mut model, &cfg, &mut rng.split(50))
                .unwrap()
                .total
        };
        let before = run(&meta);
        for p in meta.structure.params_mut() {
            p.value.fill(123.0);
        }
        let after = run(&meta);
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn full_mode_matches_hand_composed_pipeline() {
        let g = tiny_graph(3, "a");
        let cfg = TrainConfig {
            inner_steps: 0,
            ..tiny_cfg()
        };
        let meta = init_state(std::slice::from_ref(&g), &cfg);
        let rng = SeededRng::new(11);

        let setup = prepare_task(&g, Some(&meta.structure), &cfg, &rng).unwrap();
        let mut model = TaskModel::from_meta(&meta, "a", &cfg).unwrap();
        let loss_rng = rng.split(555);
        let terms = task_loss(&g, &setup.inputs, &setup.split.support, &mut model, &cfg, &mut loss_rng.clone()).unwrap();

        // hand-compose the same pipeline from the public pieces
        let split = split_episode(&g, cfg.support_fraction, &mut rng.split(STREAM_SPLIT)).unwrap();
        assert_eq!(split, setup.split);
        let f = edge_probs(g.features(), &meta.structure).unwrap();
        let mut samples =
            sample_structures(&f, cfg.struct_cfg.num_samples, &mut rng.split(STREAM_SAMPLE)).unwrap();
        fill_rewards(&mut samples, g.features(), &cfg.struct_cfg);
        let a_hat = normalize_adjacency(&g);
        let a_prime_hat = normalize_dense_adjacency(&samples[0].adjacency);
        let (reps, _) = gcn_forward(g.features(), &a_hat, &a_prime_hat, &model.net.gnn, cfg.mixing).unwrap();
        let mut rep_copy = meta.rep.clone();
        let mut elbo_sum = 0.0;
        let mut noise = loss_rng.clone();
        for &node in &split.support {
            let out = elbo_node(
                reps.row(node),
                g.labels()[node],
                cfg.elbo_samples,
                &rep_copy,
                &mut noise,
            )
            .unwrap();
            elbo_sum += out.value;
        }
        let mut struct_copy = meta.structure.clone();
        let raw = reinforce_surrogate_loss(&samples, g.features(), &mut struct_copy, 0.0).unwrap();
        let _ = &mut rep_copy;
        let expected = -elbo_sum / split.support.len() as f64 + cfg.reg_weight * raw;
        assert!(
            (terms.total - expected).abs() < 1e-12,
            "task_loss {} vs composed {expected}",
            terms.total
        );
    }

    #[test]
    fn inner_adapt_with_zero_rate_or_steps_keeps_meta() {
        let g = tiny_graph(4, "a");
        for cfg in [
            TrainConfig {
                inner_lr: f64::MIN_POSITIVE,
                ..tiny_cfg()
            },
            TrainConfig {
                inner_steps: 0,
                ..tiny_cfg()
            },
        ] {
            let meta = init_state(std::slice::from_ref(&g), &cfg);
            let outcome = inner_adapt(&g, &meta, &cfg, &SeededRng::new(13)).unwrap();
            if cfg.inner_steps == 0 {
                assert!(params_equal(
                    &outcome.model.structure.as_ref().unwrap().params(),
                    &meta.structure.params()
                ));
                assert!(params_equal(
                    &outcome.model.rep.as_ref().unwrap().params(),
                    &meta.rep.params()
                ));
                assert!(outcome.support_trace.is_empty());
            } else {
                // steps ran but with a vanishing rate: values drift by ~0
                let drift: f64 = outcome
                    .model
                    .structure
                    .as_ref()
                    .unwrap()
                    .params()
                    .iter()
                    .zip(meta.structure.params())
                    .map(|(a, b)| a.value.max_abs_diff(&b.value))
                    .fold(0.0, f64::max);
                assert!(drift < 1e-290);
            }
            assert!(outcome.losses.query.total.is_finite());
        }
    }

    #[test]
    fn single_inner_step_is_one_sgd_update() {
        let g = tiny_graph(5, "a");
        let cfg = TrainConfig {
            inner_steps: 1,
            ..tiny_cfg()
        };
        let meta = init_state(std::slice::from_ref(&g), &cfg);
        let rng = SeededRng::new(17);
        let outcome = inner_adapt(&g, &meta, &cfg, &rng).unwrap();

        // recompute the step-0 gradient at the meta parameters
        let setup = prepare_task(&g, Some(&meta.structure), &cfg, &rng).unwrap();
        let mut model = TaskModel::from_meta(&meta, "a", &cfg).unwrap();
        task_loss(
            &g,
            &setup.inputs,
            &setup.split.support,
            &mut model,
            &cfg,
            &mut rng.split(STREAM_STEP_BASE),
        )
        .unwrap();
        for (adapted, base) in outcome.model.params().iter().zip(model.params()) {
            for i in 0..adapted.value.data().len() {
                let want = base.value.data()[i] - cfg.inner_lr * base.grad.data()[i];
                assert!(
                    (adapted.value.data()[i] - want).abs() < 1e-15,
                    "{} entry {i}",
                    adapted.name()
                );
            }
        }
    }

    #[test]
    fn meta_step_zero_outer_rate_keeps_shared_params() {
        let g0 = tiny_graph(6, "a");
        let g1 = tiny_graph(7, "b");
        let cfg = TrainConfig {
            outer_lr: f64::MIN_POSITIVE,
            ..tiny_cfg()
        };
        let sources = vec![g0, g1];
        let mut meta = init_state(&sources, &cfg);
        let before_struct = meta.structure.clone();
        let before_rep = meta.rep.clone();
        let epoch_rng = SeededRng::new(cfg.seed).split(STREAM_EPOCH).split(0);
        meta_step(&sources.iter().collect::<Vec<_>>(), &mut meta, &cfg, &epoch_rng).unwrap();
        let drift: f64 = meta
            .structure
            .params()
            .iter()
            .zip(before_struct.params())
            .chain(meta.rep.params().iter().zip(before_rep.params()))
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max);
        assert!(drift < 1e-290);
    }

    #[test]
    fn meta_step_with_zero_inner_steps_is_plain_gradient_step() {
        // two identical-content tasks: the outer update must equal one SGD
        // step on the mean query gradient evaluated at the meta parameters
        let mut g0 = tiny_graph(8, "t0");
        let mut g1 = tiny_graph(8, "t1");
        // same features/edges, different domain names
        assert_eq!(g0.features(), g1.features());
        let cfg = TrainConfig {
            inner_steps: 0,
            ..tiny_cfg()
        };
        let sources = vec![g0.clone(), g1.clone()];
        let mut meta = init_state(&sources, &cfg);
        let before = meta.clone();
        let epoch_rng = SeededRng::new(cfg.seed).split(STREAM_EPOCH).split(0);
        meta_step(&sources.iter().collect::<Vec<_>>(), &mut meta, &cfg, &epoch_rng).unwrap();

        // manual mean query gradient at theta
        let mut mean: Option<Vec<f64>> = None;
        for (i, g) in [&mut g0, &mut g1].into_iter().enumerate() {
            let task_rng = epoch_rng.split(i as u64);
            let setup = prepare_task(g, Some(&before.structure), &cfg, &task_rng).unwrap();
            let mut model = TaskModel::from_meta(&before, g.domain(), &cfg).unwrap();
            task_loss(
                g,
                &setup.inputs,
                &setup.split.query,
                &mut model,
                &cfg,
                &mut task_rng.split(STREAM_QUERY),
            )
            .unwrap();
            let shared = model.shared_len();
            let grads = model.flat_grads()[..shared].to_vec();
            let acc = mean.get_or_insert_with(|| vec![0.0; grads.len()]);
            for (a, v) in acc.iter_mut().zip(&grads) {
                *a += 0.5 * v;
            }
        }
        let grad = mean.unwrap();
        let mut offset = 0;
        for (after, base) in meta
            .meta_params(cfg.ablation)
            .iter()
            .zip(before.meta_params(cfg.ablation))
        {
            for i in 0..after.value.data().len() {
                let want = base.value.data()[i] - cfg.outer_lr * grad[offset + i];
                assert!(
                    (after.value.data()[i] - want).abs() < 1e-15,
                    "{} entry {i}",
                    after.name()
                );
            }
            offset += after.value.data().len();
        }
    }

    #[test]
    fn outer_step_only_touches_task_nets_through_inner_persistence() {
        let g = tiny_graph(9, "a");
        let cfg = tiny_cfg();
        let sources = vec![g.clone()];
        let mut meta = init_state(&sources, &cfg);
        let epoch_rng = SeededRng::new(cfg.seed).split(STREAM_EPOCH).split(0);
        let standalone = inner_adapt(&g, &meta.clone(), &cfg, &epoch_rng.split(0)).unwrap();
        meta_step(&[&g], &mut meta, &cfg, &epoch_rng).unwrap();
        assert!(params_equal(
            &meta.task_nets["a"].params(),
            &standalone.model.net.params()
        ));
    }

    #[test]
    fn inner_structure_exclusion_freezes_struct_params() {
        let g = tiny_graph(10, "a");
        let cfg = TrainConfig {
            ablation: AblationMode::NoInnerStructure,
            ..tiny_cfg()
        };
        let meta = init_state(std::slice::from_ref(&g), &cfg);
        let outcome = inner_adapt(&g, &meta, &cfg, &SeededRng::new(21)).unwrap();
        assert!(params_equal(
            &outcome.model.structure.as_ref().unwrap().params(),
            &meta.structure.params()
        ));
        // representation did adapt
        assert!(!params_equal(
            &outcome.model.rep.as_ref().unwrap().params(),
            &meta.rep.params()
        ));
    }

    #[test]
    fn inner_exclusion_modes_reduce_to_full_without_inner_steps() {
        let sources = vec![tiny_graph(11, "a"), tiny_graph(12, "b")];
        let mut states = Vec::new();
        for mode in [
            AblationMode::Full,
            AblationMode::NoInnerStructure,
            AblationMode::NoInnerRepresentation,
        ] {
            let cfg = TrainConfig {
                inner_steps: 0,
                ablation: mode,
                epochs: 2,
                ..tiny_cfg()
            };
            let (state, _) = train(&sources, &cfg).unwrap();
            states.push(state);
        }
        for other in &states[1..] {
            assert!(params_equal(
                &states[0].structure.params(),
                &other.structure.params()
            ));
            assert!(params_equal(&states[0].rep.params(), &other.rep.params()));
        }
    }

    #[test]
    fn first_and_second_order_agree_without_inner_steps() {
        let sources = vec![tiny_graph(13, "a")];
        let mut outcomes = Vec::new();
        for order in [MamlOrder::First, MamlOrder::Second] {
            let cfg = TrainConfig {
                inner_steps: 0,
                maml_order: order,
                epochs: 1,
                ..tiny_cfg()
            };
            let (state, _) = train(&sources, &cfg).unwrap();
            outcomes.push(state);
        }
        assert!(params_equal(
            &outcomes[0].structure.params(),
            &outcomes[1].structure.params()
        ));
        assert!(params_equal(&outcomes[0].rep.params(), &outcomes[1].rep.params()));
    }

    #[test]
    fn train_is_deterministic_and_zero_epochs_is_identity() {
        let sources = vec![tiny_graph(14, "a"), tiny_graph(15, "b")];
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let (state, records) = train(&sources, &cfg).unwrap();
        assert!(records.is_empty());
        let fresh = init_state(&sources, &cfg);
        assert!(params_equal(&state.structure.params(), &fresh.structure.params()));

        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let (a, ra) = train(&sources, &cfg).unwrap();
        let (b, rb) = train(&sources, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert!(params_equal(&a.structure.params(), &b.structure.params()));
        assert!(params_equal(&a.rep.params(), &b.rep.params()));
        for (x, y) in a.task_nets.values().zip(b.task_nets.values()) {
            assert!(params_equal(&x.params(), &y.params()));
        }
        for r in &ra {
            assert!(r.support_loss.is_finite() && r.query_loss.is_finite());
        }
    }

    #[test]
    fn no_maml_never_updates_shared_params() {
        let sources = vec![tiny_graph(16, "a"), tiny_graph(17, "b")];
        let cfg = TrainConfig {
            ablation: AblationMode::NoMaml,
            epochs: 3,
            ..tiny_cfg()
        };
        let (state, _) = train(&sources, &cfg).unwrap();
        let fresh = init_state(&sources, &cfg);
        assert!(params_equal(&state.structure.params(), &fresh.structure.params()));
        assert!(params_equal(&state.rep.params(), &fresh.rep.params()));
        // but the per-task networks moved
        assert!(!params_equal(
            &state.task_nets["a"].params(),
            &fresh.task_nets["a"].params()
        ));
    }

    #[test]
    fn erm_trains_a_single_pooled_network() {
        let sources = vec![tiny_graph(18, "a"), tiny_graph(19, "b")];
        let cfg = TrainConfig {
            ablation: AblationMode::Erm,
            epochs: 4,
            ..tiny_cfg()
        };
        let (state, records) = train(&sources, &cfg).unwrap();
        assert_eq!(state.task_nets.len(), 1);
        assert!(state.task_nets.contains_key(POOLED_NET));
        assert!(records.iter().all(|r| r.query_loss.is_finite()));
        let acc = fine_tune_and_eval(&state, &sources[0], 0, &cfg, &SeededRng::new(5)).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn untrained_eval_sits_near_chance_on_balanced_classes() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let target_cfg = SbmDomainConfig {
            n: 40,
            num_classes: 2,
            feature_dim: 3,
            class_means: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            noise_stddev: 0.4,
            p_in: 0.4,
            p_out: 0.1,
            rewire_fraction: 0.0,
        };
        let target = generate_sbm_domain(&target_cfg, "t", &mut SeededRng::new(30)).unwrap();
        let sources = vec![tiny_graph(31, "a")];
        let mut total = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let (state, _) = train(&sources, &cfg).unwrap();
            let acc = fine_tune_and_eval(&state, &target, 0, &cfg, &SeededRng::new(1000 + seed)).unwrap();
            assert!((0.0..=1.0).contains(&acc));
            total += acc;
        }
        let mean = total / seeds as f64;
        assert!((mean - 0.5).abs() < 0.15, "mean accuracy {mean}");
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_mismatches() {
        let sources = vec![tiny_graph(32, "a"), tiny_graph(33, "b")];
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let (state, _) = train(&sources, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let cfg_json = serde_json::to_value(&cfg).unwrap();
        save_checkpoint(&state, &cfg_json, 2, &path).unwrap();

        let mut restored = init_state(&sources, &cfg);
        let (stored_cfg, next_epoch) = load_checkpoint_into(&mut restored, &path).unwrap();
        assert_eq!(next_epoch, 2);
        assert_eq!(stored_cfg, cfg_json);
        assert!(params_equal(&restored.structure.params(), &state.structure.params()));
        assert!(params_equal(&restored.rep.params(), &state.rep.params()));
        for (x, y) in restored.task_nets.values().zip(state.task_nets.values()) {
            assert!(params_equal(&x.params(), &y.params()));
        }

        // different dimensions are rejected with a shape complaint
        let bad_cfg = TrainConfig {
            rep_dim: 5,
            ..cfg.clone()
        };
        let mut bad = init_state(&sources, &bad_cfg);
        let err = load_checkpoint_into(&mut bad, &path).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
    }

    #[test]
    fn losses_stay_finite_over_many_epochs() {
        let sources = vec![tiny_graph(34, "a"), tiny_graph(35, "b")];
        let cfg = TrainConfig {
            epochs: 25,
            ..tiny_cfg()
        };
        let (_, records) = train(&sources, &cfg).unwrap();
        for r in &records {
            assert!(
                r.support_loss.is_finite() && r.query_loss.is_finite(),
                "epoch {} produced a non-finite loss",
                r.epoch
            );
        }
    }
}
