//! Command-line entry points: data generation, training, evaluation,
//! ablation sweeps, shift diagnostics, and the gradient check.
//!
//! Every command is driven by a single JSON run configuration plus a seed,
//! writes the exact configuration it ran with into its output directory,
//! and produces byte-identical outputs when rerun with the same inputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    energy_score, export_embeddings, format_sig9, histogram, js_distance, model_representations,
    HISTOGRAM_BINS,
};
use crate::graph::{
    generate_sbm_domain, load_graph, pad_to, save_graph, zero_pad_align, Graph, SbmDomainConfig,
    ScenarioMode, ScenarioSpec,
};
use crate::gradcheck::{run_suite, CheckReport};
use crate::meta::{
    fine_tune_and_eval, load_checkpoint_into, peek_checkpoint, resume_training, save_checkpoint,
    AblationMode, EpochRecord, MetaState, TrainConfig, POOLED_NET,
};
use crate::representation::{class_logits, encode_all};
use crate::rng::SeededRng;
use crate::{Error, Result};

const STREAM_GEN: u64 = 0xD0;
/// Evaluation rng stream label; part of the reproducibility contract.
pub const STREAM_EVAL: u64 = 0xE7;
const STREAM_DIAG: u64 = 0xD1;

/// One synthetic domain: its name, dataset-family tag, and generator knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default = "default_family")]
    pub family: String,
    pub sbm: SbmDomainConfig,
}

fn default_family() -> String {
    "SBM".to_string()
}

fn default_eval_steps() -> Vec<usize> {
    vec![1, 5, 10, 20, 30, 40]
}

fn default_ablate_modes() -> Vec<AblationMode> {
    AblationMode::ALL.to_vec()
}

fn default_ablate_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_temperature() -> f64 {
    1.0
}

/// The full, serializable description of a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Where graph files live (for train/ablate/eval); typically the
    /// output directory of `generate`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_steps")]
    pub eval_steps: Vec<usize>,
    #[serde(default = "default_ablate_modes")]
    pub ablate_modes: Vec<AblationMode>,
    #[serde(default = "default_ablate_seeds")]
    pub ablate_seeds: Vec<u64>,
    #[serde(default = "default_temperature")]
    pub energy_temperature: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        let mut names = std::collections::HashSet::new();
        for d in &self.domains {
            if !names.insert(&d.name) {
                return Err(Error::Config(format!("duplicate domain name {:?}", d.name)));
            }
            d.sbm.validate()?;
        }
        for wanted in self.scenario.sources.iter().chain([&self.scenario.target]) {
            if !self.domains.iter().any(|d| &d.name == wanted) {
                return Err(Error::Config(format!(
                    "scenario references unknown domain {wanted:?}"
                )));
            }
        }
        self.train.validate()
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory (set out_dir or pass --out)".into()))
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no data directory (set data_dir in the config)".into()))
    }

    fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }

    /// Feature and class dimensions after aligning the source domains.
    fn source_dims(&self) -> Result<(usize, usize)> {
        let mut dim = 0;
        let mut classes = 0;
        for name in &self.scenario.sources {
            let d = self
                .domain(name)
                .ok_or_else(|| Error::Config(format!("unknown source domain {name:?}")))?;
            dim = dim.max(d.sbm.feature_dim);
            classes = classes.max(d.sbm.num_classes);
        }
        Ok((dim, classes))
    }

    /// Canonical synthetic suite for each cross-domain scenario kind:
    /// `S1T1` keeps one generator family and varies it mildly per domain,
    /// `S1T2` evaluates on a different family with smaller feature/class
    /// dimensions, and `S12T3` trains on two families at once. The latter
    /// two exercise the zero-padding alignment.
    pub fn example(mode: ScenarioMode, seed: u64) -> RunConfig {
        fn spread_means(classes: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
            (0..classes)
                .map(|c| (0..dim).map(|j| if j == c % dim { scale } else { 0.0 }).collect())
                .collect()
        }
        let family_a = |name: &str, p_in: f64, rewire: f64, scale: f64| DomainSpec {
            name: name.to_string(),
            family: "SBM-A".to_string(),
            sbm: SbmDomainConfig {
                n: 40,
                num_classes: 3,
                feature_dim: 6,
                class_means: spread_means(3, 6, scale),
                noise_stddev: 0.5,
                p_in,
                p_out: 0.05,
                rewire_fraction: rewire,
            },
        };
        let family_b = |name: &str| DomainSpec {
            name: name.to_string(),
            family: "SBM-B".to_string(),
            sbm: SbmDomainConfig {
                n: 40,
                num_classes: 2,
                feature_dim: 4,
                class_means: spread_means(2, 4, 0.8),
                noise_stddev: 0.6,
                p_in: 0.25,
                p_out: 0.08,
                rewire_fraction: 0.2,
            },
        };
        let family_c = |name: &str| DomainSpec {
            name: name.to_string(),
            family: "SBM-C".to_string(),
            sbm: SbmDomainConfig {
                n: 40,
                num_classes: 3,
                feature_dim: 5,
                class_means: spread_means(3, 5, 0.7),
                noise_stddev: 0.6,
                p_in: 0.3,
                p_out: 0.1,
                rewire_fraction: 0.25,
            },
        };
        let (domains, scenario) = match mode {
            ScenarioMode::S1T1 => (
                vec![
                    family_a("a0", 0.30, 0.00, 1.0),
                    family_a("a1", 0.25, 0.05, 0.9),
                    family_a("a2", 0.35, 0.10, 1.1),
                    family_a("a3", 0.28, 0.15, 0.8),
                ],
                ScenarioSpec {
                    sources: vec!["a0".into(), "a1".into(), "a2".into()],
                    target: "a3".into(),
                    mode,
                },
            ),
            ScenarioMode::S1T2 => (
                vec![
                    family_a("a0", 0.30, 0.00, 1.0),
                    family_a("a1", 0.25, 0.05, 0.9),
                    family_a("a2", 0.35, 0.10, 1.1),
                    family_b("b0"),
                ],
                ScenarioSpec {
                    sources: vec!["a0".into(), "a1".into(), "a2".into()],
                    target: "b0".into(),
                    mode,
                },
            ),
            ScenarioMode::S12T3 => (
                vec![
                    family_a("a0", 0.30, 0.00, 1.0),
                    family_a("a1", 0.25, 0.05, 0.9),
                    family_b("b0"),
                    family_c("c0"),
                ],
                ScenarioSpec {
                    sources: vec!["a0".into(), "a1".into(), "b0".into()],
                    target: "c0".into(),
                    mode,
                },
            ),
        };
        RunConfig {
            seed,
            out_dir: None,
            data_dir: None,
            scenario,
            domains,
            train: TrainConfig {
                seed,
                epochs: 20,
                ..TrainConfig::default()
            },
            eval_steps: default_eval_steps(),
            ablate_modes: default_ablate_modes(),
            ablate_seeds: default_ablate_seeds(),
            energy_temperature: default_temperature(),
        }
    }
}

/// Parses a config file and applies command-line overrides. The seed always
/// flows into the training configuration.
pub fn load_run_config(
    path: impl AsRef<Path>,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut cfg: RunConfig = serde_json::from_str(&text)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if let Some(out) = out_override {
        cfg.out_dir = Some(out);
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_json_value(&serde_json::to_value(cfg)?, &dir.join("config.json"))
}

fn write_json_value(value: &serde_json::Value, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    family: String,
    file: String,
    stream: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    domains: Vec<ManifestEntry>,
}

/// Generates every configured domain graph plus a manifest.
pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = cfg.out_dir()?;
    ensure_out_dir(out, force)?;
    let root = SeededRng::new(cfg.seed).split(STREAM_GEN);
    let mut entries = Vec::new();
    for (i, spec) in cfg.domains.iter().enumerate() {
        let mut rng = root.split(i as u64);
        let graph = generate_sbm_domain(&spec.sbm, &spec.name, &mut rng)?;
        let file = format!("{}.json", spec.name);
        save_graph(&graph, out.join(&file))?;
        entries.push(ManifestEntry {
            name: spec.name.clone(),
            family: spec.family.clone(),
            file,
            stream: rng.stream(),
        });
    }
    write_json_value(
        &serde_json::to_value(Manifest {
            seed: cfg.seed,
            domains: entries,
        })?,
        &out.join("manifest.json"),
    )?;
    write_config(cfg, out)
}

fn load_sources(cfg: &RunConfig) -> Result<Vec<Graph>> {
    let data = cfg.data_dir()?;
    let mut missing = Vec::new();
    let mut graphs = Vec::new();
    for name in &cfg.scenario.sources {
        let path = data.join(format!("{name}.json"));
        if !path.exists() {
            missing.push(name.clone());
            continue;
        }
        graphs.push(load_graph(&path)?);
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing graph files for source domains: {missing:?}"
        )));
    }
    zero_pad_align(&graphs)
}

fn load_target(cfg: &RunConfig, dim: usize, classes: usize) -> Result<Graph> {
    let data = cfg.data_dir()?;
    let path = data.join(format!("{}.json", cfg.scenario.target));
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing graph file for target domain: [{:?}]",
            cfg.scenario.target
        )));
    }
    let graph = load_graph(&path)?;
    pad_to(&graph, dim.max(graph.feature_dim()), classes.max(graph.num_classes()))
}

fn write_metrics_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,support_loss,query_loss,query_primary,query_reg\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            format_sig9(r.support_loss),
            format_sig9(r.query_loss),
            format_sig9(r.query_primary),
            format_sig9(r.query_reg)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Meta-trains on the scenario's source graphs; writes per-epoch metrics, a
/// checkpoint, and the config. `resume` continues from a saved checkpoint,
/// keeping absolute epoch numbering.
pub fn cmd_train(cfg: &RunConfig, force: bool, resume: Option<&Path>) -> Result<()> {
    let out = cfg.out_dir()?;
    ensure_out_dir(out, force)?;
    let sources = load_sources(cfg)?;
    let feature_dim = sources[0].feature_dim();
    let num_classes = sources[0].num_classes();
    let domains: Vec<String> = sources.iter().map(|g| g.domain().to_string()).collect();

    let mut meta = MetaState::init(
        &cfg.train,
        feature_dim,
        num_classes,
        &domains,
        &mut SeededRng::new(cfg.train.seed),
    );
    let start_epoch = match resume {
        Some(path) => {
            let (_, next_epoch) = load_checkpoint_into(&mut meta, path)?;
            next_epoch
        }
        None => 0,
    };
    let records = resume_training(&sources, &mut meta, &cfg.train, start_epoch)?;
    write_metrics_csv(&records, &out.join("metrics.csv"))?;
    save_checkpoint(
        &meta,
        &serde_json::to_value(cfg)?,
        start_epoch + cfg.train.epochs,
        out.join("checkpoint.json"),
    )?;
    write_config(cfg, out)
}

/// Rebuilds the model skeleton a checkpoint expects and loads it.
fn load_trained(checkpoint: &Path) -> Result<(RunConfig, MetaState, usize, usize)> {
    let (stored, _, domains) = peek_checkpoint(checkpoint)?;
    let cfg: RunConfig = serde_json::from_value(stored)?;
    let (dim, classes) = cfg.source_dims()?;
    let init_domains: Vec<String> = domains
        .iter()
        .filter(|d| d.as_str() != POOLED_NET)
        .cloned()
        .collect();
    let mut meta = MetaState::init(
        &cfg.train,
        dim,
        classes,
        &init_domains,
        &mut SeededRng::new(cfg.train.seed),
    );
    load_checkpoint_into(&mut meta, checkpoint)?;
    Ok((cfg, meta, dim, classes))
}

/// One fine-tuning row of the evaluation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub steps: usize,
    pub accuracy: f64,
    pub query_size: usize,
}

/// Fine-tunes a trained checkpoint on the target support set for each step
/// count and reports query accuracy. Duplicate step counts are dropped.
pub fn cmd_eval(
    checkpoint: &Path,
    target_path: &Path,
    steps: &[usize],
    out_dir: &Path,
    force: bool,
    seed_override: Option<u64>,
) -> Result<Vec<EvalRow>> {
    ensure_out_dir(out_dir, force)?;
    let (mut cfg, meta, dim, classes) = load_trained(checkpoint)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    let raw = load_graph(target_path)?;
    if raw.feature_dim() > dim || raw.num_classes() > classes {
        return Err(Error::Config(format!(
            "target graph dimensions (D={}, C={}) exceed the trained model (D={dim}, C={classes})",
            raw.feature_dim(),
            raw.num_classes()
        )));
    }
    let target = pad_to(&raw, dim, classes)?;

    let mut wanted: Vec<usize> = if steps.is_empty() {
        cfg.eval_steps.clone()
    } else {
        steps.to_vec()
    };
    let before = wanted.len();
    wanted.sort_unstable();
    wanted.dedup();
    if wanted.len() != before {
        log::warn!("duplicate step entries deduplicated");
    }

    let rng = SeededRng::new(cfg.seed).split(STREAM_EVAL);
    let mut rows = Vec::new();
    let mut csv = String::from("steps,accuracy,query_size\n");
    for &s in &wanted {
        let report = crate::meta::fine_tune_and_report(&meta, &target, s, &cfg.train, &rng)?;
        csv.push_str(&format!(
            "{s},{},{}\n",
            format_sig9(report.accuracy),
            report.query_size
        ));
        rows.push(EvalRow {
            steps: s,
            accuracy: report.accuracy,
            query_size: report.query_size,
        });
    }
    std::fs::write(out_dir.join("eval.csv"), csv)?;
    write_config(&cfg, out_dir)?;
    Ok(rows)
}

/// One ablation row: accuracy statistics for a mode over the seed set.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateRow {
    pub mode: AblationMode,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: usize,
}

/// Full train + fine-tune pipeline for one mode and seed, identical to what
/// `cmd_train` followed by `cmd_eval` at `finetune_steps` produces.
pub fn run_pipeline(
    sources: &[Graph],
    target: &Graph,
    train_cfg: &TrainConfig,
) -> Result<f64> {
    let (state, _) = crate::meta::train(sources, train_cfg)?;
    let rng = SeededRng::new(train_cfg.seed).split(STREAM_EVAL);
    fine_tune_and_eval(&state, target, train_cfg.finetune_steps, train_cfg, &rng)
}

/// Trains and evaluates every requested mode over the configured seeds.
pub fn cmd_ablate(
    cfg: &RunConfig,
    force: bool,
    mode_filter: Option<&[AblationMode]>,
) -> Result<Vec<AblateRow>> {
    let out = cfg.out_dir()?;
    ensure_out_dir(out, force)?;
    let sources = load_sources(cfg)?;
    let target = load_target(cfg, sources[0].feature_dim(), sources[0].num_classes())?;
    let modes: Vec<AblationMode> = match mode_filter {
        Some(filter) => cfg
            .ablate_modes
            .iter()
            .copied()
            .filter(|m| filter.contains(m))
            .collect(),
        None => cfg.ablate_modes.clone(),
    };
    if modes.is_empty() {
        return Err(Error::Config("no ablation modes selected".into()));
    }

    let mut rows = Vec::new();
    let mut csv = String::from("mode,mean_accuracy,std_accuracy,seeds\n");
    let mut per_seed_csv = String::from("mode,seed,accuracy\n");
    for &mode in &modes {
        let mut accs = Vec::new();
        for &seed in &cfg.ablate_seeds {
            let tc = TrainConfig {
                ablation: mode,
                seed,
                ..cfg.train.clone()
            };
            let acc = run_pipeline(&sources, &target, &tc)?;
            per_seed_csv.push_str(&format!("{},{seed},{}\n", mode.name(), format_sig9(acc)));
            accs.push(acc);
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let row = AblateRow {
            mode,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
            seeds: accs.len(),
        };
        csv.push_str(&format!(
            "{},{},{},{}\n",
            mode.name(),
            format_sig9(row.mean_accuracy),
            format_sig9(row.std_accuracy),
            row.seeds
        ));
        rows.push(row);
    }
    std::fs::write(out.join("ablate.csv"), csv)?;
    std::fs::write(out.join("ablate_per_seed.csv"), per_seed_csv)?;
    write_config(cfg, out)?;
    Ok(rows)
}

/// Per-node energies, pairwise JS distances between the domains' energy
/// histograms, and embedding exports for the given graphs.
pub fn cmd_diagnose(
    checkpoint: &Path,
    graph_paths: &[PathBuf],
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    ensure_out_dir(out_dir, force)?;
    if graph_paths.is_empty() {
        return Err(Error::Config("diagnose needs at least one graph".into()));
    }
    let (cfg, meta, dim, classes) = load_trained(checkpoint)?;
    let rng = SeededRng::new(cfg.seed).split(STREAM_DIAG);

    let mut tags = Vec::new();
    let mut all_energies: Vec<Vec<f64>> = Vec::new();
    let mut energy_csv = String::from("tag,node_id,energy\n");
    for (i, path) in graph_paths.iter().enumerate() {
        let raw = load_graph(path)?;
        let graph = pad_to(&raw, dim.max(raw.feature_dim()), classes.max(raw.num_classes()))?;
        let family = cfg
            .domain(graph.domain())
            .map(|d| d.family.clone())
            .unwrap_or_else(default_family);
        let tag = format!("{family} - {}", graph.domain());
        let graph_rng = rng.split(i as u64);
        let reps = model_representations(&graph, &meta, &cfg.train, &graph_rng)?;

        let energies: Vec<f64> = if cfg.train.ablation.uses_representation() {
            let semantic = encode_all(&reps, &meta.rep.encoders.semantic);
            (0..graph.num_nodes())
                .map(|node| {
                    let logits = class_logits(semantic.mean.row(node), &meta.rep.classifier);
                    energy_score(&logits, cfg.energy_temperature)
                })
                .collect::<Result<_>>()?
        } else {
            let net = meta
                .task_nets
                .get(graph.domain())
                .or_else(|| meta.task_nets.get(POOLED_NET))
                .ok_or_else(|| Error::Config("no trained head for energy computation".into()))?;
            let head = net
                .head
                .as_ref()
                .ok_or_else(|| Error::Config("trained network has no classification head".into()))?;
            (0..graph.num_nodes())
                .map(|node| energy_score(&class_logits(reps.row(node), head), cfg.energy_temperature))
                .collect::<Result<_>>()?
        };
        for (node, e) in energies.iter().enumerate() {
            energy_csv.push_str(&format!("{tag},{node},{}\n", format_sig9(*e)));
        }
        export_embeddings(
            &graph,
            &reps,
            &meta,
            out_dir.join(format!("embeddings_{}.csv", graph.domain())),
        )?;
        tags.push(tag);
        all_energies.push(energies);
    }
    std::fs::write(out_dir.join("energy.csv"), energy_csv)?;

    // pooled-range histograms, then the pairwise distance matrix
    let lo = all_energies
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, &e| m.min(e));
    let hi = all_energies
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |m, &e| m.max(e));
    let dists: Vec<_> = all_energies
        .iter()
        .map(|e| histogram(e, HISTOGRAM_BINS, lo, hi))
        .collect::<Result<_>>()?;
    let mut js_csv = String::from("domain");
    for t in &tags {
        js_csv.push_str(&format!(",{t}"));
    }
    js_csv.push('\n');
    for (i, t) in tags.iter().enumerate() {
        js_csv.push_str(t);
        for j in 0..tags.len() {
            let d = if i == j {
                0.0
            } else {
                js_distance(&dists[i], &dists[j])?
            };
            js_csv.push_str(&format!(",{}", format_sig9(d)));
        }
        js_csv.push('\n');
    }
    std::fs::write(out_dir.join("js_matrix.csv"), js_csv)?;
    write_config(&cfg, out_dir)?;
    Ok(())
}

/// Runs every gradient check and prints one line per operation. Returns
/// whether everything passed.
pub fn cmd_gradcheck(writer: &mut impl Write) -> Result<bool> {
    let reports = run_suite(None)?;
    let mut ok = true;
    for CheckReport {
        operation,
        max_rel_err,
        instances,
    } in &reports
    {
        let status = if *max_rel_err <= crate::gradcheck::GRAD_TOLERANCE {
            "PASS"
        } else {
            ok = false;
            "FAIL"
        };
        writeln!(
            writer,
            "{status} {operation}: max rel err {max_rel_err:.3e} over {instances} instances"
        )?;
    }
    writeln!(writer, "checked {} operations", reports.len())?;
    Ok(ok)
}

/// Deterministic per-seed accuracies for a list of modes, reused by the
/// statistical acceptance experiments.
pub fn mode_accuracies(
    cfg: &RunConfig,
    modes: &[AblationMode],
    seeds: &[u64],
    sources: &[Graph],
    target: &Graph,
) -> Result<BTreeMap<AblationMode, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for &mode in modes {
        let mut accs = Vec::new();
        for &seed in seeds {
            let tc = TrainConfig {
                ablation: mode,
                seed,
                ..cfg.train.clone()
            };
            accs.push(run_pipeline(sources, target, &tc)?);
        }
        out.insert(mode, accs);
    }
    Ok(out)
}
