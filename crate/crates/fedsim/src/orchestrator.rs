//! Experiment runner: config parsing, seeded run execution, trace emission,
//! comparative reports, and fairness statistics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_clients, ClusterAssignment, FeatureSubset, DEFAULT_MIN_SIM};
use crate::data::{
    assign_statuses, load_csv, partition_features, partition_features_grouped, synth_digits,
    synth_tabular, ClientDataset, ClientStatus, CsvSchema, FullDataset, StatusPlan,
    SynthDigitsSpec, SynthTabularSpec,
};
use crate::error::{Error, Result};
use crate::model::{search_encoder, ClientModel, ModelSpec, Task};
use crate::protocols::{
    run_baseline, run_diven, run_diven_c, run_fusion, BaselineKind, DivEnConfig, DivEnVariant,
    DumpOptions, FusionConfig, RunResult, SimClient,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    SynthTabular(SynthTabularSpec),
    SynthDigits(SynthDigitsSpec),
    Csv {
        path: PathBuf,
        /// Inline schema or a path to a schema JSON file.
        #[serde(default)]
        schema: Option<CsvSchema>,
        #[serde(default)]
        schema_path: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    /// Shared feature core plus a per-client random draw.
    UniformCore {
        n_clients: usize,
        max_features: usize,
        #[serde(default = "default_core")]
        core_size: usize,
    },
    /// Planted feature groups (the two-group synthetic suites).
    Grouped {
        n_clients: usize,
        n_groups: usize,
        features_per_client: usize,
        cross_overlap: usize,
    },
    /// One client per generated domain (synthetic digits).
    PerDomain,
}

fn default_core() -> usize {
    2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Single,
    ClassAgg,
    Fedavg,
    Diven,
    DivenMix,
    DivenC,
    Fedfusion,
    FedfusionStar,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::ClassAgg => "class_agg",
            Method::Fedavg => "fedavg",
            Method::Diven => "diven",
            Method::DivenMix => "diven_mix",
            Method::DivenC => "diven_c",
            Method::Fedfusion => "fedfusion",
            Method::FedfusionStar => "fedfusion_star",
        }
    }

    pub fn is_fusion(&self) -> bool {
        matches!(self, Method::Fedfusion | Method::FedfusionStar)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder_widths: Option<Vec<usize>>,
    /// Defaults to one hidden layer of width 2ℓ.
    #[serde(default)]
    pub classifier_hidden: Option<Vec<usize>>,
    /// When present, each client picks its encoder from this menu by a
    /// seeded evaluation.
    #[serde(default)]
    pub encoder_menu: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub search_budget: Option<usize>,
    #[serde(default = "default_search_epochs")]
    pub search_epochs: usize,
    #[serde(default = "default_search_lr")]
    pub search_lr: f64,
}

fn default_search_epochs() -> usize {
    30
}

fn default_search_lr() -> f64 {
    0.1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Free-form scenario label used in comparison tables.
    #[serde(default)]
    pub scenario: Option<String>,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub statuses: Option<Vec<StatusPlan>>,
    pub method: Method,
    #[serde(default)]
    pub diven: Option<DivEnConfig>,
    #[serde(default)]
    pub fusion: Option<FusionConfig>,
    pub model: ModelConfig,
    #[serde(default = "default_min_sim")]
    pub min_sim: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_min_sim() -> f64 {
    DEFAULT_MIN_SIM
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        match self.method {
            Method::Diven | Method::DivenMix | Method::DivenC | Method::Single | Method::ClassAgg | Method::Fedavg => {
                let d = self
                    .diven
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("method {} requires a `diven` section", self.method.name())))?;
                d.validate()?;
                let expected = match self.method {
                    Method::Diven => Some(DivEnVariant::Diven),
                    Method::DivenMix => Some(DivEnVariant::DivenMix),
                    Method::DivenC => Some(DivEnVariant::DivenC),
                    _ => None,
                };
                if let Some(v) = expected {
                    if d.variant != v {
                        return Err(Error::Config(format!(
                            "diven.variant does not match method {}",
                            self.method.name()
                        )));
                    }
                }
            }
            Method::Fedfusion | Method::FedfusionStar => {
                let f = self
                    .fusion
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("method {} requires a `fusion` section", self.method.name())))?;
                f.validate()?;
            }
        }
        if !(0.0..=1.0).contains(&self.min_sim) {
            return Err(Error::Config("min_sim must be in [0,1]".into()));
        }
        if self.model.encoder_widths.is_none() && self.model.encoder_menu.is_none() {
            return Err(Error::Config("model needs encoder_widths or encoder_menu".into()));
        }
        if matches!(self.partition, PartitionSpec::PerDomain) && !matches!(self.dataset, DatasetSpec::SynthDigits(_)) {
            return Err(Error::Config("per_domain partition requires the synth_digits dataset".into()));
        }
        Ok(())
    }

    pub fn scenario_label(&self) -> String {
        if let Some(s) = &self.scenario {
            return s.clone();
        }
        match &self.dataset {
            DatasetSpec::SynthTabular(s) => format!("tabular_{}f", s.features),
            DatasetSpec::SynthDigits(s) => format!("digits_{}d", s.domains),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FairnessRecord {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub worst_client: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub per_client: Vec<f64>,
    pub mean: f64,
    pub guard_triggers: usize,
    pub excluded_rounds: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    /// Mean over seeds of the per-seed client means.
    pub mean_metric: f64,
    /// Per-client metric averaged over seeds.
    pub per_client_mean: Vec<f64>,
    pub fairness: FairnessRecord,
}

/// min/max/mean/population-std across per-client metrics.
pub fn fairness(per_client: &[f64]) -> Result<FairnessRecord> {
    if per_client.is_empty() {
        return Err(Error::Config("fairness needs at least one client metric".into()));
    }
    let n = per_client.len() as f64;
    let mean = per_client.iter().sum::<f64>() / n;
    let var = per_client.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (mut min, mut max, mut worst) = (f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for (i, &v) in per_client.iter().enumerate() {
        if v < min {
            min = v;
            worst = i;
        }
        if v > max {
            max = v;
        }
    }
    Ok(FairnessRecord {
        min,
        max,
        mean,
        std: var.sqrt(),
        worst_client: worst,
    })
}

// ---------------------------------------------------------------------------
// Scenario construction
// ---------------------------------------------------------------------------

/// Everything a single seeded run needs: shards plus image geometry.
pub struct Scenario {
    pub shards: Vec<ClientDataset>,
    pub task: Task,
    pub image_meta: Option<crate::data::ImageBatchMeta>,
}

/// Materialise the dataset and partition for one seed. The run seed is
/// folded into every generator so seeds produce independent draws.
pub fn build_scenario(cfg: &RunConfig, seed: u64) -> Result<Scenario> {
    let (fulls, task, image_meta): (Vec<FullDataset>, Task, _) = match &cfg.dataset {
        DatasetSpec::SynthTabular(s) => {
            let mut s = s.clone();
            s.seed = s.seed.wrapping_add(seed);
            let full = synth_tabular(&s)?;
            let task = full.task;
            (vec![full], task, None)
        }
        DatasetSpec::SynthDigits(s) => {
            let mut s = s.clone();
            s.seed = s.seed.wrapping_add(seed);
            let sets = synth_digits(&s)?;
            let task = sets[0].task;
            let meta = sets[0].image_meta;
            (sets, task, meta)
        }
        DatasetSpec::Csv { path, schema, schema_path } => {
            let schema = match (schema, schema_path) {
                (Some(s), _) => s.clone(),
                (None, Some(p)) => CsvSchema::from_file(p)?,
                (None, None) => return Err(Error::Config("csv dataset needs schema or schema_path".into())),
            };
            let full = load_csv(path, &schema, seed)?;
            let task = full.task;
            (vec![full], task, None)
        }
    };

    let mut shards = match &cfg.partition {
        PartitionSpec::UniformCore { n_clients, max_features, core_size } => {
            partition_features(&fulls[0], *n_clients, *max_features, *core_size, seed)?
        }
        PartitionSpec::Grouped { n_clients, n_groups, features_per_client, cross_overlap } => {
            partition_features_grouped(&fulls[0], *n_clients, *n_groups, *features_per_client, *cross_overlap, seed)?
        }
        PartitionSpec::PerDomain => {
            let mut all = Vec::new();
            for (d, full) in fulls.iter().enumerate() {
                let mut one = partition_features(full, 1, full.x.cols(), full.x.cols(), seed)?;
                one[0].id = d;
                all.push(one.remove(0));
            }
            all
        }
    };

    if let Some(plan) = &cfg.statuses {
        assign_statuses(&mut shards, plan, seed)?;
        // a fully unlabelled client must not even hold its targets
        for shard in shards.iter_mut() {
            if shard.status == ClientStatus::FullyUnlabelled {
                shard.y = None;
            }
        }
    }
    Ok(Scenario {
        shards,
        task,
        image_meta,
    })
}

/// Per-client model spec: fixed widths or a seeded menu evaluation.
fn spec_for_client(cfg: &RunConfig, shard: &ClientDataset, task: Task, seed: u64) -> Result<ModelSpec> {
    let input_dim = shard.x.cols();
    let widths = if let Some(menu) = &cfg.model.encoder_menu {
        let lab = shard.labelled_indices();
        if lab.is_empty() {
            // no labels to score candidates: fall back to the first entry
            menu[0].clone()
        } else {
            let y = shard.y.as_ref().unwrap().select(&lab);
            let x = shard.x.select_rows(&lab);
            let budget = cfg.model.search_budget.unwrap_or(menu.len());
            let outcome = search_encoder(
                &x,
                &y,
                task,
                menu,
                budget,
                cfg.model.search_epochs,
                cfg.model.search_lr,
                &[seed, shard.id as u64, 0x5eac],
            )?;
            outcome.spec.encoder_widths
        }
    } else {
        cfg.model.encoder_widths.clone().unwrap()
    };
    let mut spec = ModelSpec::with_default_head(input_dim, widths, task)?;
    if let Some(h) = &cfg.model.classifier_hidden {
        spec.classifier_hidden = h.clone();
    }
    Ok(spec)
}

const MODEL_INIT_KEY: u64 = 0x10de1;

/// Architecture fingerprint so clients sharing a spec also share their
/// initial weights (the server distributes one init per architecture).
fn spec_key(spec: &ModelSpec) -> u64 {
    let mut k = spec.input_dim as u64;
    for w in spec.encoder_widths.iter().chain(&spec.classifier_hidden) {
        k = k.wrapping_mul(1000003).wrapping_add(*w as u64 + 1);
    }
    k
}

fn build_clients(cfg: &RunConfig, scenario: &Scenario, seed: u64) -> Result<Vec<SimClient>> {
    let mut clients = Vec::with_capacity(scenario.shards.len());
    for shard in &scenario.shards {
        let spec = spec_for_client(cfg, shard, scenario.task, seed)?;
        let key = spec_key(&spec);
        let model = ClientModel::init(spec, &[seed, key, MODEL_INIT_KEY])?;
        clients.push(SimClient::new(shard, model, scenario.image_meta, seed)?);
    }
    Ok(clients)
}

/// Re-project a shard onto its cluster's overlapping feature set O_k.
fn project_to_overlap(shard: &ClientDataset, overlap: &[usize]) -> Result<ClientDataset> {
    let positions: Vec<usize> = overlap
        .iter()
        .map(|f| {
            shard
                .feature_subset
                .indices
                .iter()
                .position(|x| x == f)
                .ok_or_else(|| {
                    Error::Data(format!("client {}: overlap feature {f} not in its subset", shard.id))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = shard.clone();
    out.x = shard.x.select_cols(&positions);
    out.test_x = shard.test_x.select_cols(&positions);
    out.feature_subset = FeatureSubset::new(overlap.to_vec(), shard.feature_subset.n_features_total)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run execution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub dump_params: bool,
    pub dump_similarity: bool,
}

/// One seed of the configured method.
pub fn execute_seed(cfg: &RunConfig, seed: u64, opts: RunOptions) -> Result<(RunResult, Option<ClusterAssignment>)> {
    let scenario = build_scenario(cfg, seed)?;
    let dump = DumpOptions {
        params: opts.dump_params,
        similarity: opts.dump_similarity,
    };
    match cfg.method {
        Method::Single | Method::ClassAgg | Method::Fedavg => {
            let kind = match cfg.method {
                Method::Single => BaselineKind::Single,
                Method::ClassAgg => BaselineKind::ClassAgg,
                _ => BaselineKind::FedAvg,
            };
            if kind == BaselineKind::FedAvg {
                let d0 = scenario.shards[0].x.cols();
                if scenario.shards.iter().any(|s| s.x.cols() != d0) {
                    return Err(Error::Config(
                        "fedavg requires all clients to share a feature space".into(),
                    ));
                }
            }
            let mut clients = build_clients(cfg, &scenario, seed)?;
            let r = run_baseline(&mut clients, kind, cfg.diven.as_ref().unwrap(), dump)?;
            Ok((r, None))
        }
        Method::Diven | Method::DivenMix => {
            let mut clients = build_clients(cfg, &scenario, seed)?;
            let r = run_diven(&mut clients, cfg.diven.as_ref().unwrap(), None, seed, dump)?;
            Ok((r, None))
        }
        Method::DivenC => {
            let subsets: Vec<FeatureSubset> = scenario.shards.iter().map(|s| s.feature_subset.clone()).collect();
            let assignment = cluster_clients(&subsets, cfg.min_sim, seed)?;
            // members train on their cluster's overlap columns
            let mut shards = Vec::with_capacity(scenario.shards.len());
            for shard in &scenario.shards {
                let k = assignment.cluster_of(shard.id).ok_or_else(|| {
                    Error::Data(format!("client {} missing from cluster assignment", shard.id))
                })?;
                shards.push(project_to_overlap(shard, &assignment.overlaps[k])?);
            }
            let projected = Scenario {
                shards,
                task: scenario.task,
                image_meta: scenario.image_meta,
            };
            let mut clients = build_clients(cfg, &projected, seed)?;
            let r = run_diven_c(&mut clients, cfg.diven.as_ref().unwrap(), &assignment, seed, dump)?;
            Ok((r, Some(assignment)))
        }
        Method::Fedfusion | Method::FedfusionStar => {
            let d0 = scenario.shards[0].x.cols();
            if scenario.shards.iter().any(|s| s.x.cols() != d0) {
                return Err(Error::Config("fusion requires all clients to share a feature space".into()));
            }
            let mut fcfg = cfg.fusion.as_ref().unwrap().clone();
            fcfg.use_pseudo_labels = cfg.method == Method::FedfusionStar;
            let mut clients = build_clients(cfg, &scenario, seed)?;
            let r = run_fusion(&mut clients, &fcfg, seed, dump)?;
            Ok((r, None))
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TimingRecord {
    round: usize,
    client: usize,
    wall_ms: f64,
}

/// Execute all seeds, write per-seed trace files and the consolidated
/// report under `out`.
pub fn run(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<Report> {
    fs::create_dir_all(out)?;
    let mut per_seed = Vec::new();
    let mut per_client_sums: Vec<f64> = Vec::new();
    for &seed in &cfg.seeds {
        let (result, assignment) = execute_seed(cfg, seed, opts)?;
        write_jsonl(&out.join(format!("trace_seed{seed}.jsonl")), result.traces.iter())?;
        write_jsonl(
            &out.join(format!("timing_seed{seed}.jsonl")),
            result.traces.iter().map(|t| TimingRecord {
                round: t.round,
                client: t.client,
                wall_ms: t.wall_ms,
            }),
        )?;
        if opts.dump_similarity && !result.similarity_history.is_empty() {
            write_jsonl(
                &out.join(format!("similarity_seed{seed}.jsonl")),
                result.similarity_history.iter(),
            )?;
        }
        if opts.dump_params && !result.param_history.is_empty() {
            let dump: Vec<serde_json::Value> = result
                .param_history
                .iter()
                .enumerate()
                .map(|(round, clients)| {
                    serde_json::json!({
                        "round": round + 1,
                        "clients": clients
                            .iter()
                            .map(|ps| {
                                ps.entries()
                                    .iter()
                                    .map(|(n, t)| (n.clone(), t.data().to_vec()))
                                    .collect::<Vec<_>>()
                            })
                            .collect::<Vec<_>>(),
                    })
                })
                .collect();
            write_jsonl(&out.join(format!("params_seed{seed}.jsonl")), dump.into_iter())?;
        }
        if let Some(asg) = assignment {
            let text = serde_json::to_string_pretty(&asg)?;
            fs::write(out.join(format!("clusters_seed{seed}.json")), text)?;
        }
        if per_client_sums.is_empty() {
            per_client_sums = vec![0.0; result.final_test.len()];
        }
        if per_client_sums.len() != result.final_test.len() {
            return Err(Error::Data("client count varies across seeds".into()));
        }
        for (s, &v) in per_client_sums.iter_mut().zip(result.final_test.iter()) {
            *s += v;
        }
        let mean = result.final_test.iter().sum::<f64>() / result.final_test.len() as f64;
        per_seed.push(SeedReport {
            seed,
            per_client: result.final_test.clone(),
            mean,
            guard_triggers: result.guard_events.iter().filter(|e| e.triggered).count(),
            excluded_rounds: result.excluded.len(),
        });
    }
    let n_seeds = cfg.seeds.len() as f64;
    let per_client_mean: Vec<f64> = per_client_sums.iter().map(|s| s / n_seeds).collect();
    let mean_metric = per_seed.iter().map(|s| s.mean).sum::<f64>() / n_seeds;
    let report = Report {
        method: cfg.method.name().to_string(),
        scenario: cfg.scenario_label(),
        seeds: cfg.seeds.clone(),
        per_seed,
        mean_metric,
        per_client_mean: per_client_mean.clone(),
        fairness: fairness(&per_client_mean)?,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareCell {
    pub method: String,
    pub scenario: String,
    pub mean_metric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub methods: Vec<String>,
    pub scenarios: Vec<String>,
    pub cells: Vec<CompareCell>,
}

impl Comparison {
    pub fn cell(&self, method: &str, scenario: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.scenario == scenario)
            .map(|c| c.mean_metric)
    }

    /// Aligned text table: rows = methods, columns = scenarios.
    pub fn to_table(&self) -> String {
        let mut widths: Vec<usize> = self.scenarios.iter().map(|s| s.len().max(8)).collect();
        let name_w = self.methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        for (j, s) in self.scenarios.iter().enumerate() {
            for m in &self.methods {
                if let Some(v) = self.cell(m, s) {
                    widths[j] = widths[j].max(format!("{v:.2}").len());
                }
            }
        }
        let mut out = String::new();
        out.push_str(&format!("{:<name_w$}", "method"));
        for (j, s) in self.scenarios.iter().enumerate() {
            out.push_str(&format!("  {:>w$}", s, w = widths[j]));
        }
        out.push('\n');
        for m in &self.methods {
            out.push_str(&format!("{m:<name_w$}"));
            for (j, s) in self.scenarios.iter().enumerate() {
                match self.cell(m, s) {
                    Some(v) => out.push_str(&format!("  {:>w$.2}", v, w = widths[j])),
                    None => out.push_str(&format!("  {:>w$}", "-", w = widths[j])),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Run every config and arrange means into a method × scenario table.
/// All configs must share seeds.
pub fn compare(cfgs: &[RunConfig], out: &Path, opts: RunOptions) -> Result<Comparison> {
    if cfgs.is_empty() {
        return Err(Error::Config("compare needs at least one config".into()));
    }
    let seeds = &cfgs[0].seeds;
    for c in cfgs {
        if &c.seeds != seeds {
            return Err(Error::Config("compare requires identical seed lists".into()));
        }
    }
    fs::create_dir_all(out)?;
    let mut methods = Vec::new();
    let mut scenarios = Vec::new();
    let mut cells = Vec::new();
    for (i, cfg) in cfgs.iter().enumerate() {
        let sub = out.join(format!("{}_{}_{}", i, cfg.method.name(), cfg.scenario_label()));
        let report = run(cfg, &sub, opts)?;
        if !methods.contains(&report.method) {
            methods.push(report.method.clone());
        }
        if !scenarios.contains(&report.scenario) {
            scenarios.push(report.scenario.clone());
        }
        cells.push(CompareCell {
            method: report.method,
            scenario: report.scenario,
            mean_metric: report.mean_metric,
        });
    }
    let comparison = Comparison {
        methods,
        scenarios,
        cells,
    };
    fs::write(out.join("compare.json"), serde_json::to_string_pretty(&comparison)?)?;
    fs::write(out.join("compare.txt"), comparison.to_table())?;
    Ok(comparison)
}

/// `cluster` subcommand payload: the assignment for the first seed.
pub fn cluster_report(cfg: &RunConfig) -> Result<ClusterAssignment> {
    let seed = cfg.seeds[0];
    let scenario = build_scenario(cfg, seed)?;
    let subsets: Vec<FeatureSubset> = scenario.shards.iter().map(|s| s.feature_subset.clone()).collect();
    cluster_clients(&subsets, cfg.min_sim, seed)
}
