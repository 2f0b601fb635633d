//! Configuration-driven experiments: PruneFL and the comparison methods,
//! per-round metrics, the lottery-ticket comparison, and time-to-accuracy
//! summaries.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{apply_override, deserialize_value, parse_table};
use crate::cost::{CostModel, RoundKind};
use crate::data::{generate_synthetic, load_idx, partition, PartitionSpec, SplitDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fl::{
    clients_from_shards, initial_pruning, run_round, Environment, InitialPruningConfig, RoundConfig, ServerState,
    TraceEntry,
};
use crate::nn::{evaluate, loss_and_gradient, masked_grad_sqnorm, Batch, LayerSpec, MaskedParams, Network, SgdConfig};
use crate::pruner::{ImportanceAccumulator, PlanRecord, Schedules};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Initial pruning on one client, then FL with periodic reconfiguration.
    Prunefl,
    /// Full model, no pruning.
    Conventional,
    /// Prune once after the first round to a target density, by first-round importance.
    OneShotInit,
    /// Magnitude pruning at a fixed rate, spread over the first half of training.
    Iterative,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Prunefl => "prunefl",
            Method::Conventional => "conventional",
            Method::OneShotInit => "one_shot_init",
            Method::Iterative => "iterative",
        })
    }
}

/// Either `hidden` sizes of an MLP, or an explicit layer list.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Option<Vec<usize>>,
    pub layers: Option<Vec<LayerSpec>>,
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, classes: usize) -> Result<Network> {
        let net = match (&self.hidden, &self.layers) {
            (Some(_), Some(_)) => {
                return Err(Error::Config { path: "model".into(), message: "set either hidden or layers".into() })
            }
            (None, Some(layers)) => Network::new(input_dim, layers.clone())?,
            (hidden, None) => {
                let mut sizes = vec![input_dim];
                sizes.extend(hidden.iter().flatten().copied());
                sizes.push(classes);
                Network::mlp(&sizes)?
            }
        };
        if net.num_classes() != classes {
            return Err(Error::Config {
                path: "model".into(),
                message: format!("network has {} outputs, data has {classes} classes", net.num_classes()),
            });
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    Idx(IdxFiles),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataSpec {
    pub fn load(&self, base: &Path) -> Result<SplitDataset> {
        match self {
            DataSpec::Synthetic(spec) => generate_synthetic(spec),
            DataSpec::Idx(f) => Ok(SplitDataset {
                train: load_idx(&base.join(&f.train_images), &base.join(&f.train_labels))?,
                test: load_idx(&base.join(&f.test_images), &base.join(&f.test_labels))?,
            }),
        }
    }
}

/// Cost model given inline or as a path to a preset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCost", into = "RawCost")]
pub enum CostSpec {
    Inline(CostModel),
    Preset(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_seconds: Option<f64>,
    #[serde(rename = "bandwidth_Bps", skip_serializing_if = "Option::is_none")]
    bandwidth_bps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    t_per_layer: Option<Vec<f64>>,
}

impl TryFrom<RawCost> for CostSpec {
    type Error = String;

    fn try_from(raw: RawCost) -> std::result::Result<Self, String> {
        match raw {
            RawCost { preset: Some(p), c_seconds: None, bandwidth_bps: None, t_per_layer: None } => Ok(Self::Preset(p)),
            RawCost { preset: None, c_seconds: Some(c), bandwidth_bps: Some(b), t_per_layer: Some(t) } => {
                Ok(Self::Inline(CostModel { c_seconds: c, bandwidth_bps: b, t_per_layer: t }))
            }
            _ => Err("give either `preset` alone or all of c_seconds, bandwidth_Bps, t_per_layer".into()),
        }
    }
}

impl From<CostSpec> for RawCost {
    fn from(spec: CostSpec) -> Self {
        match spec {
            CostSpec::Preset(p) => RawCost { preset: Some(p), c_seconds: None, bandwidth_bps: None, t_per_layer: None },
            CostSpec::Inline(m) => RawCost {
                preset: None,
                c_seconds: Some(m.c_seconds),
                bandwidth_bps: Some(m.bandwidth_bps),
                t_per_layer: Some(m.t_per_layer),
            },
        }
    }
}

impl CostSpec {
    pub fn resolve(&self, base: &Path) -> Result<CostModel> {
        match self {
            CostSpec::Inline(m) => {
                m.validate()?;
                Ok(m.clone())
            }
            CostSpec::Preset(p) => CostModel::load(&base.join(p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Final density of the size-matched comparators.
    pub target_density: Option<f64>,
    pub iterative_steps: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { target_density: None, iterative_steps: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub plans: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LotteryConfig {
    /// Checkpoint of a finished PruneFL run.
    pub checkpoint: Option<PathBuf>,
    /// Seed of the random reinitialization; the run seed plus one when unset.
    pub fresh_seed: Option<u64>,
}

/// Which client runs initial pruning, and when it stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialStage {
    pub client: usize,
    pub iters_per_reconfig: Option<usize>,
    pub max_iterations: usize,
    pub stable_change: f64,
    pub stable_reconfigs: usize,
}

impl Default for InitialStage {
    fn default() -> Self {
        Self::from_limits(0, InitialPruningConfig::default())
    }
}

impl InitialStage {
    pub fn from_limits(client: usize, l: InitialPruningConfig) -> Self {
        Self {
            client,
            iters_per_reconfig: l.iters_per_reconfig,
            max_iterations: l.max_iterations,
            stable_change: l.stable_change,
            stable_reconfigs: l.stable_reconfigs,
        }
    }

    pub fn limits(&self) -> InitialPruningConfig {
        InitialPruningConfig {
            iters_per_reconfig: self.iters_per_reconfig,
            max_iterations: self.max_iterations,
            stable_change: self.stable_change,
            stable_reconfigs: self.stable_reconfigs,
        }
    }
}

fn default_eval_interval() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub rounds: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Seeds model initialization, client sampling and selection.
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSpec,
    pub data: DataSpec,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub round: RoundConfig,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub schedules: Schedules,
    pub cost: CostSpec,
    #[serde(default)]
    pub initial_pruning: InitialStage,
    #[serde(default)]
    pub baseline: BaselineConfig,
    /// Record the full-training-set masked gradient norm every round.
    #[serde(default)]
    pub track_grad_norm: bool,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub lottery: LotteryConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(text, "config")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = deserialize_value(toml::Value::Table(table))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &str, e: Error| Error::Config { path: path.into(), message: e.to_string() };
        if self.eval_interval == 0 {
            return Err(Error::Config { path: "eval_interval".into(), message: "must be at least 1".into() });
        }
        self.round.validate().map_err(|e| at("round", e))?;
        self.sgd.validate().map_err(|e| at("sgd", e))?;
        self.schedules.validate().map_err(|e| at("schedules", e))?;
        if let CostSpec::Inline(m) = &self.cost {
            m.validate().map_err(|e| at("cost", e))?;
        }
        if matches!(self.method, Method::OneShotInit | Method::Iterative) {
            match self.baseline.target_density {
                Some(d) if (0.0..=1.0).contains(&d) => {}
                _ => {
                    return Err(Error::Config {
                        path: "baseline.target_density".into(),
                        message: format!("{} needs a target density in [0, 1]", self.method),
                    })
                }
            }
            if self.baseline.iterative_steps == 0 {
                return Err(Error::Config { path: "baseline.iterative_steps".into(), message: "must be positive".into() });
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// One CSV row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// FL round just completed; initial-pruning pseudo-rounds are negative.
    pub round: i64,
    pub sim_seconds: f64,
    pub density: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Cumulative bytes, summed over clients.
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub reconfig: bool,
}

pub const RECORD_COLUMNS: [&str; 8] =
    ["round", "sim_seconds", "density", "train_loss", "test_accuracy", "bytes_up", "bytes_down", "reconfig"];

pub fn write_records<W: Write>(out: W, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_COLUMNS {
        return Err(Error::InvalidArgument(format!("unexpected CSV columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub method: Method,
    pub rounds: u64,
    pub initial_test_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub final_density: f64,
    pub sim_seconds: f64,
    pub initial_pruning_seconds: f64,
    pub initial_pruning_iterations: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub init_seed: u64,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method            {}", self.method)?;
        writeln!(f, "rounds            {}", self.rounds)?;
        writeln!(f, "accuracy          {:.4} -> {:.4}", self.initial_test_accuracy, self.final_test_accuracy)?;
        writeln!(f, "final test loss   {:.6}", self.final_test_loss)?;
        writeln!(f, "final density     {:.4}", self.final_density)?;
        writeln!(f, "simulated time    {:.2} s", self.sim_seconds)?;
        if self.initial_pruning_iterations > 0 {
            writeln!(
                f,
                "initial pruning   {} iterations, {:.2} s",
                self.initial_pruning_iterations, self.initial_pruning_seconds
            )?;
        }
        write!(f, "bytes up/down     {} / {}", self.bytes_up, self.bytes_down)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub network: Network,
    pub init_seed: u64,
    pub records: Vec<RoundRecord>,
    pub plans: Vec<PlanRecord>,
    pub trace: Vec<TraceEntry>,
    /// Masked squared gradient norm on the full training set, before each round.
    pub grad_norms: Vec<f64>,
    pub final_params: MaskedParams,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(self.network.clone(), self.final_params.clone(), self.init_seed)
    }
}

/// Everything derived from a config before the first round.
pub struct Prepared {
    pub network: Network,
    pub data: SplitDataset,
    pub shards: Vec<Vec<usize>>,
    pub cost: CostModel,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = cfg.data.load(&cfg.base_dir)?;
    let network = cfg.model.build(data.train.dims, data.train.num_classes)?;
    let cost = cfg.cost.resolve(&cfg.base_dir)?;
    cost.check_layers(network.layer_capacities().len())
        .map_err(|e| Error::Config { path: "cost.t_per_layer".into(), message: e.to_string() })?;
    let shards = partition(&data.train, &cfg.partition)?;
    Ok(Prepared { network, data, shards, cost })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let prep = prepare(cfg)?;
    let start = prep.network.init(cfg.seed);
    run_from(cfg, &prep, start, cfg.method)
}

/// Test loss and accuracy; an empty test set scores zero.
fn test_metrics(net: &Network, params: &MaskedParams, data: &SplitDataset) -> Result<(f64, f64)> {
    if data.test.is_empty() {
        return Ok((0.0, 0.0));
    }
    evaluate(net, params, &data.test.features, &data.test.labels)
}

/// Runs `method` starting from `start`. Conventional training keeps the
/// mask of `start`, so a masked start gives fixed-mask FL.
pub fn run_from(cfg: &ExperimentConfig, prep: &Prepared, start: MaskedParams, method: Method) -> Result<ExperimentResult> {
    let net = &prep.network;
    let env = Environment { network: net, train: &prep.data.train, sgd: &cfg.sgd };
    let client_seed = cfg.seed.wrapping_add(0x5EED);
    let mut clients = clients_from_shards(prep.shards.clone(), net.capacity(), client_seed);
    let (_, initial_accuracy) = test_metrics(net, &start, &prep.data)?;

    let mut records = Vec::new();
    let mut plans = Vec::new();
    let mut params = start;
    let mut offset_seconds = 0.0;
    let mut ip_iterations = 0;

    if method == Method::Prunefl && cfg.rounds > 0 {
        let stage = &cfg.initial_pruning;
        let client = clients.get_mut(stage.client).ok_or_else(|| Error::Config {
            path: "initial_pruning.client".into(),
            message: format!("no client {}", stage.client),
        })?;
        let e = cfg.round.local_iters;
        let mut scored = Vec::new();
        let out = initial_pruning(client, &env, params, &prep.cost, &cfg.schedules, &cfg.round, &stage.limits(), |step, p| {
            scored.push((step.iteration, step.clock, step.plan.density(), step.loss, test_metrics(net, p, &prep.data)?.1));
            Ok(())
        })?;
        // `E` local iterations make one pseudo-round, counted back from -1
        let pseudo_rounds = out.iterations.div_ceil(e) as i64;
        for (step, (iteration, clock, density, loss, accuracy)) in out.steps.iter().zip(scored) {
            let round = iteration.div_ceil(e) as i64 - pseudo_rounds - 1;
            plans.push(PlanRecord::new(round, &step.plan));
            records.push(RoundRecord {
                round,
                sim_seconds: clock,
                density,
                train_loss: loss,
                test_accuracy: accuracy,
                bytes_up: 0,
                bytes_down: 0,
                reconfig: true,
            });
        }
        params = out.params;
        offset_seconds = out.clock;
        ip_iterations = out.iterations;
        clients.iter_mut().for_each(|c| c.importance.reset());
    }

    let mut rc = cfg.round;
    if method != Method::Prunefl {
        rc.reconfig_interval = None;
    }
    let mut server = ServerState::new(params, cfg.schedules, prep.cost.clone(), cfg.seed.wrapping_add(0xC1E7))?;
    server.collect_importance = method == Method::OneShotInit;
    let iterative_rounds = iterative_schedule(cfg.rounds, cfg.baseline.iterative_steps);
    let target = cfg.baseline.target_density.unwrap_or(1.0);
    let mut grad_norms = Vec::new();

    for r in 0..cfg.rounds {
        if cfg.track_grad_norm {
            let (_, g) = loss_and_gradient(net, &server.params, Batch::new(&prep.data.train.features, &prep.data.train.labels))?;
            grad_norms.push(masked_grad_sqnorm(&g, &server.params));
        }
        let outcome = run_round(&mut server, &mut clients, &env, &rc)?;
        let mut reconfig = matches!(outcome.kind, RoundKind::Reconfig { .. });
        if let Some(plan) = &outcome.plan {
            plans.push(PlanRecord::new(r as i64, plan));
        }
        match method {
            Method::OneShotInit if r == 0 => {
                let parts: Vec<(&ImportanceAccumulator, f64)> = clients
                    .iter()
                    .filter(|c| c.importance.iterations() > 0)
                    .map(|c| (&c.importance, c.weight))
                    .collect();
                let importance = ImportanceAccumulator::merge_weighted(&parts)?;
                let keep = (target * net.capacity() as f64).round() as usize;
                let mask = top_k_mask(&importance, keep);
                server.params.apply_mask(&mask)?;
                server.collect_importance = false;
                clients.iter_mut().for_each(|c| c.importance.reset());
                reconfig = true;
            }
            Method::Iterative => {
                if let Some(step) = iterative_rounds.iter().position(|&s| s == r) {
                    let frac = target.powf((step + 1) as f64 / iterative_rounds.len() as f64);
                    let keep = (frac * net.capacity() as f64).round() as usize;
                    let magnitude: Vec<f64> = server.params.flat_weights().iter().map(|w| w.abs()).collect();
                    let kept: Vec<bool> = server.params.flat_mask();
                    let score: Vec<f64> =
                        magnitude.iter().zip(&kept).map(|(m, k)| if *k { *m } else { f64::NEG_INFINITY }).collect();
                    let mask = top_k_mask(&score, keep.min(server.params.kept()));
                    server.params.apply_mask(&mask)?;
                    reconfig = true;
                }
            }
            _ => {}
        }
        if (r + 1) % cfg.eval_interval == 0 || r + 1 == cfg.rounds {
            let (_, acc) = test_metrics(net, &server.params, &prep.data)?;
            records.push(RoundRecord {
                round: r as i64,
                sim_seconds: offset_seconds + server.clock,
                density: server.params.density(),
                train_loss: outcome.train_loss,
                test_accuracy: acc,
                bytes_up: server.bytes_up,
                bytes_down: server.bytes_down,
                reconfig,
            });
        }
    }

    let (final_loss, final_acc) = test_metrics(net, &server.params, &prep.data)?;
    let summary = Summary {
        method,
        rounds: cfg.rounds,
        initial_test_accuracy: initial_accuracy,
        final_test_accuracy: final_acc,
        final_test_loss: final_loss,
        final_density: server.params.density(),
        sim_seconds: offset_seconds + server.clock,
        initial_pruning_seconds: offset_seconds,
        initial_pruning_iterations: ip_iterations,
        bytes_up: server.bytes_up,
        bytes_down: server.bytes_down,
        init_seed: cfg.seed,
    };
    Ok(ExperimentResult {
        network: net.clone(),
        init_seed: cfg.seed,
        records,
        plans,
        trace: server.trace,
        grad_norms,
        final_params: server.params,
        summary,
    })
}

/// Rounds after which iterative pruning fires: `steps` equally spaced
/// points covering the first half of training.
pub fn iterative_schedule(rounds: u64, steps: usize) -> Vec<u64> {
    let half = rounds / 2;
    if half == 0 || steps == 0 {
        return Vec::new();
    }
    let mut out: Vec<u64> = (1..=steps as u64).map(|i| (i * half).div_ceil(steps as u64).saturating_sub(1)).collect();
    out.dedup();
    out
}

/// Mask keeping the `k` largest scores, ties to the lower index.
pub fn top_k_mask(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &j in order.iter().take(k) {
        mask[j] = true;
    }
    mask
}

/// Writes every output the config names.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, csv_override: Option<&Path>) -> Result<()> {
    let resolve = |p: &Path| cfg.base_dir.join(p);
    if let Some(path) = csv_override.map(Path::to_path_buf).or_else(|| cfg.output.csv.as_deref().map(resolve)) {
        write_records(std::fs::File::create(path)?, &result.records)?;
    }
    if let Some(p) = &cfg.output.plans {
        crate::pruner::write_plan_csv(std::fs::File::create(resolve(p))?, &result.plans)?;
    }
    if let Some(p) = &cfg.output.checkpoint {
        result.checkpoint()?.save(resolve(p))?;
    }
    if let Some(p) = &cfg.output.trace {
        crate::fl::write_trace(std::io::BufWriter::new(std::fs::File::create(resolve(p))?), &result.trace)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LotteryResult {
    /// Pruned architecture, original-seed initialization.
    pub original: ExperimentResult,
    /// Pruned architecture, fresh random initialization.
    pub random: ExperimentResult,
    /// Unpruned model from the original seed.
    pub full: ExperimentResult,
}

/// Retrains the architecture found by a PruneFL run, with no further
/// pruning, from its original initialization and from a fresh one.
pub fn lottery_eval(cfg: &ExperimentConfig, final_mask: &[bool], original_seed: u64, fresh_seed: u64) -> Result<LotteryResult> {
    let prep = prepare(cfg)?;
    let net = &prep.network;
    if final_mask.len() != net.capacity() {
        return Err(Error::Shape(format!(
            "mask covers {} coordinates, model has {}",
            final_mask.len(),
            net.capacity()
        )));
    }
    let masked_init = |seed: u64| -> Result<MaskedParams> {
        let mut p = net.init(seed);
        p.apply_mask(final_mask)?;
        Ok(p)
    };
    let seeded = |seed: u64| ExperimentConfig { seed, ..cfg.clone() };
    Ok(LotteryResult {
        original: run_from(cfg, &prep, masked_init(original_seed)?, Method::Conventional)?,
        random: run_from(&seeded(cfg.seed), &prep, masked_init(fresh_seed)?, Method::Conventional)?,
        full: run_from(cfg, &prep, net.init(original_seed), Method::Conventional)?,
    })
}

/// Runs the lottery comparison from the checkpoint named in the config.
pub fn lottery_from_config(cfg: &ExperimentConfig) -> Result<LotteryResult> {
    let path = cfg.lottery.checkpoint.as_ref().ok_or_else(|| Error::Config {
        path: "lottery.checkpoint".into(),
        message: "the lottery run needs the checkpoint of a finished run".into(),
    })?;
    let ck = Checkpoint::load(cfg.base_dir.join(path))?;
    let fresh = cfg.lottery.fresh_seed.unwrap_or(ck.init_seed.wrapping_add(1));
    lottery_eval(cfg, &ck.params.flat_mask(), ck.init_seed, fresh)
}

/// Time at which a threshold was first met, if ever.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeToAccuracy {
    pub threshold: f64,
    pub seconds: Option<f64>,
    pub round: Option<i64>,
}

impl fmt::Display for TimeToAccuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.seconds, self.round) {
            (Some(s), Some(r)) => write!(f, "{:.4}\t{s:.3}\t{r}", self.threshold),
            _ => write!(f, "{:.4}\tnot reached\t-", self.threshold),
        }
    }
}

/// First simulated time each accuracy threshold is reached. Records are
/// taken in order; rows without a test accuracy are ignored.
pub fn summarize_time_to_accuracy(records: &[RoundRecord], thresholds: &[f64]) -> Vec<TimeToAccuracy> {
    thresholds
        .iter()
        .map(|&threshold| {
            let hit = records.iter().find(|r| r.test_accuracy >= threshold);
            TimeToAccuracy { threshold, seconds: hit.map(|r| r.sim_seconds), round: hit.map(|r| r.round) }
        })
        .collect()
}
