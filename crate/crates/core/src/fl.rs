//! Federated rounds: local masked SGD on clients, weighted averaging on the
//! server, periodic reconfiguration of the mask, and a simulated clock.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{comm_bytes, CommBytes, CostModel, RoundKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{loss_and_gradient, Batch, MaskedParams, Network, Sgd, SgdConfig};
use crate::pruner::{reconfigure, ImportanceAccumulator, ReconfigPlan, Schedules};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    /// Local SGD iterations per round (`E`).
    pub local_iters: usize,
    /// Mini-batch size (`B`).
    pub batch_size: usize,
    /// Participants per round; all clients when unset.
    pub clients_per_round: Option<usize>,
    /// Rounds between reconfigurations; never when unset.
    pub reconfig_interval: Option<u64>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self { local_iters: 5, batch_size: 20, clients_per_round: None, reconfig_interval: Some(50) }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_iters == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("local_iters and batch_size must be at least 1".into()));
        }
        if self.clients_per_round == Some(0) || self.reconfig_interval == Some(0) {
            return Err(Error::InvalidArgument("clients_per_round and reconfig_interval must be at least 1".into()));
        }
        Ok(())
    }

    /// Round `r` reconfigures when `(r + 1) % interval == 0`, so the first
    /// reconfiguration closes the first full interval.
    pub fn is_reconfig_round(&self, round: u64) -> bool {
        self.reconfig_interval.is_some_and(|n| (round + 1).is_multiple_of(n))
    }
}

/// Draws mini-batches from a shard: a seeded shuffle consumed in order and
/// reshuffled when exhausted. A batch at least as large as the shard is the
/// whole shard in stored order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    shard: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(shard: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = shard.clone();
        order.shuffle(&mut rng);
        Self { shard, order, cursor: 0, rng }
    }

    pub fn shard(&self) -> &[usize] {
        &self.shard
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if size >= self.shard.len() {
            return self.shard.clone();
        }
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - batch.len()).min(self.order.len() - self.cursor);
            batch.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        batch
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// `p_n`, the client's share of the training data.
    pub weight: f64,
    pub sampler: BatchSampler,
    pub importance: ImportanceAccumulator,
}

impl ClientState {
    pub fn new(id: usize, shard: Vec<usize>, weight: f64, capacity: usize, seed: u64) -> Self {
        Self { id, weight, sampler: BatchSampler::new(shard, seed), importance: ImportanceAccumulator::new(capacity) }
    }

    pub fn shard_len(&self) -> usize {
        self.sampler.shard().len()
    }
}

/// One client per shard with `p_n = D_n / D` and a distinct sampling seed.
pub fn clients_from_shards(shards: Vec<Vec<usize>>, capacity: usize, seed: u64) -> Vec<ClientState> {
    let total: usize = shards.iter().map(Vec::len).sum();
    shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| {
            let weight = if total == 0 { 0.0 } else { shard.len() as f64 / total as f64 };
            let client_seed = seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            ClientState::new(id, shard, weight, capacity, client_seed)
        })
        .collect()
}

/// Everything a round needs that does not change between rounds.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub network: &'a Network,
    pub train: &'a Dataset,
    pub sgd: &'a SgdConfig,
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client: usize,
    pub params: MaskedParams,
    pub weight: f64,
    pub samples: usize,
    /// Mean mini-batch loss over the local iterations.
    pub loss: f64,
}

/// Runs `E` masked SGD steps from `global`. Squared full-space gradients are
/// added to the client's accumulator when `collect_importance` is set.
/// Returns `None` for a client without data.
pub fn client_local_update(
    client: &mut ClientState,
    env: &Environment<'_>,
    global: &MaskedParams,
    rc: &RoundConfig,
    round: u64,
    collect_importance: bool,
) -> Result<Option<LocalUpdate>> {
    if client.shard_len() == 0 {
        return Ok(None);
    }
    let mut params = global.clone();
    let mut sgd = Sgd::new(*env.sgd);
    let mut loss_sum = 0.0;
    let mut samples = 0;
    for _ in 0..rc.local_iters {
        let idx = client.sampler.next_batch(rc.batch_size);
        let (xs, ys) = env.train.gather(&idx);
        let (loss, grad) = loss_and_gradient(env.network, &params, Batch::new(&xs, &ys))?;
        if collect_importance {
            client.importance.add(&grad);
        }
        sgd.step(&mut params, &grad, round);
        loss_sum += loss;
        samples += ys.len();
    }
    Ok(Some(LocalUpdate {
        client: client.id,
        params,
        weight: client.weight,
        samples,
        loss: loss_sum / rc.local_iters as f64,
    }))
}

/// Per-coordinate average weighted by renormalized `p_n`. A single
/// participant's parameters are returned unchanged.
pub fn server_aggregate(updates: &[(&MaskedParams, f64)]) -> Result<MaskedParams> {
    let Some(((first, _), rest)) = updates.split_first() else {
        return Err(Error::Protocol("no updates to aggregate".into()));
    };
    if rest.iter().any(|(p, _)| !p.same_mask(first)) {
        return Err(Error::Protocol("participants hold different masks".into()));
    }
    if rest.is_empty() {
        return Ok((*first).clone());
    }
    let total: f64 = updates.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::Protocol("participant weights sum to zero".into()));
    }
    let mut out = (*first).clone();
    for (li, layer) in out.layers.iter_mut().enumerate() {
        for (j, w) in layer.weights.iter_mut().enumerate() {
            *w = updates.iter().map(|(p, pw)| pw / total * p.layers[li].weights[j]).sum();
        }
        for (j, b) in layer.bias.iter_mut().enumerate() {
            *b = updates.iter().map(|(p, pw)| pw / total * p.layers[li].bias[j]).sum();
        }
        for (w, m) in layer.weights.iter_mut().zip(&layer.mask) {
            if !m {
                *w = 0.0;
            }
        }
    }
    Ok(out)
}

/// Uniform sample of `k` distinct clients out of `n`, ascending.
pub fn select_clients(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot select {k} of {n} clients")));
    }
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    /// Values of the kept parameters.
    Params,
    /// Full-space model upload together with the importance sums.
    Importance,
    /// New mask and sparse parameters.
    SparseModel,
}

/// One protocol message, as accounted by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub round: i64,
    pub direction: Direction,
    pub kind: MessageKind,
    pub bytes: u64,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            Direction::Up => "up",
            Direction::Down => "down",
        };
        let kind = match self.kind {
            MessageKind::Params => "params",
            MessageKind::Importance => "importance",
            MessageKind::SparseModel => "sparse_model",
        };
        write!(f, "{},{dir},{kind},{}", self.round, self.bytes)
    }
}

pub fn write_trace<W: Write>(mut out: W, entries: &[TraceEntry]) -> Result<()> {
    for e in entries {
        writeln!(out, "{e}")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: MaskedParams,
    /// Index of the next round to run.
    pub round: u64,
    /// Simulated seconds elapsed.
    pub clock: f64,
    pub schedules: Schedules,
    pub cost: CostModel,
    pub selection_seed: u64,
    selection_rng: ChaCha8Rng,
    /// Makes clients accumulate importance even without reconfigurations.
    pub collect_importance: bool,
    pub trace: Vec<TraceEntry>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl ServerState {
    pub fn new(params: MaskedParams, schedules: Schedules, cost: CostModel, selection_seed: u64) -> Result<Self> {
        cost.check_layers(params.layers.len())?;
        Ok(Self {
            params,
            round: 0,
            clock: 0.0,
            schedules,
            cost,
            selection_seed,
            selection_rng: ChaCha8Rng::seed_from_u64(selection_seed),
            collect_importance: false,
            trace: Vec::new(),
            bytes_up: 0,
            bytes_down: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: u64,
    pub kind: RoundKind,
    pub participants: Vec<usize>,
    /// Selected clients that had no data.
    pub skipped: Vec<usize>,
    /// `p_n`-weighted mean of the participants' local losses.
    pub train_loss: f64,
    /// Bytes summed over participants.
    pub bytes: CommBytes,
    pub seconds: f64,
    pub plan: Option<ReconfigPlan>,
}

/// Advances the server by one round.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    env: &Environment<'_>,
    rc: &RoundConfig,
) -> Result<RoundOutcome> {
    let round = server.round;
    let k = rc.clients_per_round.unwrap_or(clients.len());
    let selected = select_clients(clients.len(), k, &mut server.selection_rng)?;
    let collect = server.collect_importance || rc.reconfig_interval.is_some();
    let global = &server.params;

    let mut chosen: Vec<&mut ClientState> = Vec::with_capacity(selected.len());
    let mut next = selected.iter().peekable();
    for (i, c) in clients.iter_mut().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            chosen.push(c);
        }
    }
    let results: Vec<Result<Option<LocalUpdate>>> = chosen
        .par_iter_mut()
        .map(|c| client_local_update(c, env, global, rc, round, collect))
        .collect();

    let mut updates = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (id, r) in selected.iter().zip(results) {
        match r? {
            Some(u) => updates.push(u),
            None => skipped.push(*id),
        }
    }
    if updates.is_empty() {
        return Err(Error::Protocol(format!("round {round}: no selected client has data")));
    }
    let weights: Vec<(&MaskedParams, f64)> = updates.iter().map(|u| (&u.params, u.weight)).collect();
    let mut aggregated = server_aggregate(&weights)?;
    let total_w: f64 = updates.iter().map(|u| u.weight).sum();
    let train_loss = updates.iter().map(|u| u.weight / total_w * u.loss).sum();

    let kept_per_layer = server.params.kept_per_layer();
    let capacity = server.params.capacity();
    let kept: usize = kept_per_layer.iter().sum();
    let mut plan = None;
    let kind = if rc.is_reconfig_round(round) {
        let by_id = |id: usize| clients.iter().find(|c| c.id == id).expect("participant exists");
        let parts: Vec<(&ImportanceAccumulator, f64)> =
            updates.iter().map(|u| (&by_id(u.client).importance, u.weight)).collect();
        let importance = ImportanceAccumulator::merge_weighted(&parts)?;
        let (next, p) = reconfigure(&aggregated, &importance, &server.cost, &server.schedules, round)?;
        aggregated = next;
        let new_kept = p.kept();
        plan = Some(p);
        clients.iter_mut().for_each(|c| c.importance.reset());
        RoundKind::Reconfig { new_kept }
    } else {
        RoundKind::Normal
    };

    let per_client = comm_bytes(kept, capacity, kind);
    let (up_kind, down_kind) = match kind {
        RoundKind::Normal => (MessageKind::Params, MessageKind::Params),
        RoundKind::Reconfig { .. } => (MessageKind::Importance, MessageKind::SparseModel),
    };
    for _ in &updates {
        server.trace.push(TraceEntry {
            round: round as i64,
            direction: Direction::Up,
            kind: up_kind,
            bytes: per_client.upload,
        });
        server.trace.push(TraceEntry {
            round: round as i64,
            direction: Direction::Down,
            kind: down_kind,
            bytes: per_client.download,
        });
    }
    let n = updates.len() as u64;
    let bytes = CommBytes { upload: per_client.upload * n, download: per_client.download * n };
    server.bytes_up += bytes.upload;
    server.bytes_down += bytes.download;

    let seconds = server.cost.round_time(&kept_per_layer, capacity, kind);
    server.clock += seconds;
    server.params = aggregated;
    server.round += 1;
    Ok(RoundOutcome {
        round,
        kind,
        participants: updates.iter().map(|u| u.client).collect(),
        skipped,
        train_loss,
        bytes,
        seconds,
        plan,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialPruningConfig {
    /// Local iterations between reconfigurations; the round's `E` when unset.
    pub iters_per_reconfig: Option<usize>,
    pub max_iterations: usize,
    /// Relative size change below which a reconfiguration counts as stable.
    pub stable_change: f64,
    /// Consecutive stable reconfigurations that end the stage.
    pub stable_reconfigs: usize,
}

impl Default for InitialPruningConfig {
    fn default() -> Self {
        Self { iters_per_reconfig: None, max_iterations: 1000, stable_change: 0.10, stable_reconfigs: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct InitialPruneStep {
    /// Local iterations completed when this reconfiguration ran.
    pub iteration: usize,
    /// Simulated seconds since the stage started.
    pub clock: f64,
    pub kept: usize,
    /// Mean mini-batch loss since the previous reconfiguration.
    pub loss: f64,
    pub plan: ReconfigPlan,
}

#[derive(Debug, Clone)]
pub struct InitialPruning {
    pub params: MaskedParams,
    pub steps: Vec<InitialPruneStep>,
    pub iterations: usize,
    pub clock: f64,
    /// Whether the stability rule, not the iteration cap, ended the stage.
    pub converged: bool,
}

/// Adaptive pruning on one client before federated training starts.
///
/// Each local iteration is charged `compute_time / E` simulated seconds, so
/// `E` iterations cost one round of computation and no communication. The
/// schedules are evaluated at round 0 throughout. `observe` sees every
/// reconfiguration together with the parameters it produced.
#[allow(clippy::too_many_arguments)]
pub fn initial_pruning(
    client: &mut ClientState,
    env: &Environment<'_>,
    params: MaskedParams,
    cost: &CostModel,
    sched: &Schedules,
    rc: &RoundConfig,
    cfg: &InitialPruningConfig,
    mut observe: impl FnMut(&InitialPruneStep, &MaskedParams) -> Result<()>,
) -> Result<InitialPruning> {
    if client.shard_len() == 0 {
        return Err(Error::InvalidArgument("initial pruning needs a client with data".into()));
    }
    cost.check_layers(params.layers.len())?;
    let interval = cfg.iters_per_reconfig.unwrap_or(rc.local_iters).max(1);
    let mut params = params;
    let mut sgd = Sgd::new(*env.sgd);
    let mut acc = ImportanceAccumulator::new(params.capacity());
    let mut steps = Vec::new();
    let mut clock = 0.0;
    let mut size = params.kept();
    let mut stable = 0;
    let mut iterations = 0;
    let mut converged = false;
    let mut loss_sum = 0.0;
    while iterations < cfg.max_iterations {
        let idx = client.sampler.next_batch(rc.batch_size);
        let (xs, ys) = env.train.gather(&idx);
        let (loss, grad) = loss_and_gradient(env.network, &params, Batch::new(&xs, &ys))?;
        loss_sum += loss;
        acc.add(&grad);
        sgd.step(&mut params, &grad, 0);
        clock += cost.compute_time(&params.kept_per_layer()) / rc.local_iters as f64;
        iterations += 1;
        if iterations % interval != 0 {
            continue;
        }
        let (next, plan) = reconfigure(&params, acc.sums(), cost, sched, 0)?;
        acc.reset();
        params = next;
        sgd.apply_mask(&plan.mask);
        let new_size = plan.kept();
        let change = match size {
            0 if new_size == 0 => 0.0,
            0 => f64::INFINITY,
            s => (new_size as f64 - s as f64).abs() / s as f64,
        };
        stable = if change < cfg.stable_change { stable + 1 } else { 0 };
        size = new_size;
        let loss = loss_sum / interval as f64;
        loss_sum = 0.0;
        let step = InitialPruneStep { iteration: iterations, clock, kept: new_size, loss, plan };
        observe(&step, &params)?;
        steps.push(step);
        if stable >= cfg.stable_reconfigs {
            converged = true;
            break;
        }
    }
    Ok(InitialPruning { params, steps, iterations, clock, converged })
}
