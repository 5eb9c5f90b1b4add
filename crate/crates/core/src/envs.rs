//! Environments: the ERA graph-allocation family, ERA-Partial and Toy-Partial.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{ActionSpace, CategoricalAction};
use crate::error::{Error, Result};
use crate::iar::ConstraintOracle;

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    type State: Clone + fmt::Debug;

    fn action_space(&self) -> ActionSpace;

    fn observation_dim(&self) -> usize;

    /// Start a new episode; all randomness of the episode derives from `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    fn step(&mut self, action: &CategoricalAction) -> Result<StepOutcome>;

    fn state(&self) -> &Self::State;

    fn observe(&self) -> Vec<f64>;
}

/// The environments shipped with the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvVersion {
    ToyPartial,
    EraPartial,
    EraV1,
    EraV2,
    EraV3,
    EraV4,
    EraV5,
}

impl EnvVersion {
    pub const ALL: [EnvVersion; 7] = [
        EnvVersion::ToyPartial,
        EnvVersion::EraPartial,
        EnvVersion::EraV1,
        EnvVersion::EraV2,
        EnvVersion::EraV3,
        EnvVersion::EraV4,
        EnvVersion::EraV5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvVersion::ToyPartial => "toy_partial",
            EnvVersion::EraPartial => "era_partial",
            EnvVersion::EraV1 => "era_v1",
            EnvVersion::EraV2 => "era_v2",
            EnvVersion::EraV3 => "era_v3",
            EnvVersion::EraV4 => "era_v4",
            EnvVersion::EraV5 => "era_v5",
        }
    }

    /// Whether the shipped oracle can reject actions.
    pub fn is_constrained(self) -> bool {
        !matches!(self, EnvVersion::ToyPartial | EnvVersion::EraPartial)
    }

    /// `(resources, nodes, max_hops)` of the graph versions.
    pub fn era_shape(self) -> Option<(usize, usize, usize)> {
        match self {
            EnvVersion::EraV1 => Some((3, 6, 1)),
            EnvVersion::EraV2 => Some((3, 7, 1)),
            EnvVersion::EraV3 => Some((3, 8, 2)),
            EnvVersion::EraV4 => Some((3, 9, 2)),
            EnvVersion::EraV5 => Some((3, 10, 3)),
            _ => None,
        }
    }
}

impl fmt::Display for EnvVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvVersion::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::UnknownVersion(s.to_string()))
    }
}

// ---------------------------------------------------------------------------
// ERA

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EraConfig {
    pub name: String,
    pub n_resources: usize,
    pub max_hops: usize,
    pub reward_resolve: f64,
    pub penalty_miss: f64,
    pub episode_length: usize,
    /// Chance that a new event appears after a step.
    pub event_prob: f64,
    /// Unresolved events stay live and are penalized every step instead of expiring.
    #[serde(default)]
    pub persistent_events: bool,
    pub event_type_dist: Vec<f64>,
    /// One distribution over nodes per event type.
    pub event_node_dist: Vec<Vec<f64>>,
    /// Symmetric 0/1 rows.
    pub adjacency: Vec<Vec<u8>>,
    pub cost: Vec<Vec<f64>>,
}

impl EraConfig {
    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn n_event_types(&self) -> usize {
        self.event_type_dist.len()
    }

    /// Parse and validate a TOML config.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<toml>", e.to_string()))?;
        let cfg: EraConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Check every invariant and report the first violation with its indices.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if n < 2 {
            return Err(Error::config("adjacency", "need at least two nodes"));
        }
        if self.n_resources < 1 {
            return Err(Error::config("n_resources", "must be at least 1"));
        }
        if self.episode_length < 1 {
            return Err(Error::config("episode_length", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.event_prob) {
            return Err(Error::config("event_prob", "must lie in [0, 1]"));
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(format!("adjacency[{i}]"), format!("row has {} entries, expected {n}", row.len())));
            }
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if x > 1 {
                    return Err(Error::config(format!("adjacency[{i}][{j}]"), format!("entry {x} is not 0 or 1")));
                }
                if x != self.adjacency[j][i] {
                    return Err(Error::config(format!("adjacency[{i}][{j}]"), format!("not symmetric with adjacency[{j}][{i}]")));
                }
            }
        }
        if self.cost.len() != n {
            return Err(Error::config("cost", format!("has {} rows, expected {n}", self.cost.len())));
        }
        for (i, row) in self.cost.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(format!("cost[{i}]"), format!("row has {} entries, expected {n}", row.len())));
            }
            for (j, &c) in row.iter().enumerate() {
                if !(c >= 0.0) || !c.is_finite() {
                    return Err(Error::config(format!("cost[{i}][{j}]"), format!("cost {c} must be finite and nonnegative")));
                }
                if i == j && c != 0.0 {
                    return Err(Error::config(format!("cost[{i}][{i}]"), "diagonal cost must be 0"));
                }
            }
        }
        check_distribution("event_type_dist", &self.event_type_dist)?;
        if self.event_node_dist.len() != self.event_type_dist.len() {
            return Err(Error::config(
                "event_node_dist",
                format!("{} node distributions for {} event types", self.event_node_dist.len(), self.event_type_dist.len()),
            ));
        }
        for (t, d) in self.event_node_dist.iter().enumerate() {
            if d.len() != n {
                return Err(Error::config(format!("event_node_dist[{t}]"), format!("has {} entries, expected {n}", d.len())));
            }
            check_distribution(&format!("event_node_dist[{t}]"), d)?;
        }
        Ok(())
    }

    /// Deterministic stand-in graph for a version of the family.
    pub fn generate(version: EnvVersion) -> Result<Self> {
        let (n_resources, n, max_hops) =
            version.era_shape().ok_or_else(|| Error::UnknownVersion(format!("{version} has no ERA graph")))?;
        let seed = 1000 + EnvVersion::ALL.iter().position(|&v| v == version).unwrap() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adjacency = vec![vec![0u8; n]; n];
        // random spanning tree keeps the graph connected, then sparse extra edges
        for i in 1..n {
            let j = rng.random_range(0..i);
            adjacency[i][j] = 1;
            adjacency[j][i] = 1;
        }
        for i in 0..n {
            for j in i + 1..n {
                if adjacency[i][j] == 0 && rng.random::<f64>() < 0.2 {
                    adjacency[i][j] = 1;
                    adjacency[j][i] = 1;
                }
            }
        }
        let hops = hop_matrix(&adjacency);
        let cost = hops.iter().map(|r| r.iter().map(|&h| h as f64).collect()).collect();
        let n_types = 2;
        let event_type_dist = normalized((0..n_types).map(|_| rng.random_range(0.5..1.5)).collect());
        let event_node_dist = (0..n_types)
            .map(|_| normalized((0..n).map(|_| rng.random::<f64>().powi(2) + 0.05).collect()))
            .collect();
        Ok(Self {
            name: version.name().to_string(),
            n_resources,
            max_hops,
            reward_resolve: 10.0,
            penalty_miss: 10.0,
            episode_length: 100,
            event_prob: 0.8,
            persistent_events: false,
            event_type_dist,
            event_node_dist,
            adjacency,
            cost,
        })
    }

    /// The config file shipped for a graph version.
    pub fn builtin(version: EnvVersion) -> Result<Self> {
        let text = match version {
            EnvVersion::EraV1 => include_str!("../configs/era/era_v1.toml"),
            EnvVersion::EraV2 => include_str!("../configs/era/era_v2.toml"),
            EnvVersion::EraV3 => include_str!("../configs/era/era_v3.toml"),
            EnvVersion::EraV4 => include_str!("../configs/era/era_v4.toml"),
            EnvVersion::EraV5 => include_str!("../configs/era/era_v5.toml"),
            other => return Err(Error::UnknownVersion(format!("{other} has no ERA graph"))),
        };
        Self::from_toml(text)
    }
}

fn normalized(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn check_distribution(path: &str, d: &[f64]) -> Result<()> {
    if d.is_empty() {
        return Err(Error::config(path, "distribution is empty"));
    }
    if let Some(i) = d.iter().position(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::config(format!("{path}[{i}]"), format!("probability {} is negative or not finite", d[i])));
    }
    let s: f64 = d.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::config(path, format!("sums to {s}, expected 1")));
    }
    Ok(())
}

/// Unweighted shortest-path hop counts; `usize::MAX` for unreachable pairs.
pub fn hop_matrix(adjacency: &[Vec<u8>]) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    (0..n)
        .map(|src| {
            let mut dist = vec![usize::MAX; n];
            dist[src] = 0;
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for v in 0..n {
                    if adjacency[u][v] == 1 && dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            dist
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub node: usize,
    pub kind: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EraState {
    /// Node of each resource.
    pub allocation: Vec<usize>,
    pub live_events: Vec<Event>,
    pub step_index: usize,
}

/// Graph facts the validity check needs, shared by the env and its oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct EraTopology {
    pub adjacency: Vec<Vec<u8>>,
    pub hops: Vec<Vec<usize>>,
    pub max_hops: usize,
    pub n_resources: usize,
}

impl EraTopology {
    pub fn new(cfg: &EraConfig) -> Self {
        Self {
            adjacency: cfg.adjacency.clone(),
            hops: hop_matrix(&cfg.adjacency),
            max_hops: cfg.max_hops,
            n_resources: cfg.n_resources,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }
}

/// Every target is the current node or a neighbor, and all targets lie within
/// `max_hops` of each other.
pub fn era_is_valid(topo: &EraTopology, state: &EraState, action: &CategoricalAction) -> Result<bool> {
    let n = topo.n_nodes();
    if action.0.len() != topo.n_resources || action.0.iter().any(|&x| x >= n) {
        return Err(Error::ActionOutOfRange { action: action.0.clone(), dims: topo.n_resources, categories: n });
    }
    for (&from, &to) in state.allocation.iter().zip(&action.0) {
        if from != to && topo.adjacency[from][to] == 0 {
            return Ok(false);
        }
    }
    for (i, &a) in action.0.iter().enumerate() {
        for &b in &action.0[i + 1..] {
            if topo.hops[a][b] > topo.max_hops {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Move, settle events, and return the reward. The state's live events
/// are replaced by the unresolved ones that persist (if any); new events are
/// added by the caller.
pub fn era_settle(cfg: &EraConfig, topo: &EraTopology, state: &mut EraState, action: &CategoricalAction) -> Result<f64> {
    if !era_is_valid(topo, state, action)? {
        return Err(Error::InvalidAction { action: action.0.clone(), state: format!("{state:?}") });
    }
    let move_cost: f64 = state.allocation.iter().zip(&action.0).map(|(&a, &b)| cfg.cost[a][b]).sum();
    state.allocation.clone_from(&action.0);
    let (resolved, missed): (Vec<Event>, Vec<Event>) =
        state.live_events.iter().partition(|e| state.allocation.contains(&e.node));
    let reward = resolved.len() as f64 * cfg.reward_resolve - missed.len() as f64 * cfg.penalty_miss - move_cost;
    state.live_events = if cfg.persistent_events { missed } else { Vec::new() };
    state.step_index += 1;
    Ok(reward)
}

#[derive(Clone, Debug)]
pub struct Era {
    cfg: Arc<EraConfig>,
    topo: Arc<EraTopology>,
    state: EraState,
    rng: ChaCha8Rng,
}

impl Era {
    pub fn new(cfg: EraConfig) -> Result<Self> {
        cfg.validate()?;
        let topo = Arc::new(EraTopology::new(&cfg));
        let state = EraState { allocation: vec![0; cfg.n_resources], live_events: Vec::new(), step_index: 0 };
        Ok(Self { cfg: Arc::new(cfg), topo, state, rng: ChaCha8Rng::seed_from_u64(0) })
    }

    pub fn config(&self) -> &EraConfig {
        &self.cfg
    }

    pub fn topology(&self) -> Arc<EraTopology> {
        Arc::clone(&self.topo)
    }

    pub fn oracle(&self) -> EraOracle {
        EraOracle { topo: self.topology() }
    }

    fn spawn_event(&mut self) {
        if self.rng.random::<f64>() < self.cfg.event_prob {
            let kind = sample_from(&self.cfg.event_type_dist, &mut self.rng);
            let node = sample_from(&self.cfg.event_node_dist[kind], &mut self.rng);
            self.state.live_events.push(Event { node, kind });
        }
    }
}

fn sample_from(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Environment for Era {
    type State = EraState;

    fn action_space(&self) -> ActionSpace {
        ActionSpace::new(self.cfg.n_resources, self.cfg.n_nodes())
    }

    fn observation_dim(&self) -> usize {
        let n = self.cfg.n_nodes();
        self.cfg.n_resources * n + n * self.cfg.n_event_types() + 1
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let start = self.rng.random_range(0..self.cfg.n_nodes());
        self.state = EraState { allocation: vec![start; self.cfg.n_resources], live_events: Vec::new(), step_index: 0 };
        self.spawn_event();
        self.observe()
    }

    fn step(&mut self, action: &CategoricalAction) -> Result<StepOutcome> {
        if self.state.step_index >= self.cfg.episode_length {
            return Err(Error::EpisodeDone);
        }
        let cfg = Arc::clone(&self.cfg);
        let reward = era_settle(&cfg, &self.topo, &mut self.state, action)?;
        let done = self.state.step_index >= cfg.episode_length;
        if !done {
            self.spawn_event();
        }
        Ok(StepOutcome { observation: self.observe(), reward, done })
    }

    fn state(&self) -> &EraState {
        &self.state
    }

    fn observe(&self) -> Vec<f64> {
        let n = self.cfg.n_nodes();
        let r = self.cfg.n_resources;
        let mut obs = vec![0.0; self.observation_dim()];
        for (i, &node) in self.state.allocation.iter().enumerate() {
            obs[i * n + node] = 1.0;
        }
        for e in &self.state.live_events {
            obs[r * n + e.kind * n + e.node] = 1.0;
        }
        obs[r * n + n * self.cfg.n_event_types()] = self.state.step_index as f64 / self.cfg.episode_length as f64;
        obs
    }
}

#[derive(Clone, Debug)]
pub struct EraOracle {
    topo: Arc<EraTopology>,
}

impl ConstraintOracle<EraState> for EraOracle {
    fn is_valid(&self, state: &EraState, action: &CategoricalAction) -> Result<bool> {
        era_is_valid(&self.topo, state, action)
    }
}

// ---------------------------------------------------------------------------
// ERA-Partial

/// Three hidden states behind one observation. Each hidden state has a
/// trigger action; playing it earns `reward_change` and advances the hidden
/// state cyclically, anything else costs `penalty_stay` and changes nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EraPartialConfig {
    pub n_resources: usize,
    pub n_nodes: usize,
    pub triggers: Vec<Vec<usize>>,
    pub reward_change: f64,
    pub penalty_stay: f64,
    pub episode_length: usize,
}

impl EraPartialConfig {
    pub fn builtin() -> Result<Self> {
        Self::from_toml(include_str!("../configs/era/era_partial.toml"))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<toml>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.into_inner().to_string()))?;
        if cfg.triggers.is_empty() {
            return Err(Error::config("triggers", "need at least one hidden state"));
        }
        for (i, t) in cfg.triggers.iter().enumerate() {
            if t.len() != cfg.n_resources || t.iter().any(|&x| x >= cfg.n_nodes) {
                return Err(Error::config(format!("triggers[{i}]"), "does not fit the action space"));
            }
        }
        if cfg.episode_length < 1 {
            return Err(Error::config("episode_length", "must be at least 1"));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentState {
    pub latent: usize,
    pub step_index: usize,
}

#[derive(Clone, Debug)]
pub struct EraPartial {
    cfg: EraPartialConfig,
    state: LatentState,
    rng: ChaCha8Rng,
}

impl EraPartial {
    pub fn new(cfg: EraPartialConfig) -> Self {
        Self { cfg, state: LatentState { latent: 0, step_index: 0 }, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn config(&self) -> &EraPartialConfig {
        &self.cfg
    }
}

impl Environment for EraPartial {
    type State = LatentState;

    fn action_space(&self) -> ActionSpace {
        ActionSpace::new(self.cfg.n_resources, self.cfg.n_nodes)
    }

    fn observation_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = LatentState { latent: self.rng.random_range(0..self.cfg.triggers.len()), step_index: 0 };
        self.observe()
    }

    fn step(&mut self, action: &CategoricalAction) -> Result<StepOutcome> {
        if self.state.step_index >= self.cfg.episode_length {
            return Err(Error::EpisodeDone);
        }
        self.action_space().check(action)?;
        let reward = if action.0 == self.cfg.triggers[self.state.latent] {
            self.state.latent = (self.state.latent + 1) % self.cfg.triggers.len();
            self.cfg.reward_change
        } else {
            -self.cfg.penalty_stay
        };
        self.state.step_index += 1;
        Ok(StepOutcome { observation: self.observe(), reward, done: self.state.step_index >= self.cfg.episode_length })
    }

    fn state(&self) -> &LatentState {
        &self.state
    }

    fn observe(&self) -> Vec<f64> {
        vec![1.0]
    }
}

// ---------------------------------------------------------------------------
// Toy-Partial

pub const TOY_A: [usize; 2] = [0, 1];
pub const TOY_B: [usize; 2] = [1, 0];

/// Two aliased hidden states. `A = (0,1)` is correct in state 0 and `B = (1,0)`
/// in state 1; a correct action earns `+r` and switches the hidden state, any
/// other action (including the stay actions `(0,0)` and `(1,1)`) costs `r`
/// and leaves it unchanged.
#[derive(Clone, Debug)]
pub struct ToyPartial {
    pub reward: f64,
    pub episode_length: usize,
    state: LatentState,
    rng: ChaCha8Rng,
}

impl ToyPartial {
    pub fn new(reward: f64, episode_length: usize) -> Self {
        Self { reward, episode_length, state: LatentState { latent: 0, step_index: 0 }, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Long-run average reward of a memoryless policy putting mass `p_a` on A and `p_b` on B.
    pub fn average_reward(p_a: f64, p_b: f64, r: f64) -> f64 {
        if p_a + p_b == 0.0 {
            return -r;
        }
        if p_a == 0.0 || p_b == 0.0 {
            // the chain is absorbed in the state where the played action is wrong
            return -r;
        }
        r * (4.0 * p_a * p_b / (p_a + p_b) - 1.0)
    }
}

impl Default for ToyPartial {
    fn default() -> Self {
        Self::new(1.0, 100)
    }
}

impl Environment for ToyPartial {
    type State = LatentState;

    fn action_space(&self) -> ActionSpace {
        ActionSpace::new(2, 2)
    }

    fn observation_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = LatentState { latent: self.rng.random_range(0..2), step_index: 0 };
        self.observe()
    }

    fn step(&mut self, action: &CategoricalAction) -> Result<StepOutcome> {
        if self.state.step_index >= self.episode_length {
            return Err(Error::EpisodeDone);
        }
        self.action_space().check(action)?;
        let correct = if self.state.latent == 0 { TOY_A } else { TOY_B };
        let reward = if action.0 == correct {
            self.state.latent = 1 - self.state.latent;
            self.reward
        } else {
            -self.reward
        };
        self.state.step_index += 1;
        Ok(StepOutcome { observation: self.observe(), reward, done: self.state.step_index >= self.episode_length })
    }

    fn state(&self) -> &LatentState {
        &self.state
    }

    fn observe(&self) -> Vec<f64> {
        vec![1.0]
    }
}

// ---------------------------------------------------------------------------
// Uniform wrappers

#[derive(Clone, Debug, PartialEq)]
pub enum AnyState {
    Era(EraState),
    Latent(LatentState),
}

#[derive(Clone, Debug)]
pub enum EnvKind {
    Era(Era),
    EraPartial(EraPartial),
    Toy(ToyPartial),
}

/// Any shipped environment behind one type, keeping an owned copy of its state.
#[derive(Clone, Debug)]
pub struct AnyEnv {
    kind: EnvKind,
    state: AnyState,
}

impl AnyEnv {
    pub fn new(kind: EnvKind) -> Self {
        let state = Self::read_state(&kind);
        Self { kind, state }
    }

    pub fn kind(&self) -> &EnvKind {
        &self.kind
    }

    fn read_state(kind: &EnvKind) -> AnyState {
        match kind {
            EnvKind::Era(e) => AnyState::Era(e.state().clone()),
            EnvKind::EraPartial(e) => AnyState::Latent(*e.state()),
            EnvKind::Toy(e) => AnyState::Latent(*e.state()),
        }
    }
}

/// Either accept-all or the ERA validity check.
#[derive(Clone, Debug)]
pub enum AnyOracle {
    AcceptAll,
    Era(EraOracle),
}

impl ConstraintOracle<AnyState> for AnyOracle {
    fn is_valid(&self, state: &AnyState, action: &CategoricalAction) -> Result<bool> {
        match (self, state) {
            (AnyOracle::AcceptAll, _) => Ok(true),
            (AnyOracle::Era(o), AnyState::Era(s)) => o.is_valid(s, action),
            (AnyOracle::Era(_), AnyState::Latent(_)) => {
                Err(Error::Contract("ERA oracle queried with a non-ERA state".into()))
            }
        }
    }
}

impl AnyOracle {
    pub fn is_constrained(&self) -> bool {
        matches!(self, AnyOracle::Era(_))
    }
}

/// Build one of the shipped environments together with its oracle.
pub fn make_env(version: EnvVersion) -> Result<(AnyEnv, AnyOracle)> {
    match version {
        EnvVersion::ToyPartial => Ok((AnyEnv::new(EnvKind::Toy(ToyPartial::default())), AnyOracle::AcceptAll)),
        EnvVersion::EraPartial => {
            Ok((AnyEnv::new(EnvKind::EraPartial(EraPartial::new(EraPartialConfig::builtin()?))), AnyOracle::AcceptAll))
        }
        _ => make_era_from(EraConfig::builtin(version)?),
    }
}

pub fn make_era_from(cfg: EraConfig) -> Result<(AnyEnv, AnyOracle)> {
    let env = Era::new(cfg)?;
    let oracle = AnyOracle::Era(env.oracle());
    Ok((AnyEnv::new(EnvKind::Era(env)), oracle))
}

impl Environment for AnyEnv {
    type State = AnyState;

    fn action_space(&self) -> ActionSpace {
        match &self.kind {
            EnvKind::Era(e) => e.action_space(),
            EnvKind::EraPartial(e) => e.action_space(),
            EnvKind::Toy(e) => e.action_space(),
        }
    }

    fn observation_dim(&self) -> usize {
        match &self.kind {
            EnvKind::Era(e) => e.observation_dim(),
            EnvKind::EraPartial(e) => e.observation_dim(),
            EnvKind::Toy(e) => e.observation_dim(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let obs = match &mut self.kind {
            EnvKind::Era(e) => e.reset(seed),
            EnvKind::EraPartial(e) => e.reset(seed),
            EnvKind::Toy(e) => e.reset(seed),
        };
        self.state = Self::read_state(&self.kind);
        obs
    }

    fn step(&mut self, action: &CategoricalAction) -> Result<StepOutcome> {
        let out = match &mut self.kind {
            EnvKind::Era(e) => e.step(action),
            EnvKind::EraPartial(e) => e.step(action),
            EnvKind::Toy(e) => e.step(action),
        }?;
        self.state = Self::read_state(&self.kind);
        Ok(out)
    }

    fn state(&self) -> &AnyState {
        &self.state
    }

    fn observe(&self) -> Vec<f64> {
        match &self.kind {
            EnvKind::Era(e) => e.observe(),
            EnvKind::EraPartial(e) => e.observe(),
            EnvKind::Toy(e) => e.observe(),
        }
    }
}
