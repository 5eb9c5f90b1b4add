//! The IAR-A2C loop: vectorised rollouts through rejection sampling,
//! bootstrapped returns, the corrected actor step, critic regression and the
//! interleaved ELBO updates of the flow posterior.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{ActionSpace, CategoricalAction};
use crate::envs::{AnyEnv, AnyState, Environment};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::iar::{actor_coefficients, rejection_sample, ConstraintOracle, CorrectionWeighting, MeteredOracle, ValidActionBatch};
use crate::nn::{clip_global_norm, Activation, Mlp, ParamStore, RmsProp};
use crate::policy::{
    stack_observations, AutoregressivePolicy, CategoricalPolicy, FactoredPolicy, HeadConfig, MaskVector, MaskedPolicy,
    Policy,
};
use crate::tape::{Tape, Tensor};
use crate::ENUMERATION_LIMIT;

/// Which actor head is trained and how its actions are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Argmax flow with rejection sampling and the corrected gradient.
    Flow,
    /// Flat softmax over all joint actions, standard gradient.
    Categorical,
    /// Independent per-dimension softmaxes, standard gradient.
    Factored,
    /// Autoregressive head, standard gradient.
    Ar,
    /// Autoregressive head with the corrected gradient.
    ArIar,
    /// Flat softmax restricted by a mask built from querying every action.
    Mask,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] =
        [PolicyKind::Flow, PolicyKind::Categorical, PolicyKind::Factored, PolicyKind::Ar, PolicyKind::ArIar, PolicyKind::Mask];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Flow => "flow",
            PolicyKind::Categorical => "categorical",
            PolicyKind::Factored => "factored",
            PolicyKind::Ar => "ar",
            PolicyKind::ArIar => "ar_iar",
            PolicyKind::Mask => "mask",
        }
    }

    /// Whether the correction term of the rejection gradient applies.
    pub fn corrects(self) -> bool {
        matches!(self, PolicyKind::Flow | PolicyKind::ArIar)
    }

    /// Whether the head needs the whole joint action space enumerated.
    pub fn enumerates(self) -> bool {
        matches!(self, PolicyKind::Categorical | PolicyKind::Mask)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("policy", format!("unknown policy kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Rollout length per environment and update.
    pub t_max: usize,
    /// Number of rollout/update cycles.
    pub e_max: usize,
    pub n_envs: usize,
    /// `S`, draws per rejection batch.
    pub samples: usize,
    pub max_retries: usize,
    pub n_elbo_steps: usize,
    pub elbo_batch_size: usize,
    /// Run the ELBO subroutine after every `elbo_every`-th actor update.
    pub elbo_every: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub elbo_lr: f64,
    pub value_coef: f64,
    /// Apply the correction term (only heads that sample by rejection use it).
    pub correction: bool,
    pub correction_weighting: CorrectionWeighting,
    /// Let the actor loss update the posterior network as well as the flow.
    pub actor_updates_posterior: bool,
    pub max_grad_norm: f64,
    pub entropy_coef: f64,
    pub hidden: Vec<usize>,
    pub ar_order: Vec<usize>,
    pub flow: FlowConfig,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Consecutive skipped updates tolerated before aborting.
    pub max_nonfinite_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            t_max: 5,
            e_max: 2000,
            n_envs: 8,
            samples: 64,
            max_retries: 16,
            n_elbo_steps: 4,
            elbo_batch_size: 256,
            elbo_every: 1,
            lr: 3e-4,
            critic_lr: 3e-4,
            elbo_lr: 3e-4,
            value_coef: 0.5,
            correction: true,
            correction_weighting: CorrectionWeighting::RatioOfMeans,
            actor_updates_posterior: true,
            max_grad_norm: 0.5,
            entropy_coef: 0.0,
            hidden: vec![64, 64],
            ar_order: Vec::new(),
            flow: FlowConfig::default(),
            eval_interval: 2500,
            eval_episodes: 10,
            eval_seed: 1_000_000,
            max_nonfinite_steps: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("train.gamma", "must lie in (0, 1)"));
        }
        let counts = [
            ("train.t_max", self.t_max),
            ("train.e_max", self.e_max),
            ("train.n_envs", self.n_envs),
            ("train.samples", self.samples),
            ("train.elbo_batch_size", self.elbo_batch_size),
            ("train.elbo_every", self.elbo_every),
            ("train.eval_episodes", self.eval_episodes),
            ("train.max_nonfinite_steps", self.max_nonfinite_steps),
        ];
        for (path, v) in counts {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        for (path, v) in [
            ("train.lr", self.lr),
            ("train.critic_lr", self.critic_lr),
            ("train.elbo_lr", self.elbo_lr),
            ("train.value_coef", self.value_coef),
            ("train.max_grad_norm", self.max_grad_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return Err(Error::config("train.entropy_coef", "must be non-negative"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("train.eval_interval", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("train.hidden", "layer widths must be positive"));
        }
        let f = &self.flow;
        if f.flow_hidden == 0 || f.posterior_hidden == 0 || f.encoder_hidden.contains(&0) {
            return Err(Error::config("train.flow", "layer widths must be positive"));
        }
        if f.bound_samples < 2 {
            return Err(Error::config("train.flow.bound_samples", "CUBO needs at least 2 posterior samples"));
        }
        if !(f.sigma_min > 0.0) {
            return Err(Error::config("train.flow.sigma_min", "must be positive"));
        }
        if !(0.0..=1.0).contains(&f.alpha_static) {
            return Err(Error::config("train.flow.alpha_static", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn head(&self) -> HeadConfig {
        HeadConfig { hidden: self.hidden.clone(), activation: Activation::Tanh, ar_order: self.ar_order.clone() }
    }
}

/// The concrete actor behind a [`PolicyKind`].
#[derive(Clone, Debug)]
pub enum PolicyModel {
    Flow(FlowModel),
    Categorical(CategoricalPolicy),
    Factored(FactoredPolicy),
    Autoregressive(AutoregressivePolicy),
    Masked(MaskedPolicy),
}

impl PolicyModel {
    pub fn build(kind: PolicyKind, cfg: &TrainConfig, obs_dim: usize, space: ActionSpace, rng: &mut ChaCha8Rng) -> Result<Self> {
        let head = cfg.head();
        Ok(match kind {
            PolicyKind::Flow => PolicyModel::Flow(FlowModel::new(cfg.flow.clone(), obs_dim, space, rng)?),
            PolicyKind::Categorical => PolicyModel::Categorical(CategoricalPolicy::new(obs_dim, space, &head, rng)?),
            PolicyKind::Factored => PolicyModel::Factored(FactoredPolicy::new(obs_dim, space, &head, rng)),
            PolicyKind::Ar | PolicyKind::ArIar => {
                PolicyModel::Autoregressive(AutoregressivePolicy::new(obs_dim, space, &head, rng)?)
            }
            PolicyKind::Mask => PolicyModel::Masked(MaskedPolicy::new(obs_dim, space, &head, rng)?),
        })
    }

    pub fn policy(&self) -> &dyn Policy {
        match self {
            PolicyModel::Flow(p) => p,
            PolicyModel::Categorical(p) => p,
            PolicyModel::Factored(p) => p,
            PolicyModel::Autoregressive(p) => p,
            PolicyModel::Masked(p) => p,
        }
    }

    pub fn policy_mut(&mut self) -> &mut dyn Policy {
        match self {
            PolicyModel::Flow(p) => p,
            PolicyModel::Categorical(p) => p,
            PolicyModel::Factored(p) => p,
            PolicyModel::Autoregressive(p) => p,
            PolicyModel::Masked(p) => p,
        }
    }
}

/// State-value network `V(s)`.
#[derive(Clone, Debug)]
pub struct Critic {
    params: ParamStore,
    net: Mlp,
}

impl Critic {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let mut sizes = vec![obs_dim];
        sizes.extend(hidden);
        sizes.push(1);
        let net = Mlp::new(&mut params, "critic", &sizes, Activation::Tanh, false, rng);
        Self { params, net }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn values(&self, obs: &[&[f64]]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let x = tape.constant(stack_observations(obs, self.net.input_dim())?);
        Ok(self.net.forward(&p, x).value().into_vec())
    }
}

/// Actor, critic and their optimiser states.
#[derive(Clone, Debug)]
pub struct Agent {
    pub kind: PolicyKind,
    pub model: PolicyModel,
    pub critic: Critic,
    pub actor_opt: RmsProp,
    pub critic_opt: RmsProp,
    pub elbo_opt: RmsProp,
}

impl Agent {
    pub fn new(kind: PolicyKind, cfg: &TrainConfig, obs_dim: usize, space: ActionSpace) -> Result<Self> {
        if kind.enumerates() {
            space.enumerable(ENUMERATION_LIMIT)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = PolicyModel::build(kind, cfg, obs_dim, space, &mut rng)?;
        let critic = Critic::new(obs_dim, &cfg.hidden, &mut rng);
        let actor_opt = RmsProp::new(model.policy().params(), cfg.lr);
        let elbo_opt = RmsProp::new(model.policy().params(), cfg.elbo_lr);
        let critic_opt = RmsProp::new(critic.params(), cfg.critic_lr);
        Ok(Self { kind, model, critic, actor_opt, critic_opt, elbo_opt })
    }

    pub fn policy(&self) -> &dyn Policy {
        self.model.policy()
    }

    pub fn flow(&self) -> Option<&FlowModel> {
        match &self.model {
            PolicyModel::Flow(f) => Some(f),
            _ => None,
        }
    }

    /// Choose an action for one state. Masked heads query every action;
    /// everything else goes through rejection sampling.
    pub fn act(
        &self,
        obs: &[f64],
        state: &AnyState,
        oracle: &dyn ConstraintOracle<AnyState>,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ValidActionBatch, Option<MaskVector>)> {
        match &self.model {
            PolicyModel::Masked(m) => {
                let space = m.action_space();
                oracle.new_decision();
                let mut bits = Vec::with_capacity(space.enumerable(ENUMERATION_LIMIT)?);
                for a in space.all_actions() {
                    bits.push(oracle.is_valid(state, &a)?);
                }
                let queries = bits.len();
                let mask = MaskVector::new(bits);
                let chosen = m.sample_masked(obs, &mask, 1, rng)?.remove(0);
                let batch = ValidActionBatch {
                    samples: 1,
                    valid_actions: vec![chosen.clone()],
                    chosen,
                    logprob_bounds_of_valid: Vec::new(),
                    batches: 1,
                    queries,
                };
                Ok((batch, Some(mask)))
            }
            model => {
                let batch = rejection_sample(model.policy(), obs, state, oracle, cfg.samples, cfg.max_retries, rng)?;
                Ok((batch, None))
            }
        }
    }
}

/// One executed step.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub state: AnyState,
    pub action: CategoricalAction,
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub batch: ValidActionBatch,
    pub mask: Option<MaskVector>,
}

/// Transitions grouped by environment, in time order.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub per_env: Vec<Vec<Transition>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.per_env.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.per_env.iter().flatten()
    }
}

/// `R_i = r_i + gamma R_{i+1}`, restarting at zero after every terminal step
/// and starting from `bootstrap` after the last one.
pub fn discounted_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut r = bootstrap;
    for i in (0..rewards.len()).rev() {
        if dones[i] {
            r = 0.0;
        }
        r = rewards[i] + gamma * r;
        out[i] = r;
    }
    out
}

/// `(R_i, R_i - V(s_i))` for every transition, flattened in [`Rollout::transitions`] order.
pub fn compute_returns(rollout: &Rollout, critic: &Critic, gamma: f64) -> Result<Vec<(f64, f64)>> {
    if rollout.is_empty() {
        return Err(Error::Contract("cannot compute returns of an empty rollout".into()));
    }
    let mut out = Vec::with_capacity(rollout.len());
    for traj in &rollout.per_env {
        let Some(last) = traj.last() else { continue };
        let mut obs: Vec<&[f64]> = traj.iter().map(|t| t.obs.as_slice()).collect();
        obs.push(&last.next_obs);
        let values = critic.values(&obs)?;
        let bootstrap = if last.done { 0.0 } else { values[traj.len()] };
        let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = traj.iter().map(|t| t.done).collect();
        let returns = discounted_returns(&rewards, &dones, bootstrap, gamma);
        out.extend(returns.into_iter().zip(&values).map(|(r, v)| (r, r - v)));
    }
    Ok(out)
}

/// Outcome of one actor/critic step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    /// Mean ELBO and CUBO of the executed actions; `None` for exact heads.
    pub elbo_mean: Option<f64>,
    pub cubo_mean: Option<f64>,
    pub actor_skipped: bool,
    pub critic_skipped: bool,
}

/// Actor loss and gradient for fixed advantages.
pub struct ActorGradient {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub elbo_mean: Option<f64>,
    pub cubo_mean: Option<f64>,
}

/// Gradient of `sum_k coef_k log pi(a_k) / n` over the rollout, where the
/// coefficients come from [`actor_coefficients`].
pub fn actor_gradient(
    agent: &Agent,
    transitions: &[&Transition],
    advantages: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ActorGradient> {
    if transitions.len() != advantages.len() {
        return Err(Error::Contract("advantages not aligned with transitions".into()));
    }
    let correct = cfg.correction && agent.kind.corrects();
    let mut obs: Vec<&[f64]> = Vec::new();
    let mut actions: Vec<CategoricalAction> = Vec::new();
    let mut masks: Vec<&MaskVector> = Vec::new();
    let mut coefs = Vec::new();
    let mut chosen_rows = Vec::with_capacity(transitions.len());
    for (t, &adv) in transitions.iter().zip(advantages) {
        if t.batch.chosen != t.action {
            return Err(Error::Contract("transition action differs from the batch's chosen action".into()));
        }
        for (a, c) in actor_coefficients(&t.batch, adv, cfg.correction_weighting, correct) {
            let is_chosen = a == t.action;
            if c == 0.0 && !is_chosen {
                continue;
            }
            if is_chosen {
                chosen_rows.push(coefs.len());
            }
            obs.push(&t.obs);
            actions.push(a);
            if let Some(m) = &t.mask {
                masks.push(m);
            }
            coefs.push(c);
        }
    }
    let n = transitions.len() as f64;
    let tape = Tape::new();
    let policy = agent.policy();
    let p = policy.params().bind(&tape);
    let refs: Vec<&CategoricalAction> = actions.iter().collect();
    let (log_prob, elbo, cubo) = match &agent.model {
        PolicyModel::Masked(m) => (m.log_prob_graph_masked(&p, &obs, &masks, &refs)?, None, None),
        model => {
            let g = model.policy().log_prob_graph(&p, &obs, &refs, rng)?;
            (g.log_prob, g.elbo, g.cubo)
        }
    };
    let coef = tape.constant(Tensor::column_vector(coefs));
    let mut loss = log_prob.mul(coef).sum().scale(1.0 / n);
    if cfg.entropy_coef > 0.0 {
        let lp = log_prob.gather_rows(&chosen_rows);
        loss = loss.add(lp.detach().mul(lp).mean().scale(cfg.entropy_coef));
    }
    let chosen_mean = |v: crate::tape::Var<'_>| {
        v.with_value(|t| chosen_rows.iter().map(|&r| t.get(r, 0)).sum::<f64>() / chosen_rows.len() as f64)
    };
    let elbo_mean = elbo.map(chosen_mean);
    let cubo_mean = cubo.map(chosen_mean);
    let mut grads = p.grads(&tape.backward(loss));
    if !cfg.actor_updates_posterior && agent.flow().is_some() {
        for (g, name) in grads.iter_mut().zip(policy.params().names()) {
            if name.starts_with("posterior.") {
                g.scale_in_place(0.0);
            }
        }
    }
    Ok(ActorGradient { loss: loss.item(), grads, elbo_mean, cubo_mean })
}

fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::all_finite)
}

/// Metrics row written at every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub wall_clock_s: f64,
    pub env_steps: u64,
    pub episode: u64,
    pub mean_return: f64,
    pub best_return: f64,
    pub valid_fraction_mean: f64,
    pub oracle_queries_cum: u64,
    pub elbo_mean: f64,
    pub cubo_mean: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub seed: u64,
}

impl MetricsRecord {
    pub const COLUMNS: [&'static str; 12] = [
        "wall_clock_s",
        "env_steps",
        "episode",
        "mean_return",
        "best_return",
        "valid_fraction_mean",
        "oracle_queries_cum",
        "elbo_mean",
        "cubo_mean",
        "actor_loss",
        "critic_loss",
        "seed",
    ];

    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "wall_clock_s" => self.wall_clock_s,
            "env_steps" => self.env_steps as f64,
            "episode" => self.episode as f64,
            "mean_return" => self.mean_return,
            "best_return" => self.best_return,
            "valid_fraction_mean" => self.valid_fraction_mean,
            "oracle_queries_cum" => self.oracle_queries_cum as f64,
            "elbo_mean" => self.elbo_mean,
            "cubo_mean" => self.cubo_mean,
            "actor_loss" => self.actor_loss,
            "critic_loss" => self.critic_loss,
            "seed" => self.seed as f64,
            _ => return None,
        })
    }
}

/// Returns over the evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Fraction of raw policy draws that passed the oracle.
    pub raw_valid_fraction: f64,
    /// Executed actions rejected by a second oracle call; always zero.
    pub executed_violations: u64,
    pub steps: u64,
}

/// Run `episodes` evaluation episodes with seeds `seed_base + i`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    agent: &Agent,
    envs: &mut [AnyEnv],
    oracle: &dyn ConstraintOracle<AnyState>,
    cfg: &TrainConfig,
    episodes: usize,
    seed_base: u64,
    rng: &mut ChaCha8Rng,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::config("n_episodes", "must be positive"));
    }
    if envs.is_empty() {
        return Err(Error::Contract("evaluation needs at least one environment".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    let (mut drawn, mut valid, mut violations, mut steps) = (0usize, 0usize, 0u64, 0u64);
    for i in 0..episodes {
        let env = &mut envs[i % envs.len()];
        let mut obs = env.reset(seed_base + i as u64);
        let mut total = 0.0;
        loop {
            let state = env.state().clone();
            let (batch, _) = agent.act(&obs, &state, oracle, cfg, rng)?;
            drawn += batch.samples * batch.batches;
            valid += batch.valid_count();
            if !oracle.is_valid(&state, &batch.chosen)? {
                violations += 1;
            }
            let out = env.step(&batch.chosen)?;
            total += out.reward;
            steps += 1;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalSummary {
        returns,
        mean,
        std,
        raw_valid_fraction: valid as f64 / drawn.max(1) as f64,
        executed_violations: violations,
        steps,
    })
}

/// Per-cycle summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CycleReport {
    pub update: UpdateReport,
    pub elbo_trace: Vec<f64>,
    pub valid_fraction_mean: f64,
    pub transitions: usize,
}

#[derive(Default)]
struct Accumulator {
    valid_fraction: (f64, usize),
    actor_loss: (f64, usize),
    critic_loss: (f64, usize),
    elbo: (f64, usize),
    cubo: (f64, usize),
}

fn push(acc: &mut (f64, usize), v: f64) {
    acc.0 += v;
    acc.1 += 1;
}

fn mean_of(acc: (f64, usize)) -> f64 {
    if acc.1 == 0 {
        f64::NAN
    } else {
        acc.0 / acc.1 as f64
    }
}

pub type EnvFactory<'a> = dyn Fn() -> Result<AnyEnv> + 'a;

/// Stateful IAR-A2C run over `n_envs` environments.
pub struct Trainer<'o> {
    cfg: TrainConfig,
    agent: Agent,
    envs: Vec<AnyEnv>,
    eval_envs: Vec<AnyEnv>,
    obs: Vec<Vec<f64>>,
    episode_return: Vec<f64>,
    completed: Vec<f64>,
    oracle: MeteredOracle<&'o dyn ConstraintOracle<AnyState>>,
    eval_oracle: &'o dyn ConstraintOracle<AnyState>,
    rng: ChaCha8Rng,
    reset_rng: ChaCha8Rng,
    env_steps: u64,
    episodes: u64,
    cycles: usize,
    evals: u64,
    next_eval: u64,
    best_return: f64,
    nonfinite_skips: usize,
    consecutive_skips: usize,
    acc: Accumulator,
    started: Instant,
}

impl<'o> Trainer<'o> {
    pub fn new(
        cfg: TrainConfig,
        kind: PolicyKind,
        env_factory: &EnvFactory<'_>,
        oracle: &'o dyn ConstraintOracle<AnyState>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut envs = (0..cfg.n_envs).map(|_| env_factory()).collect::<Result<Vec<_>>>()?;
        let eval_envs = (0..cfg.eval_episodes.min(16)).map(|_| env_factory()).collect::<Result<Vec<_>>>()?;
        let space = envs[0].action_space();
        let obs_dim = envs[0].observation_dim();
        let agent = Agent::new(kind, &cfg, obs_dim, space)?;
        let mut reset_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        reset_rng.set_stream(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let obs = envs.iter_mut().map(|e| e.reset(reset_rng.random())).collect();
        let n = cfg.n_envs;
        Ok(Self {
            cfg,
            agent,
            envs,
            eval_envs,
            obs,
            episode_return: vec![0.0; n],
            completed: Vec::new(),
            oracle: MeteredOracle::new(oracle),
            eval_oracle: oracle,
            rng,
            reset_rng,
            env_steps: 0,
            episodes: 0,
            cycles: 0,
            evals: 0,
            next_eval: 0,
            best_return: f64::NEG_INFINITY,
            nonfinite_skips: 0,
            consecutive_skips: 0,
            acc: Accumulator::default(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut Agent {
        &mut self.agent
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn oracle_queries(&self) -> u64 {
        self.oracle.queries()
    }

    pub fn nonfinite_skips(&self) -> usize {
        self.nonfinite_skips
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    /// Returns of training episodes finished so far.
    pub fn completed_returns(&self) -> &[f64] {
        &self.completed
    }

    /// `t_max` steps in every environment, resetting finished episodes.
    pub fn collect_rollout(&mut self) -> Result<Rollout> {
        let mut per_env = vec![Vec::with_capacity(self.cfg.t_max); self.envs.len()];
        for t in 0..self.cfg.t_max {
            for (i, traj) in per_env.iter_mut().enumerate() {
                let env = &mut self.envs[i];
                let state = env.state().clone();
                let obs = std::mem::take(&mut self.obs[i]);
                let (batch, mask) = self
                    .agent
                    .act(&obs, &state, &self.oracle, &self.cfg, &mut self.rng)
                    .map_err(|e| match e {
                        Error::Starvation { .. } => Error::RolloutStarved { env: i, step: t, source: Box::new(e) },
                        other => other,
                    })?;
                let out = env.step(&batch.chosen)?;
                self.env_steps += 1;
                self.episode_return[i] += out.reward;
                let next_obs = out.observation.clone();
                self.obs[i] = if out.done {
                    self.episodes += 1;
                    self.completed.push(std::mem::take(&mut self.episode_return[i]));
                    env.reset(self.reset_rng.random())
                } else {
                    out.observation
                };
                traj.push(Transition {
                    obs,
                    state,
                    action: batch.chosen.clone(),
                    next_obs,
                    reward: out.reward,
                    done: out.done,
                    batch,
                    mask,
                });
            }
        }
        Ok(Rollout { per_env })
    }

    fn record_skip(&mut self, what: &str) -> Result<()> {
        self.nonfinite_skips += 1;
        self.consecutive_skips += 1;
        if self.consecutive_skips >= self.cfg.max_nonfinite_steps {
            return Err(Error::Aborted(format!("{} consecutive non-finite {what} updates", self.consecutive_skips)));
        }
        Ok(())
    }

    /// One actor step and one critic step on `rollout`.
    pub fn a2c_update(&mut self, rollout: &Rollout, returns: &[(f64, f64)]) -> Result<UpdateReport> {
        let transitions: Vec<&Transition> = rollout.transitions().collect();
        if transitions.len() != returns.len() {
            return Err(Error::Contract("returns not aligned with rollout".into()));
        }
        let advantages: Vec<f64> = returns.iter().map(|r| r.1).collect();
        let mut report = UpdateReport::default();

        match actor_gradient(&self.agent, &transitions, &advantages, &self.cfg, &mut self.rng) {
            Ok(mut g) if g.loss.is_finite() && all_finite(&g.grads) => {
                report.actor_grad_norm = clip_global_norm(&mut g.grads, self.cfg.max_grad_norm);
                report.actor_loss = g.loss;
                report.elbo_mean = g.elbo_mean;
                report.cubo_mean = g.cubo_mean;
                let agent = &mut self.agent;
                agent.actor_opt.step(agent.model.policy_mut().params_mut(), &g.grads);
                self.consecutive_skips = 0;
            }
            Ok(_) | Err(Error::NonFiniteTerm { .. }) | Err(Error::NumericalOverflow { .. }) => {
                report.actor_skipped = true;
                self.record_skip("actor")?;
            }
            Err(e) => return Err(e),
        }

        let critic = &self.agent.critic;
        let tape = Tape::new();
        let p = critic.params.bind(&tape);
        let obs: Vec<&[f64]> = transitions.iter().map(|t| t.obs.as_slice()).collect();
        let x = tape.constant(stack_observations(&obs, critic.net.input_dim())?);
        let target = tape.constant(Tensor::column_vector(returns.iter().map(|r| r.0).collect()));
        let loss = critic.net.forward(&p, x).sub(target).square().mean().scale(self.cfg.value_coef);
        let mut grads = p.grads(&tape.backward(loss));
        if loss.item().is_finite() && all_finite(&grads) {
            report.critic_grad_norm = clip_global_norm(&mut grads, self.cfg.max_grad_norm);
            report.critic_loss = loss.item();
            let agent = &mut self.agent;
            agent.critic_opt.step(&mut agent.critic.params, &grads);
        } else {
            report.critic_skipped = true;
            self.record_skip("critic")?;
        }
        Ok(report)
    }

    /// Fit the flow and posterior to actions drawn from the current policy
    /// at states of `rollout`; returns the batch-mean ELBO of every step.
    /// A no-op for heads without a posterior.
    pub fn elbo_optimize(&mut self, rollout: &Rollout) -> Result<Vec<f64>> {
        let PolicyModel::Flow(flow) = &self.agent.model else {
            return Ok(Vec::new());
        };
        if rollout.is_empty() {
            return Err(Error::Contract("ELBO optimisation needs at least one state".into()));
        }
        let states: Vec<&[f64]> = rollout.transitions().map(|t| t.obs.as_slice()).collect();
        let mut trace = Vec::with_capacity(self.cfg.n_elbo_steps);
        let mut flow = flow.clone();
        for _ in 0..self.cfg.n_elbo_steps {
            let obs: Vec<&[f64]> =
                (0..self.cfg.elbo_batch_size).map(|_| states[self.rng.random_range(0..states.len())]).collect();
            let mut actions = Vec::with_capacity(obs.len());
            for o in &obs {
                actions.push(flow.sample_actions(o, 1, &mut self.rng)?.remove(0));
            }
            let refs: Vec<&CategoricalAction> = actions.iter().collect();
            let tape = Tape::new();
            let p = flow.params().bind(&tape);
            let g = match flow.bounds_graph(&p, &obs, &refs, flow.config().bound_samples, &mut self.rng) {
                Ok(g) => g,
                Err(Error::NonFiniteTerm { .. }) => {
                    self.record_skip("ELBO")?;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let elbo = g.elbo.mean();
            let mut grads = p.grads(&tape.backward(elbo.neg()));
            if !(elbo.item().is_finite() && all_finite(&grads)) {
                self.record_skip("ELBO")?;
                continue;
            }
            clip_global_norm(&mut grads, self.cfg.max_grad_norm);
            self.agent.elbo_opt.step(flow.params_mut(), &grads);
            self.consecutive_skips = 0;
            trace.push(elbo.item());
        }
        self.agent.model = PolicyModel::Flow(flow);
        Ok(trace)
    }

    /// Rollout, returns, actor/critic step and (on schedule) ELBO steps.
    pub fn cycle(&mut self) -> Result<CycleReport> {
        let rollout = self.collect_rollout()?;
        let returns = compute_returns(&rollout, &self.agent.critic, self.cfg.gamma)?;
        let update = self.a2c_update(&rollout, &returns)?;
        self.cycles += 1;
        let elbo_trace =
            if self.cycles % self.cfg.elbo_every == 0 { self.elbo_optimize(&rollout)? } else { Vec::new() };
        let fractions: Vec<f64> =
            rollout.transitions().map(|t| t.batch.valid_count() as f64 / t.batch.samples as f64).collect();
        for &f in &fractions {
            push(&mut self.acc.valid_fraction, f);
        }
        if !update.actor_skipped {
            push(&mut self.acc.actor_loss, update.actor_loss);
        }
        if !update.critic_skipped {
            push(&mut self.acc.critic_loss, update.critic_loss);
        }
        if let (Some(e), Some(c)) = (update.elbo_mean, update.cubo_mean) {
            push(&mut self.acc.elbo, e);
            push(&mut self.acc.cubo, c);
        }
        Ok(CycleReport {
            update,
            elbo_trace,
            valid_fraction_mean: fractions.iter().sum::<f64>() / fractions.len() as f64,
            transitions: rollout.len(),
        })
    }

    /// Evaluate on the fixed evaluation seeds without touching the training streams.
    pub fn evaluate(&mut self) -> Result<EvalSummary> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(3 + self.evals);
        self.evals += 1;
        evaluate(
            &self.agent,
            &mut self.eval_envs,
            self.eval_oracle,
            &self.cfg,
            self.cfg.eval_episodes,
            self.cfg.eval_seed,
            &mut rng,
        )
    }

    fn record(&mut self) -> Result<(MetricsRecord, bool)> {
        let summary = self.evaluate()?;
        let improved = summary.mean > self.best_return;
        if improved {
            self.best_return = summary.mean;
        }
        let acc = std::mem::take(&mut self.acc);
        let rec = MetricsRecord {
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            env_steps: self.env_steps,
            episode: self.episodes,
            mean_return: summary.mean,
            best_return: self.best_return,
            valid_fraction_mean: mean_of(acc.valid_fraction),
            oracle_queries_cum: self.oracle.queries(),
            elbo_mean: mean_of(acc.elbo),
            cubo_mean: mean_of(acc.cubo),
            actor_loss: mean_of(acc.actor_loss),
            critic_loss: mean_of(acc.critic_loss),
            seed: self.cfg.seed,
        };
        Ok((rec, improved))
    }

    /// Train for `e_max` cycles, evaluating every `eval_interval` steps and
    /// once more at the end. `on_record` sees each row, the agent, and
    /// whether the row set a new best return.
    pub fn run(&mut self, on_record: &mut dyn FnMut(&MetricsRecord, &Agent, bool) -> Result<()>) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        let mut last_eval = None;
        while self.cycles < self.cfg.e_max {
            if self.env_steps >= self.next_eval {
                let (rec, improved) = self.record()?;
                on_record(&rec, &self.agent, improved)?;
                records.push(rec);
                last_eval = Some(self.env_steps);
                while self.next_eval <= self.env_steps {
                    self.next_eval += self.cfg.eval_interval;
                }
            }
            self.cycle()?;
        }
        if last_eval != Some(self.env_steps) {
            let (rec, improved) = self.record()?;
            on_record(&rec, &self.agent, improved)?;
            records.push(rec);
        }
        Ok(records)
    }
}
