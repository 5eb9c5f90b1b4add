//! Brute-force reference computations used to check the estimators.
//!
//! Nothing here goes through the autodiff tape: the flow reference forward
//! re-reads the parameter tensors and evaluates them with plain `f64`
//! arithmetic, the policy gradient comes from dynamic programming over a
//! tabular MDP, and Jacobians come from central differences.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::action::{ActionSpace, CategoricalAction};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, PosteriorSample};
use crate::nn::ParamStore;
use crate::policy::{stack_observations, Policy, PolicyGraph};
use crate::nn::Bound;
use crate::tape::Tensor;

/// A Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl OracleEstimate {
    /// `log p_hat` with the delta-method error `sqrt((1 - p) / (n p))`.
    pub fn log_frequency(hits: usize, n: usize) -> Self {
        if hits == 0 {
            return Self { value: f64::NEG_INFINITY, std_error: f64::INFINITY, n_samples: n };
        }
        let p = hits as f64 / n as f64;
        Self { value: p.ln(), std_error: ((1.0 - p) / (n as f64 * p)).sqrt(), n_samples: n }
    }
}

type Layer = (Vec<f64>, Vec<f64>, usize, usize);

fn read_mlp(store: &ParamStore, prefix: &str) -> Vec<Layer> {
    let mut layers = Vec::new();
    for i in 0.. {
        let (Some(w), Some(b)) = (store.find(&format!("{prefix}.{i}.weight")), store.find(&format!("{prefix}.{i}.bias")))
        else {
            break;
        };
        let w = store.get(w);
        layers.push((w.data().to_vec(), store.get(b).data().to_vec(), w.rows(), w.cols()));
    }
    layers
}

fn eval_mlp(layers: &[Layer], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (k, (w, b, fan_in, fan_out)) in layers.iter().enumerate() {
        let mut y = b.clone();
        for i in 0..*fan_in {
            let xi = h[i];
            if xi != 0.0 {
                for j in 0..*fan_out {
                    y[j] += xi * w[i * fan_out + j];
                }
            }
        }
        if k + 1 < layers.len() {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        h = y;
    }
    h
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Plain `f64` re-evaluation of a [`FlowModel`]'s generative path.
#[derive(Clone, Debug)]
pub struct ReferenceFlow {
    space: ActionSpace,
    sigma_min: f64,
    encoder: Vec<Layer>,
    couplings: Vec<Vec<Layer>>,
}

impl ReferenceFlow {
    pub fn from_model(model: &FlowModel) -> Self {
        let store = model.params();
        let couplings = (0..model.num_flow_layers()).map(|k| read_mlp(store, &format!("flow.{k}"))).collect();
        Self {
            space: model.action_space(),
            sigma_min: model.config().sigma_min,
            encoder: read_mlp(store, "encoder"),
            couplings,
        }
    }

    pub fn base(&self, obs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.space.latent_dim();
        let out = eval_mlp(&self.encoder, obs);
        let mu = out[..n].to_vec();
        let sigma = out[n..].iter().map(|&x| softplus(x).max(self.sigma_min)).collect();
        (mu, sigma)
    }

    /// Push a latent through every coupling; returns the image and log |det J|.
    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let n = z.len();
        let mut z = z.to_vec();
        let mut log_det = 0.0;
        for (k, net) in self.couplings.iter().enumerate() {
            let keep: Vec<bool> = (0..n).map(|i| i % 2 == k % 2).collect();
            let input: Vec<f64> = z.iter().zip(&keep).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            let raw = eval_mlp(net, &input);
            for i in 0..n {
                if !keep[i] {
                    let s = raw[i].tanh();
                    z[i] = z[i] * s.exp() + raw[n + i];
                    log_det += s;
                }
            }
        }
        (z, log_det)
    }

    pub fn decode(&self, z: &[f64]) -> Vec<usize> {
        z.chunks(self.space.categories)
            .map(|row| {
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Sample `n` actions and count each flat action index.
    pub fn action_counts(&self, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let size = self.space.enumerable(crate::ENUMERATION_LIMIT)?;
        let (mu, sigma) = self.base(obs);
        let mut counts = vec![0usize; size];
        let mut z = vec![0.0; mu.len()];
        for _ in 0..n {
            for i in 0..z.len() {
                let e: f64 = rng.sample(StandardNormal);
                z[i] = mu[i] + sigma[i] * e;
            }
            let (zk, _) = self.forward(&z);
            let a = CategoricalAction(self.decode(&zk));
            counts[self.space.index_of(&a)] += 1;
        }
        Ok(counts)
    }
}

/// Log-frequency of `action` among `n` forward samples of the flow.
pub fn mc_logprob_oracle(
    model: &FlowModel,
    action: &CategoricalAction,
    obs: &[f64],
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<OracleEstimate> {
    model.action_space().check(action)?;
    let reference = ReferenceFlow::from_model(model);
    let counts = reference.action_counts(obs, n, rng)?;
    Ok(OracleEstimate::log_frequency(counts[model.action_space().index_of(action)], n))
}

/// Log-frequency estimates for every action from one shared batch of `n` samples.
pub fn mc_logprob_all(model: &FlowModel, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<OracleEstimate>> {
    let counts = ReferenceFlow::from_model(model).action_counts(obs, n, rng)?;
    Ok(counts.into_iter().map(|c| OracleEstimate::log_frequency(c, n)).collect())
}

/// Central-difference Jacobian, `J[i][j] = d f_i / d x_j`.
pub fn finite_diff_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> Result<Vec<Vec<f64>>> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + eps;
        let hi = f(&xp);
        xp[j] = x[j] - eps;
        let lo = f(&xp);
        xp[j] = x[j];
        if hi.len() != m || lo.len() != m {
            return Err(Error::Contract("map changed output width".into()));
        }
        for i in 0..m {
            let d = (hi[i] - lo[i]) / (2.0 * eps);
            if !d.is_finite() {
                return Err(Error::NonFiniteTerm { term: "finite difference" });
            }
            jac[i][j] = d;
        }
    }
    Ok(jac)
}

/// `log |det A|` of a square matrix.
pub fn log_abs_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let m = DMatrix::from_fn(n, n, |i, j| a[i][j]);
    m.lu().determinant().abs().ln()
}

/// Exact posterior of an identity flow with `M = 2`: the diagonal Gaussian
/// base restricted to the action's argmax region. For it every importance
/// weight equals `P(a | s)`, so ELBO = CUBO = log P(a | s).
#[derive(Clone, Debug)]
pub struct TruncatedBasePosterior {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    action: CategoricalAction,
}

impl TruncatedBasePosterior {
    pub fn new(model: &FlowModel, obs: &[f64], action: &CategoricalAction) -> Result<Self> {
        let space = model.action_space();
        if space.categories != 2 {
            return Err(Error::Contract("truncated-base posterior needs M = 2".into()));
        }
        space.check(action)?;
        let (mu, sigma) = ReferenceFlow::from_model(model).base(obs);
        Ok(Self { mu, sigma, action: action.clone() })
    }

    /// `log P(a)` in closed form: each row wins with probability
    /// `Phi((mu_a - mu_b) / sqrt(sigma_a^2 + sigma_b^2))`.
    pub fn log_prob(&self) -> f64 {
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        self.action
            .0
            .iter()
            .enumerate()
            .map(|(d, &a)| {
                let (i, j) = (2 * d + a, 2 * d + 1 - a);
                let z = (self.mu[i] - self.mu[j]) / (self.sigma[i].powi(2) + self.sigma[j].powi(2)).sqrt();
                std.cdf(z).ln()
            })
            .sum()
    }

    fn log_base(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(&x, (&m, &s))| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum()
    }

    /// Rejection draws from the base until every row decodes to the action.
    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<PosteriorSample> {
        let log_p = self.log_prob();
        (0..n)
            .map(|_| {
                let mut z = vec![0.0; self.mu.len()];
                for (d, &a) in self.action.0.iter().enumerate() {
                    loop {
                        for k in 0..2 {
                            let e: f64 = rng.sample(StandardNormal);
                            z[2 * d + k] = self.mu[2 * d + k] + self.sigma[2 * d + k] * e;
                        }
                        if z[2 * d + a] > z[2 * d + 1 - a] {
                            break;
                        }
                    }
                }
                let log_q = self.log_base(&z) - log_p;
                PosteriorSample { z_k: z, log_q }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Tabular policy gradients

/// Finite-horizon MDP with a per-state validity table.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub initial: Vec<f64>,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
    pub horizon: usize,
}

impl TabularMdp {
    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_actions(&self) -> usize {
        self.reward[0].len()
    }

    /// Two states, four actions, horizon two, one invalid action per state.
    pub fn tiny() -> Self {
        Self {
            initial: vec![0.6, 0.4],
            transition: vec![
                vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5], vec![0.0, 1.0]],
                vec![vec![0.3, 0.7], vec![1.0, 0.0], vec![0.6, 0.4], vec![0.1, 0.9]],
            ],
            reward: vec![vec![1.0, -0.5, 2.0, 0.3], vec![-1.0, 1.5, 0.2, 0.8]],
            valid: vec![vec![true, true, false, true], vec![true, false, true, true]],
            horizon: 2,
        }
    }
}

fn softmax_row(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `pi'(.|s)` and its Jacobian `d pi'(a|s) / d theta[s][b]` by the quotient rule.
fn effective_row(theta: &[f64], valid: &[bool]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let pi = softmax_row(theta);
    let k = pi.len();
    let z: f64 = pi.iter().zip(valid).filter(|(_, &v)| v).map(|(p, _)| p).sum();
    if !valid.iter().any(|&v| v) {
        return Err(Error::EmptyMask);
    }
    // d pi(a) / d theta_b = pi(a) (1[a = b] - pi(b))
    let dpi = |a: usize, b: usize| pi[a] * (if a == b { 1.0 } else { 0.0 } - pi[b]);
    let dz: Vec<f64> = (0..k).map(|b| (0..k).filter(|&c| valid[c]).map(|c| dpi(c, b)).sum()).collect();
    let mut eff = vec![0.0; k];
    let mut jac = vec![vec![0.0; k]; k];
    for a in 0..k {
        if !valid[a] {
            continue;
        }
        eff[a] = pi[a] / z;
        for b in 0..k {
            jac[a][b] = (dpi(a, b) * z - pi[a] * dz[b]) / (z * z);
        }
    }
    Ok((eff, jac))
}

/// Expected undiscounted return of `pi'` and its gradient with respect to the
/// softmax logits `theta[s][a]`, flattened state-major.
pub fn exact_policy_gradient(mdp: &TabularMdp, theta: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let (ns, na, h) = (mdp.n_states(), mdp.n_actions(), mdp.horizon);
    if ns * na > 1000 {
        return Err(Error::Capacity { actions: (ns * na) as u128, limit: 1000 });
    }
    let rows: Vec<(Vec<f64>, Vec<Vec<f64>>)> =
        (0..ns).map(|s| effective_row(&theta[s], &mdp.valid[s])).collect::<Result<_>>()?;
    // backward pass for Q_t and V_t
    let mut q = vec![vec![vec![0.0; na]; ns]; h];
    let mut v_next = vec![0.0; ns];
    for t in (0..h).rev() {
        let mut v = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let future: f64 = (0..ns).map(|s2| mdp.transition[s][a][s2] * v_next[s2]).sum();
                q[t][s][a] = mdp.reward[s][a] + future;
                v[s] += rows[s].0[a] * q[t][s][a];
            }
        }
        v_next = v;
    }
    let value: f64 = (0..ns).map(|s| mdp.initial[s] * v_next[s]).sum();
    // forward pass for state occupancy
    let mut grad = vec![0.0; ns * na];
    let mut d = mdp.initial.clone();
    for t in 0..h {
        let mut d_next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                for b in 0..na {
                    grad[s * na + b] += d[s] * rows[s].1[a][b] * q[t][s][a];
                }
                for s2 in 0..ns {
                    d_next[s2] += d[s] * rows[s].0[a] * mdp.transition[s][a][s2];
                }
            }
        }
        d = d_next;
    }
    Ok((value, grad))
}

/// Expected return of `pi'` by listing every trajectory.
pub fn enumerated_return(mdp: &TabularMdp, theta: &[Vec<f64>]) -> Result<f64> {
    let rows: Vec<Vec<f64>> =
        (0..mdp.n_states()).map(|s| effective_row(&theta[s], &mdp.valid[s]).map(|r| r.0)).collect::<Result<_>>()?;
    fn go(mdp: &TabularMdp, rows: &[Vec<f64>], s: usize, t: usize) -> f64 {
        if t == mdp.horizon {
            return 0.0;
        }
        let mut total = 0.0;
        for a in 0..mdp.n_actions() {
            if rows[s][a] == 0.0 {
                continue;
            }
            let mut inner = mdp.reward[s][a];
            for s2 in 0..mdp.n_states() {
                if mdp.transition[s][a][s2] > 0.0 {
                    inner += mdp.transition[s][a][s2] * go(mdp, rows, s2, t + 1);
                }
            }
            total += rows[s][a] * inner;
        }
        total
    }
    Ok((0..mdp.n_states()).map(|s| mdp.initial[s] * go(mdp, &rows, s, 0)).sum())
}

/// Softmax policy with one logit row per discrete state; observations are one-hot.
#[derive(Clone, Debug)]
pub struct TabularSoftmax {
    n_states: usize,
    n_actions: usize,
    params: ParamStore,
}

impl TabularSoftmax {
    pub fn new(theta: &[Vec<f64>]) -> Self {
        let mut params = ParamStore::new();
        params.add("theta", Tensor::from_rows(theta));
        Self { n_states: theta.len(), n_actions: theta[0].len(), params }
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[s] = 1.0;
        v
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        softmax_row(self.params.tensors()[0].row(s))
    }

    fn state_of(&self, obs: &[f64]) -> Result<usize> {
        obs.iter().position(|&x| x == 1.0).ok_or_else(|| Error::Schema {
            expected: format!("one-hot over {} states", self.n_states),
            actual: format!("{obs:?}"),
        })
    }
}

impl Policy for TabularSoftmax {
    fn action_space(&self) -> ActionSpace {
        ActionSpace::new(1, self.n_actions)
    }

    fn obs_dim(&self) -> usize {
        self.n_states
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample(&self, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<CategoricalAction>> {
        let probs = self.probs(self.state_of(obs)?);
        Ok((0..n).map(|_| CategoricalAction(vec![crate::policy::sample_index(&probs, rng)])).collect())
    }

    fn log_prob_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        _rng: &mut dyn RngCore,
    ) -> Result<PolicyGraph<'t>> {
        let x = stack_observations(obs, self.n_states)?;
        let theta = p.var(self.params.find("theta").expect("theta"));
        let logits = theta.tape().constant(x).matmul(theta);
        let mut idx = Vec::with_capacity(actions.len());
        for a in actions {
            self.action_space().check(a)?;
            idx.push(a.0[0]);
        }
        let log_prob = logits.log_softmax_cols().take(1, &idx);
        Ok(PolicyGraph { log_prob, elbo: None, cubo: None })
    }

    fn full_distribution(&self, obs: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(Some(self.probs(self.state_of(obs)?)))
    }
}

/// Deterministic seeded stream for worker `k` of a parallel oracle run.
pub fn worker_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}
