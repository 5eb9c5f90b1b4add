//! Conditional argmax-flow policy.
//!
//! A state encoder produces a diagonal Gaussian over a `D x M` latent, a stack
//! of affine coupling layers pushes it forward, and a per-row argmax turns the
//! result into a [`CategoricalAction`]. The log-probability of an action is
//! estimated from a variational posterior whose samples are forced into the
//! action's argmax region by [`soft_threshold`]; both the evidence lower bound
//! and the chi-square upper bound are computed from the same posterior draws
//! and blended into the sandwich estimate.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action::{ActionSpace, CategoricalAction};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::tape::{self, Tape, Tensor, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    Gaussian,
    #[default]
    Flow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Fixed weight, `alpha_static`.
    Static,
    /// One learnable logit.
    Trainable,
    /// `sigmoid(c0 + c1 * (cubo - elbo))` with learnable `c0`, `c1`.
    #[default]
    Adaptive,
    /// Lower bound only, `alpha = 1`.
    ElboOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub encoder_hidden: Vec<usize>,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub posterior_mode: PosteriorMode,
    pub posterior_layers: usize,
    pub posterior_hidden: usize,
    pub alpha_mode: AlphaMode,
    pub alpha_static: f64,
    pub sigma_min: f64,
    /// Posterior draws per bound estimate.
    pub bound_samples: usize,
    /// Zero the encoder's output layer so training starts from a uniform policy.
    pub zero_init_encoder_output: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64, 64],
            flow_layers: 4,
            flow_hidden: 64,
            posterior_mode: PosteriorMode::Flow,
            posterior_layers: 2,
            posterior_hidden: 64,
            alpha_mode: AlphaMode::Adaptive,
            alpha_static: 0.5,
            sigma_min: 1e-3,
            bound_samples: 2,
            zero_init_encoder_output: true,
        }
    }
}

/// Mean and scale of the Gaussian base for one state, each of length `D*M`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// A latent point together with the accumulated log |det| of the map that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint {
    pub z: Vec<f64>,
    pub log_det_accum: f64,
}

/// Lower, upper and blended estimates of `log pi(a|s)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogProbBounds {
    pub elbo: f64,
    pub cubo: f64,
    pub sandwich: f64,
    pub alpha_used: f64,
}

/// A draw from the variational posterior, already inside the target's argmax region.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    pub z_k: Vec<f64>,
    pub log_q: f64,
}

/// Per-row argmax of a flattened `D x M` latent; ties go to the lowest index.
pub fn argmax_decode(z: &[f64], space: ActionSpace) -> CategoricalAction {
    assert_eq!(z.len(), space.latent_dim(), "latent width mismatch");
    let m = space.categories;
    let dims = z
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    CategoricalAction(dims)
}

/// Smallest gap kept between the target and every other coordinate, so a
/// softplus that underflows cannot produce a tie in floating point.
pub const THRESHOLD_GAP: f64 = 1e-9;

/// Smoothly force index `target` to be the strict maximum of `u`.
///
/// `v_target = u_target`, `v_j = u_target - max(log(1 + exp(u_target - u_j)), THRESHOLD_GAP)`.
/// The Jacobian only has a diagonal and the target column, so its log
/// determinant is `sum_{j != target} log sigmoid(u_target - u_j)`.
pub fn soft_threshold(u: &[f64], target: usize) -> (Vec<f64>, f64) {
    assert!(target < u.len(), "threshold target {target} out of range");
    let ui = u[target];
    let mut log_det = 0.0;
    let v = u
        .iter()
        .enumerate()
        .map(|(j, &uj)| {
            if j == target {
                ui
            } else {
                let diff = ui - uj;
                log_det += tape::log_sigmoid(diff);
                ui - tape::softplus(diff).max(THRESHOLD_GAP)
            }
        })
        .collect();
    (v, log_det)
}

/// Alternating-mask affine coupling: coordinates with `i % 2 == parity` pass
/// through and condition the shift and log-scale of the others.
#[derive(Clone, Debug)]
struct Coupling {
    net: Mlp,
    parity: usize,
    width: usize,
}

impl Coupling {
    fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        context: usize,
        hidden: usize,
        parity: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let net = Mlp::new(store, name, &[width + context, hidden, hidden, 2 * width], Activation::Tanh, true, rng);
        Self { net, parity, width }
    }

    fn pass_mask(&self) -> Tensor {
        Tensor::row_vector((0..self.width).map(|i| if i % 2 == self.parity { 1.0 } else { 0.0 }).collect())
    }

    fn shift_scale<'t>(&self, p: &Bound<'t>, z: Var<'t>, context: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
        let tape = z.tape();
        let keep = tape.constant(self.pass_mask());
        let free = tape.constant(self.pass_mask().map(|m| 1.0 - m));
        let masked = z.mul(keep);
        let input = match context {
            Some(c) => tape.concat_cols(&[masked, c]),
            None => masked,
        };
        let raw = self.net.forward(p, input);
        let log_scale = raw.slice_cols(0, self.width).tanh().mul(free);
        let shift = raw.slice_cols(self.width, 2 * self.width).mul(free);
        (log_scale, shift)
    }

    /// Returns the transformed batch and per-row log |det|.
    fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>, context: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
        let (s, t) = self.shift_scale(p, z, context);
        (z.mul(s.exp()).add(t), s.sum_cols())
    }

    fn inverse<'t>(&self, p: &Bound<'t>, y: Var<'t>, context: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
        // pass-through coordinates are unchanged, so conditioning on y matches the forward pass
        let (s, t) = self.shift_scale(p, y, context);
        (y.sub(t).mul(s.neg().exp()), s.sum_cols().neg())
    }
}

#[derive(Clone, Debug)]
enum AlphaParams {
    Fixed(f64),
    Trainable { logit: ParamId },
    Adaptive { c0: ParamId, c1: ParamId },
}

/// Everything needed for the differentiable bound estimates of a batch.
pub struct BoundsGraph<'t> {
    /// `B x 1`
    pub elbo: Var<'t>,
    /// `B x 1`
    pub cubo: Var<'t>,
    /// `B x 1`
    pub sandwich: Var<'t>,
    /// `B x 1` or `1 x 1`
    pub alpha: Var<'t>,
    /// `B x N` log importance weights.
    pub log_weights: Var<'t>,
}

/// The full policy model: encoder, latent flow, posterior and sandwich weights.
#[derive(Clone, Debug)]
pub struct FlowModel {
    config: FlowConfig,
    obs_dim: usize,
    space: ActionSpace,
    params: ParamStore,
    encoder: Mlp,
    flow: Vec<Coupling>,
    posterior_base: Mlp,
    posterior_flow: Vec<Coupling>,
    alpha: AlphaParams,
}

impl FlowModel {
    pub fn new(config: FlowConfig, obs_dim: usize, space: ActionSpace, rng: &mut impl Rng) -> Result<Self> {
        if config.bound_samples == 0 {
            return Err(Error::config("flow.bound_samples", "must be at least 1"));
        }
        if !(config.sigma_min > 0.0) {
            return Err(Error::config("flow.sigma_min", "must be positive"));
        }
        let n = space.latent_dim();
        let mut params = ParamStore::new();
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.encoder_hidden);
        sizes.push(2 * n);
        let encoder = Mlp::new(&mut params, "encoder", &sizes, Activation::Tanh, config.zero_init_encoder_output, rng);
        let flow = (0..config.flow_layers)
            .map(|k| Coupling::new(&mut params, &format!("flow.{k}"), n, 0, config.flow_hidden, k % 2, rng))
            .collect();
        let context = obs_dim + n;
        let posterior_base = Mlp::new(
            &mut params,
            "posterior.base",
            &[context, config.posterior_hidden, config.posterior_hidden, 2 * n],
            Activation::Tanh,
            true,
            rng,
        );
        let posterior_flow = match config.posterior_mode {
            PosteriorMode::Gaussian => Vec::new(),
            PosteriorMode::Flow => (0..config.posterior_layers)
                .map(|k| {
                    Coupling::new(
                        &mut params,
                        &format!("posterior.flow.{k}"),
                        n,
                        context,
                        config.posterior_hidden,
                        k % 2,
                        rng,
                    )
                })
                .collect(),
        };
        let alpha = match config.alpha_mode {
            AlphaMode::Static => {
                if !(0.0..=1.0).contains(&config.alpha_static) {
                    return Err(Error::config("flow.alpha_static", "must lie in [0, 1]"));
                }
                AlphaParams::Fixed(config.alpha_static)
            }
            AlphaMode::ElboOnly => AlphaParams::Fixed(1.0),
            AlphaMode::Trainable => AlphaParams::Trainable { logit: params.add("alpha.logit", Tensor::scalar(0.0)) },
            AlphaMode::Adaptive => AlphaParams::Adaptive {
                c0: params.add("alpha.c0", Tensor::scalar(0.0)),
                c1: params.add("alpha.c1", Tensor::scalar(-1.0)),
            },
        };
        Ok(Self { config, obs_dim, space, params, encoder, flow, posterior_base, posterior_flow, alpha })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_space(&self) -> ActionSpace {
        self.space
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_flow_layers(&self) -> usize {
        self.flow.len()
    }

    /// Names of the latent-flow parameters, in application order.
    pub fn flow_param_prefix(layer: usize) -> String {
        format!("flow.{layer}")
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::Schema {
                expected: format!("flat observation of length {}", self.obs_dim),
                actual: format!("length {}", obs.len()),
            });
        }
        Ok(())
    }

    fn obs_batch(&self, obs: &[&[f64]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(obs.len() * self.obs_dim);
        for o in obs {
            self.check_obs(o)?;
            data.extend_from_slice(o);
        }
        Ok(Tensor::from_vec(obs.len(), self.obs_dim, data))
    }

    /// `(mu, sigma)` of the Gaussian base, each `B x n`.
    pub fn encode<'t>(&self, p: &Bound<'t>, obs: Var<'t>) -> (Var<'t>, Var<'t>) {
        let n = self.space.latent_dim();
        let out = self.encoder.forward(p, obs);
        let mu = out.slice_cols(0, n);
        let sigma = out.slice_cols(n, 2 * n).softplus().clamp_min(self.config.sigma_min);
        (mu, sigma)
    }

    /// Push a batch through the latent flow; returns `(z_K, log |det| per row)`.
    pub fn flow_forward_graph<'t>(&self, p: &Bound<'t>, z0: Var<'t>) -> (Var<'t>, Var<'t>) {
        let tape = z0.tape();
        let mut z = z0;
        let mut ld = tape.constant(Tensor::zeros(z0.rows(), 1));
        for layer in &self.flow {
            let (next, l) = layer.forward(p, z, None);
            z = next;
            ld = ld.add(l);
        }
        (z, ld)
    }

    /// Pull a batch back through the latent flow; the log |det| is that of the inverse map.
    pub fn flow_inverse_graph<'t>(&self, p: &Bound<'t>, zk: Var<'t>) -> (Var<'t>, Var<'t>) {
        let tape = zk.tape();
        let mut z = zk;
        let mut ld = tape.constant(Tensor::zeros(zk.rows(), 1));
        for layer in self.flow.iter().rev() {
            let (prev, l) = layer.inverse(p, z, None);
            z = prev;
            ld = ld.add(l);
        }
        (z, ld)
    }

    pub fn encode_state(&self, obs: &[f64]) -> Result<BaseParams> {
        self.check_obs(obs)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (mu, sigma) = self.encode(&p, tape.constant(Tensor::row_vector(obs.to_vec())));
        let mu = mu.value().into_vec();
        let sigma = sigma.value().into_vec();
        if !mu.iter().chain(&sigma).all(|x| x.is_finite()) {
            return Err(Error::NumericalOverflow { stage: "encoder", layer: self.encoder.layers.len() - 1 });
        }
        Ok(BaseParams { mu, sigma })
    }

    fn run_layers(&self, z: &[f64], inverse: bool) -> Result<LatentPoint> {
        let n = self.space.latent_dim();
        if z.len() != n {
            return Err(Error::Schema { expected: format!("latent of width {n}"), actual: format!("width {}", z.len()) });
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let mut cur = tape.constant(Tensor::row_vector(z.to_vec()));
        let mut total = 0.0;
        let order: Vec<usize> =
            if inverse { (0..self.flow.len()).rev().collect() } else { (0..self.flow.len()).collect() };
        for k in order {
            let (next, ld) =
                if inverse { self.flow[k].inverse(&p, cur, None) } else { self.flow[k].forward(&p, cur, None) };
            let ld = ld.item();
            if !ld.is_finite() || !next.with_value(Tensor::all_finite) {
                return Err(Error::NumericalOverflow { stage: if inverse { "inverse flow" } else { "flow" }, layer: k });
            }
            total += ld;
            cur = next;
        }
        Ok(LatentPoint { z: cur.value().into_vec(), log_det_accum: total })
    }

    /// `z_K = F(z_0)` with the accumulated forward log |det|.
    pub fn flow_forward(&self, z0: &[f64]) -> Result<LatentPoint> {
        self.run_layers(z0, false)
    }

    /// `z_0 = F^{-1}(z_K)` with the log |det| of the inverse map.
    pub fn flow_inverse(&self, zk: &[f64]) -> Result<LatentPoint> {
        self.run_layers(zk, true)
    }

    /// Draw `count` actions for one state.
    pub fn sample_actions(&self, obs: &[f64], count: usize, rng: &mut dyn RngCore) -> Result<Vec<CategoricalAction>> {
        let batch = self.sample_latents(&[obs], count, rng)?;
        Ok(batch.into_iter().next().unwrap_or_default())
    }

    /// Draw `count` actions for each state in `obs`.
    pub fn sample_latents(
        &self,
        obs: &[&[f64]],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<CategoricalAction>>> {
        if obs.is_empty() || count == 0 {
            return Ok(vec![Vec::new(); obs.len()]);
        }
        let n = self.space.latent_dim();
        let obs_t = self.obs_batch(obs)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (mu, sigma) = self.encode(&p, tape.constant(obs_t));
        let rows: Vec<usize> = (0..obs.len()).flat_map(|b| std::iter::repeat_n(b, count)).collect();
        let eps = standard_normal(rows.len(), n, rng);
        let z0 = mu.gather_rows(&rows).add(sigma.gather_rows(&rows).mul(tape.constant(eps)));
        let (zk, _) = self.flow_forward_graph(&p, z0);
        let zk = zk.value();
        if !zk.all_finite() {
            return Err(Error::NumericalOverflow { stage: "flow", layer: self.flow.len().saturating_sub(1) });
        }
        let mut out = vec![Vec::with_capacity(count); obs.len()];
        for (r, &b) in rows.iter().enumerate() {
            out[b].push(argmax_decode(zk.row(r), self.space));
        }
        Ok(out)
    }

    fn context(&self, obs: &Tensor, actions: &[&CategoricalAction]) -> Tensor {
        let n = self.space.latent_dim();
        let width = self.obs_dim + n;
        let mut data = Vec::with_capacity(actions.len() * width);
        for (b, a) in actions.iter().enumerate() {
            data.extend_from_slice(obs.row(b));
            data.extend(self.space.one_hot(a));
        }
        Tensor::from_vec(actions.len(), width, data)
    }

    /// Posterior draws for `(obs[b], actions[b])`, `samples` per pair, rows
    /// ordered `b * samples + k`. Returns `(v, log q(v))`.
    fn posterior_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &Tensor,
        actions: &[&CategoricalAction],
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> (Var<'t>, Var<'t>) {
        let tape = p.var(self.encoder.layers[0].weight).tape();
        let n = self.space.latent_dim();
        let m = self.space.categories;
        let ctx = tape.constant(self.context(obs, actions));
        let base = self.posterior_base.forward(p, ctx);
        let rows: Vec<usize> = (0..actions.len()).flat_map(|b| std::iter::repeat_n(b, samples)).collect();
        let mu = base.slice_cols(0, n).gather_rows(&rows);
        let sigma = base.slice_cols(n, 2 * n).softplus().clamp_min(self.config.sigma_min).gather_rows(&rows);
        let eps = standard_normal(rows.len(), n, rng);
        let eps_sq_half = eps.map(|e| -0.5 * e * e);
        let mut u = mu.add(sigma.mul(tape.constant(eps)));
        let mut log_q = tape
            .constant(eps_sq_half)
            .sub(sigma.ln())
            .sum_cols()
            .add_scalar(-HALF_LN_2PI * n as f64);
        if !self.posterior_flow.is_empty() {
            let ctx_rows = ctx.gather_rows(&rows);
            for layer in &self.posterior_flow {
                let (next, ld) = layer.forward(p, u, Some(ctx_rows));
                u = next;
                log_q = log_q.sub(ld);
            }
        }
        // soft threshold per row of the D x M latent
        let mut target_idx = Vec::with_capacity(rows.len() * n);
        let mut free = Vec::with_capacity(rows.len() * n);
        for &b in &rows {
            let a = actions[b];
            for d in 0..self.space.dims {
                for j in 0..m {
                    target_idx.push(d * m + a.0[d]);
                    free.push(if j == a.0[d] { 0.0 } else { 1.0 });
                }
            }
        }
        let free = tape.constant(Tensor::from_vec(rows.len(), n, free));
        let u_target = u.take(n, &target_idx);
        let diff = u_target.sub(u);
        let v = u_target.sub(diff.softplus().clamp_min(THRESHOLD_GAP).mul(free));
        let log_det = diff.log_sigmoid().mul(free).sum_cols();
        (v, log_q.sub(log_det))
    }

    /// Differentiable ELBO, CUBO and sandwich estimates for a batch of
    /// `(state, action)` pairs with `samples` shared posterior draws each.
    pub fn bounds_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<BoundsGraph<'t>> {
        if obs.len() != actions.len() {
            return Err(Error::Contract(format!("{} observations for {} actions", obs.len(), actions.len())));
        }
        if samples == 0 {
            return Err(Error::Contract("bound estimate needs at least one posterior sample".into()));
        }
        for a in actions {
            self.space.check(a)?;
        }
        let obs_t = self.obs_batch(obs)?;
        let tape = p.var(self.encoder.layers[0].weight).tape();
        let (v, log_q) = self.posterior_graph(p, &obs_t, actions, samples, rng);
        let (z0, inv_ld) = self.flow_inverse_graph(p, v);
        let (mu, sigma) = self.encode(p, tape.constant(obs_t));
        let rows: Vec<usize> = (0..actions.len()).flat_map(|b| std::iter::repeat_n(b, samples)).collect();
        let log_p = gaussian_log_density(z0, mu.gather_rows(&rows), sigma.gather_rows(&rows));
        for (term, var) in [("posterior log-density", log_q), ("base log-density", log_p), ("flow log-det", inv_ld)] {
            if !var.with_value(Tensor::all_finite) {
                return Err(Error::NonFiniteTerm { term });
            }
        }
        // log p(z0) - sum_k log|det df_k| - log q
        let log_w = log_p.add(inv_ld).sub(log_q).reshape(actions.len(), samples);
        let elbo = log_w.sum_cols().scale(1.0 / samples as f64);
        let cubo = log_w.scale(2.0).logsumexp_cols().add_scalar(-(samples as f64).ln()).scale(0.5);
        let alpha = match &self.alpha {
            AlphaParams::Fixed(a) => tape.scalar(*a),
            AlphaParams::Trainable { logit } => p.var(*logit).sigmoid(),
            AlphaParams::Adaptive { c0, c1 } => {
                let gap = cubo.sub(elbo).detach();
                p.var(*c0).add(gap.mul(p.var(*c1))).sigmoid()
            }
        };
        let one_minus = alpha.neg().add_scalar(1.0);
        let sandwich = alpha.mul(elbo).add(one_minus.mul(cubo));
        Ok(BoundsGraph { elbo, cubo, sandwich, alpha, log_weights: log_w })
    }

    /// Log importance weights `log p(z0) - sum log|det| - log q` for one state
    /// and `samples` posterior draws of `action`.
    pub fn log_weights(
        &self,
        action: &CategoricalAction,
        obs: &[f64],
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let g = self.bounds_graph(&p, &[obs], &[action], samples, rng)?;
        Ok(g.log_weights.value().into_vec())
    }

    /// Log weights for externally supplied posterior draws.
    pub fn log_weights_for_samples(&self, obs: &[f64], samples: &[PosteriorSample]) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let n = self.space.latent_dim();
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let mut data = Vec::with_capacity(samples.len() * n);
        for s in samples {
            data.extend_from_slice(&s.z_k);
        }
        let v = tape.constant(Tensor::from_vec(samples.len(), n, data));
        let (z0, inv_ld) = self.flow_inverse_graph(&p, v);
        let (mu, sigma) = self.encode(&p, tape.constant(Tensor::row_vector(obs.to_vec())));
        let rows = vec![0; samples.len()];
        let log_p = gaussian_log_density(z0, mu.gather_rows(&rows), sigma.gather_rows(&rows));
        let lw = log_p.add(inv_ld).value().into_vec();
        Ok(lw.iter().zip(samples).map(|(w, s)| w - s.log_q).collect())
    }

    /// Posterior draws for one `(state, action)`; every draw decodes to `action`.
    pub fn posterior_sample(
        &self,
        action: &CategoricalAction,
        obs: &[f64],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<PosteriorSample>> {
        self.space.check(action)?;
        let obs_t = self.obs_batch(&[obs])?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (v, log_q) = self.posterior_graph(&p, &obs_t, &[action], count, rng);
        let v = v.value();
        let log_q = log_q.value();
        Ok((0..count).map(|r| PosteriorSample { z_k: v.row(r).to_vec(), log_q: log_q.get(r, 0) }).collect())
    }

    /// Monte-Carlo evidence lower bound on `log pi(action | obs)`.
    pub fn elbo(&self, action: &CategoricalAction, obs: &[f64], samples: usize, rng: &mut dyn RngCore) -> Result<f64> {
        if samples == 0 {
            return Err(Error::Contract("ELBO needs at least one sample".into()));
        }
        let w = self.log_weights(action, obs, samples, rng)?;
        Ok(w.iter().sum::<f64>() / w.len() as f64)
    }

    /// Monte-Carlo chi-square upper bound, `0.5 * log mean(w^2)`.
    pub fn cubo(&self, action: &CategoricalAction, obs: &[f64], samples: usize, rng: &mut dyn RngCore) -> Result<f64> {
        if samples < 2 {
            return Err(Error::Contract("CUBO needs at least two samples".into()));
        }
        let w = self.log_weights(action, obs, samples, rng)?;
        cubo_from_log_weights(&w)
    }

    /// Sandwich estimate with the configured sample count and alpha mode.
    pub fn sandwich_logprob(&self, action: &CategoricalAction, obs: &[f64], rng: &mut dyn RngCore) -> Result<LogProbBounds> {
        let mut all = self.sandwich_batch(&[obs], &[action], rng)?;
        Ok(all.remove(0))
    }

    pub fn sandwich_batch(
        &self,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<LogProbBounds>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let g = self.bounds_graph(&p, obs, actions, self.config.bound_samples, rng)?;
        let (elbo, cubo, sandwich, alpha) = (g.elbo.value(), g.cubo.value(), g.sandwich.value(), g.alpha.value());
        Ok((0..actions.len())
            .map(|b| LogProbBounds {
                elbo: elbo.get(b, 0),
                cubo: cubo.get(b, 0),
                sandwich: sandwich.get(b, 0),
                alpha_used: if alpha.len() == 1 { alpha.item() } else { alpha.get(b, 0) },
            })
            .collect())
    }

    /// Sample one action and estimate its log-probability.
    pub fn sample_action(&self, obs: &[f64], rng: &mut dyn RngCore) -> Result<(CategoricalAction, LogProbBounds)> {
        let action = self.sample_actions(obs, 1, rng)?.remove(0);
        let bounds = self.sandwich_logprob(&action, obs, rng)?;
        Ok((action, bounds))
    }
}

/// `0.5 * log mean(exp(2 w))`, evaluated in log space.
pub fn cubo_from_log_weights(log_weights: &[f64]) -> Result<f64> {
    let doubled: Vec<f64> = log_weights.iter().map(|w| 2.0 * w).collect();
    let lse = tape::logsumexp(&doubled);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegeneratePosterior);
    }
    Ok(0.5 * (lse - (log_weights.len() as f64).ln()))
}

/// Sum over columns of the diagonal Gaussian log-density, `B x 1`.
pub fn gaussian_log_density<'t>(z: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Var<'t> {
    let n = z.cols();
    let std = z.sub(mu).div(sigma);
    std.square().scale(-0.5).sub(sigma.ln()).sum_cols().add_scalar(-HALF_LN_2PI * n as f64)
}

pub(crate) fn standard_normal(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}
