//! Stochastic policies over multi-dimensional categorical actions.

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::action::{ActionSpace, CategoricalAction};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::tape::{Tape, Tensor, Var};
use crate::ENUMERATION_LIMIT;

/// Log-probability of each `(state, action)` row, plus the bound estimates
/// when the policy only has estimates.
pub struct PolicyGraph<'t> {
    /// `B x 1`
    pub log_prob: Var<'t>,
    pub elbo: Option<Var<'t>>,
    pub cubo: Option<Var<'t>>,
}

impl<'t> PolicyGraph<'t> {
    fn exact(log_prob: Var<'t>) -> Self {
        Self { log_prob, elbo: None, cubo: None }
    }
}

pub trait Policy {
    fn action_space(&self) -> ActionSpace;

    fn obs_dim(&self) -> usize;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// `n` i.i.d. draws for one state.
    fn sample(&self, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<CategoricalAction>>;

    /// Differentiable log-probabilities (or estimates of them) for a batch.
    fn log_prob_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        rng: &mut dyn RngCore,
    ) -> Result<PolicyGraph<'t>>;

    fn log_prob(&self, obs: &[f64], action: &CategoricalAction, rng: &mut dyn RngCore) -> Result<f64> {
        let tape = Tape::new();
        let p = self.params().bind_frozen(&tape);
        Ok(self.log_prob_graph(&p, &[obs], &[action], rng)?.log_prob.item())
    }

    /// Probabilities of every action in flat-index order, for heads that can enumerate.
    fn full_distribution(&self, _obs: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    fn as_flow(&self) -> Option<&FlowModel> {
        None
    }

    fn as_flow_mut(&mut self) -> Option<&mut FlowModel> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Dimension order for the autoregressive head; natural order when empty.
    pub ar_order: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], activation: Activation::Tanh, ar_order: Vec::new() }
    }
}

/// Stack observations into a `B x obs_dim` tensor, checking each width.
pub fn stack_observations(obs: &[&[f64]], obs_dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(obs.len() * obs_dim);
    for o in obs {
        if o.len() != obs_dim {
            return Err(Error::Schema {
                expected: format!("flat observation of length {obs_dim}"),
                actual: format!("length {}", o.len()),
            });
        }
        data.extend_from_slice(o);
    }
    Ok(Tensor::from_vec(obs.len(), obs_dim, data))
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding can leave u just above the running sum; fall back to the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn trunk(
    store: &mut ParamStore,
    obs_dim: usize,
    out: usize,
    cfg: &HeadConfig,
    rng: &mut impl Rng,
) -> Mlp {
    let mut sizes = vec![obs_dim];
    sizes.extend(&cfg.hidden);
    sizes.push(out);
    Mlp::new(store, "trunk", &sizes, cfg.activation, false, rng)
}

fn frozen_logits(store: &ParamStore, net: &Mlp, obs: &[f64], obs_dim: usize) -> Result<Vec<f64>> {
    let x = stack_observations(&[obs], obs_dim)?;
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    Ok(net.forward(&p, tape.constant(x)).value().into_vec())
}

fn joint_by_enumeration<P: Policy + ?Sized>(policy: &P, obs: &[f64]) -> Result<Vec<f64>> {
    let space = policy.action_space();
    space.enumerable(ENUMERATION_LIMIT)?;
    let actions: Vec<CategoricalAction> = space.all_actions().collect();
    let refs: Vec<&CategoricalAction> = actions.iter().collect();
    let obs_rows = vec![obs; actions.len()];
    let tape = Tape::new();
    let p = policy.params().bind_frozen(&tape);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let lp = policy.log_prob_graph(&p, &obs_rows, &refs, &mut rng)?.log_prob.value();
    Ok(lp.data().iter().map(|x| x.exp()).collect())
}

/// Softmax over all `M^D` joint actions.
#[derive(Clone, Debug)]
pub struct CategoricalPolicy {
    space: ActionSpace,
    obs_dim: usize,
    params: ParamStore,
    net: Mlp,
}

impl CategoricalPolicy {
    pub fn new(obs_dim: usize, space: ActionSpace, cfg: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        let n = space.enumerable(ENUMERATION_LIMIT)?;
        let mut params = ParamStore::new();
        let net = trunk(&mut params, obs_dim, n, cfg, rng);
        Ok(Self { space, obs_dim, params, net })
    }

    /// The output layer, for tests that pin logits.
    pub fn output_bias(&self) -> ParamId {
        self.net.output_layer().bias
    }

    pub fn logits(&self, obs: &[f64]) -> Result<Vec<f64>> {
        frozen_logits(&self.params, &self.net, obs, self.obs_dim)
    }

    fn logits_graph<'t>(&self, p: &Bound<'t>, obs: &[&[f64]]) -> Result<Var<'t>> {
        let x = stack_observations(obs, self.obs_dim)?;
        let tape = p.var(self.net.layers[0].weight).tape();
        Ok(self.net.forward(p, tape.constant(x)))
    }

    fn indices(&self, actions: &[&CategoricalAction]) -> Result<Vec<usize>> {
        actions
            .iter()
            .map(|a| {
                self.space.check(a)?;
                Ok(self.space.index_of(a))
            })
            .collect()
    }
}

impl Policy for CategoricalPolicy {
    fn action_space(&self) -> ActionSpace {
        self.space
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample(&self, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<CategoricalAction>> {
        let probs = softmax(&self.logits(obs)?);
        Ok((0..n).map(|_| self.space.action_at(sample_index(&probs, rng))).collect())
    }

    fn log_prob_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        _rng: &mut dyn RngCore,
    ) -> Result<PolicyGraph<'t>> {
        let idx = self.indices(actions)?;
        let lp = self.logits_graph(p, obs)?.log_softmax_cols().take(1, &idx);
        Ok(PolicyGraph::exact(lp))
    }

    fn full_distribution(&self, obs: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(Some(softmax(&self.logits(obs)?)))
    }
}

/// Validity bits over all `M^D` actions in flat-index order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector {
    pub bits: Vec<bool>,
}

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Additive log-mask: 0 for valid entries, a huge negative number otherwise.
    fn log_penalty(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 0.0 } else { -1e30 }).collect()
    }
}

/// Zero out invalid entries and renormalize.
pub fn apply_mask(dist: &[f64], mask: &MaskVector) -> Result<Vec<f64>> {
    if dist.len() != mask.bits.len() {
        return Err(Error::Schema {
            expected: format!("mask of length {}", dist.len()),
            actual: format!("length {}", mask.bits.len()),
        });
    }
    let total: f64 = dist.iter().zip(&mask.bits).filter(|(_, &b)| b).map(|(p, _)| p).sum();
    if mask.count_valid() == 0 || total <= 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(dist.iter().zip(&mask.bits).map(|(&p, &b)| if b { p / total } else { 0.0 }).collect())
}

/// Categorical head restricted to a per-state mask of valid actions.
#[derive(Clone, Debug)]
pub struct MaskedPolicy {
    inner: CategoricalPolicy,
}

impl MaskedPolicy {
    pub fn new(obs_dim: usize, space: ActionSpace, cfg: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { inner: CategoricalPolicy::new(obs_dim, space, cfg, rng)? })
    }

    pub fn inner(&self) -> &CategoricalPolicy {
        &self.inner
    }

    pub fn masked_distribution(&self, obs: &[f64], mask: &MaskVector) -> Result<Vec<f64>> {
        apply_mask(&softmax(&self.inner.logits(obs)?), mask)
    }

    pub fn sample_masked(
        &self,
        obs: &[f64],
        mask: &MaskVector,
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<CategoricalAction>> {
        let probs = self.masked_distribution(obs, mask)?;
        Ok((0..n).map(|_| self.inner.space.action_at(sample_index(&probs, rng))).collect())
    }

    pub fn log_prob_graph_masked<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        masks: &[&MaskVector],
        actions: &[&CategoricalAction],
    ) -> Result<Var<'t>> {
        let idx = self.inner.indices(actions)?;
        let k = self.inner.space.enumerable(ENUMERATION_LIMIT)?;
        let mut penalty = Vec::with_capacity(masks.len() * k);
        for m in masks {
            if m.bits.len() != k {
                return Err(Error::Schema { expected: format!("mask of length {k}"), actual: format!("length {}", m.bits.len()) });
            }
            if m.count_valid() == 0 {
                return Err(Error::EmptyMask);
            }
            penalty.extend(m.log_penalty());
        }
        let logits = self.inner.logits_graph(p, obs)?;
        let masked = logits.add(logits.tape().constant(Tensor::from_vec(masks.len(), k, penalty)));
        Ok(masked.log_softmax_cols().take(1, &idx))
    }
}

impl Policy for MaskedPolicy {
    fn action_space(&self) -> ActionSpace {
        self.inner.space
    }

    fn obs_dim(&self) -> usize {
        self.inner.obs_dim
    }

    fn params(&self) -> &ParamStore {
        &self.inner.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.inner.params
    }

    fn sample(&self, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<CategoricalAction>> {
        self.inner.sample(obs, n, rng)
    }

    fn log_prob_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        rng: &mut dyn RngCore,
    ) -> Result<PolicyGraph<'t>> {
        self.inner.log_prob_graph(p, obs, actions, rng)
    }

    fn full_distribution(&self, obs: &[f64]) -> Result<Option<Vec<f64>>> {
        self.inner.full_distribution(obs)
    }
}

/// Independent softmax per action dimension.
#[derive(Clone, Debug)]
pub struct FactoredPolicy {
    space: ActionSpace,
    obs_dim: usize,
    params: ParamStore,
    net: Mlp,
}

impl FactoredPolicy {
    pub fn new(obs_dim: usize, space: ActionSpace, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let net = trunk(&mut params, obs_dim, space.latent_dim(), cfg, rng);
        Self { space, obs_dim, params, net }
    }

    /// Per-dimension marginals, `D` vectors of length `M`.
    pub fn marginals(&self, obs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let logits = frozen_logits(&self.params, &self.net, obs, self.obs_dim)?;
        Ok(logits.chunks(self.space.categories).map(softmax).collect())
    }
}

/// `log_softmax` of each `M`-wide block of `logits`, gathered at the action entries and summed.
fn blockwise_log_prob<'t>(space: ActionSpace, blocks: &[Var<'t>], actions: &[&CategoricalAction]) -> Result<Var<'t>> {
    let tape = blocks[0].tape();
    let m = space.categories;
    let mut idx = Vec::with_capacity(actions.len() * space.dims);
    for a in actions {
        space.check(a)?;
        idx.extend(a.0.iter().enumerate().map(|(d, &x)| d * m + x));
    }
    let lsm: Vec<Var<'t>> = blocks.iter().map(|b| b.log_softmax_cols()).collect();
    Ok(tape.concat_cols(&lsm).take(space.dims, &idx).sum_cols())
}

impl Policy for FactoredPolicy {
    fn action_space(&self) -> ActionSpace {
        self.space
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample(&self, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<CategoricalAction>> {
        let marginals = self.marginals(obs)?;
        Ok((0..n).map(|_| CategoricalAction(marginals.iter().map(|p| sample_index(p, rng)).collect())).collect())
    }

    fn log_prob_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        _rng: &mut dyn RngCore,
    ) -> Result<PolicyGraph<'t>> {
        let x = stack_observations(obs, self.obs_dim)?;
        let tape = p.var(self.net.layers[0].weight).tape();
        let logits = self.net.forward(p, tape.constant(x));
        let m = self.space.categories;
        let blocks: Vec<Var<'t>> = (0..self.space.dims).map(|d| logits.slice_cols(d * m, (d + 1) * m)).collect();
        Ok(PolicyGraph::exact(blockwise_log_prob(self.space, &blocks, actions)?))
    }

    fn full_distribution(&self, obs: &[f64]) -> Result<Option<Vec<f64>>> {
        joint_by_enumeration(self, obs).map(Some)
    }
}

/// Sequential per-dimension softmax. Dimension `d`'s logits are the factored
/// trunk output plus a linear function of the one-hot codes of the
/// dimensions that precede it in `order`.
#[derive(Clone, Debug)]
pub struct AutoregressivePolicy {
    space: ActionSpace,
    obs_dim: usize,
    params: ParamStore,
    net: Mlp,
    cond: ParamId,
    order: Vec<usize>,
}

impl AutoregressivePolicy {
    pub fn new(obs_dim: usize, space: ActionSpace, cfg: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        let order = if cfg.ar_order.is_empty() { (0..space.dims).collect() } else { cfg.ar_order.clone() };
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..space.dims).collect::<Vec<_>>() {
            return Err(Error::config("policy.ar_order", format!("must be a permutation of 0..{}", space.dims)));
        }
        let mut params = ParamStore::new();
        let net = trunk(&mut params, obs_dim, space.latent_dim(), cfg, rng);
        let n = space.latent_dim();
        let bound = 1.0 / (n as f64).sqrt();
        let w = Tensor::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-bound..bound)).collect());
        let cond = params.add("ar.cond", w);
        Ok(Self { space, obs_dim, params, net, cond, order })
    }

    pub fn conditioning(&self) -> ParamId {
        self.cond
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn position(&self, d: usize) -> usize {
        self.order.iter().position(|&x| x == d).expect("order is a permutation")
    }

    /// One-hot of the dimensions of `action` that come before `d` in the order.
    fn prefix_code(&self, action: &[usize], d: usize, out: &mut [f64]) {
        let pos = self.position(d);
        for &prev in &self.order[..pos] {
            out[prev * self.space.categories + action[prev]] = 1.0;
        }
    }

    /// Distribution of the next dimension in the order after a fixed prefix.
    /// `prefix[i]` is the value of dimension `order[i]`.
    pub fn next_dimension_probs(&self, obs: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.space.dims {
            return Err(Error::Contract(format!("prefix of length {} leaves no dimension to sample", prefix.len())));
        }
        let m = self.space.categories;
        let base = frozen_logits(&self.params, &self.net, obs, self.obs_dim)?;
        let w = self.params.get(self.cond);
        let d = self.order[prefix.len()];
        let mut code = vec![0.0; self.space.latent_dim()];
        for (i, &v) in prefix.iter().enumerate() {
            if v >= m {
                return Err(Error::ActionOutOfRange { action: prefix.to_vec(), dims: self.space.dims, categories: m });
            }
            code[self.order[i] * m + v] = 1.0;
        }
        let logits: Vec<f64> = (0..m)
            .map(|j| {
                let col = d * m + j;
                base[col] + code.iter().enumerate().map(|(r, &c)| c * w.get(r, col)).sum::<f64>()
            })
            .collect();
        Ok(softmax(&logits))
    }
}

impl Policy for AutoregressivePolicy {
    fn action_space(&self) -> ActionSpace {
        self.space
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample(&self, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<CategoricalAction>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut prefix = Vec::with_capacity(self.space.dims);
            for _ in 0..self.space.dims {
                let probs = self.next_dimension_probs(obs, &prefix)?;
                prefix.push(sample_index(&probs, rng));
            }
            let mut dims = vec![0; self.space.dims];
            for (i, &d) in self.order.iter().enumerate() {
                dims[d] = prefix[i];
            }
            out.push(CategoricalAction(dims));
        }
        Ok(out)
    }

    fn log_prob_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        _rng: &mut dyn RngCore,
    ) -> Result<PolicyGraph<'t>> {
        for a in actions {
            self.space.check(a)?;
        }
        let x = stack_observations(obs, self.obs_dim)?;
        let tape = p.var(self.net.layers[0].weight).tape();
        let base = self.net.forward(p, tape.constant(x));
        let w = p.var(self.cond);
        let (m, n) = (self.space.categories, self.space.latent_dim());
        let blocks: Vec<Var<'t>> = (0..self.space.dims)
            .map(|d| {
                let mut code = vec![0.0; actions.len() * n];
                for (b, a) in actions.iter().enumerate() {
                    self.prefix_code(&a.0, d, &mut code[b * n..(b + 1) * n]);
                }
                let cond = tape.constant(Tensor::from_vec(actions.len(), n, code)).matmul(w);
                base.slice_cols(d * m, (d + 1) * m).add(cond.slice_cols(d * m, (d + 1) * m))
            })
            .collect();
        Ok(PolicyGraph::exact(blockwise_log_prob(self.space, &blocks, actions)?))
    }

    fn full_distribution(&self, obs: &[f64]) -> Result<Option<Vec<f64>>> {
        joint_by_enumeration(self, obs).map(Some)
    }
}

impl Policy for FlowModel {
    fn action_space(&self) -> ActionSpace {
        FlowModel::action_space(self)
    }

    fn obs_dim(&self) -> usize {
        FlowModel::obs_dim(self)
    }

    fn params(&self) -> &ParamStore {
        FlowModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        FlowModel::params_mut(self)
    }

    fn sample(&self, obs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<CategoricalAction>> {
        self.sample_actions(obs, n, rng)
    }

    fn log_prob_graph<'t>(
        &self,
        p: &Bound<'t>,
        obs: &[&[f64]],
        actions: &[&CategoricalAction],
        rng: &mut dyn RngCore,
    ) -> Result<PolicyGraph<'t>> {
        let g = self.bounds_graph(p, obs, actions, self.config().bound_samples, rng)?;
        Ok(PolicyGraph { log_prob: g.sandwich, elbo: Some(g.elbo), cubo: Some(g.cubo) })
    }

    fn as_flow(&self) -> Option<&FlowModel> {
        Some(self)
    }

    fn as_flow_mut(&mut self) -> Option<&mut FlowModel> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> HeadConfig {
        HeadConfig { hidden: vec![8], ..HeadConfig::default() }
    }

    fn zero_output(store: &mut ParamStore, net_out: (ParamId, ParamId)) {
        for id in [net_out.0, net_out.1] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    fn empirical(policy: &dyn Policy, obs: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let space = policy.action_space();
        let mut counts = vec![0.0; space.size() as usize];
        for a in policy.sample(obs, n, rng).unwrap() {
            counts[space.index_of(&a)] += 1.0;
        }
        counts.iter().map(|c| c / n as f64).collect()
    }

    #[test]
    fn categorical_zero_and_shifted_logits_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pol = CategoricalPolicy::new(2, ActionSpace::new(2, 3), &cfg(), &mut rng).unwrap();
        let out = pol.net.output_layer().clone();
        zero_output(&mut pol.params, (out.weight, out.bias));
        let d = pol.full_distribution(&[0.3, 0.1]).unwrap().unwrap();
        assert!(d.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
        pol.params.get_mut(out.bias).data_mut().iter_mut().for_each(|x| *x = 1.0);
        let shifted = pol.full_distribution(&[0.3, 0.1]).unwrap().unwrap();
        assert!(shifted.iter().zip(&d).all(|(a, b)| (a - b).abs() < 1e-15));
        pol.params.get_mut(out.bias).data_mut()[4] = 21.0;
        assert!(pol.full_distribution(&[0.3, 0.1]).unwrap().unwrap()[4] > 0.999);
    }

    #[test]
    fn categorical_capacity_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = CategoricalPolicy::new(2, ActionSpace::new(7, 10), &cfg(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Capacity { actions: 10_000_000, .. }));
    }

    #[test]
    fn factored_uniform_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pol = FactoredPolicy::new(3, ActionSpace::new(2, 2), &cfg(), &mut rng);
        let out = pol.net.output_layer().clone();
        zero_output(&mut pol.params, (out.weight, out.bias));
        let d = pol.full_distribution(&[1.0, 2.0, 3.0]).unwrap().unwrap();
        assert!(d.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn factored_deterministic_marginals_give_deterministic_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pol = FactoredPolicy::new(1, ActionSpace::new(2, 3), &cfg(), &mut rng);
        let out = pol.net.output_layer().clone();
        zero_output(&mut pol.params, (out.weight, out.bias));
        pol.params.get_mut(out.bias).data_mut().copy_from_slice(&[0.0, 80.0, 0.0, 0.0, 0.0, 80.0]);
        let d = pol.full_distribution(&[0.0]).unwrap().unwrap();
        let idx = pol.space.index_of(&CategoricalAction(vec![1, 2]));
        assert!((d[idx] - 1.0).abs() < 1e-12);
        for a in pol.sample(&[0.0], 100, &mut rng).unwrap() {
            assert_eq!(a.0, vec![1, 2]);
        }
    }

    #[test]
    fn factored_cannot_split_evenly_beyond_half() {
        // marginals (p, 1-p) x (q, 1-q): P(0,1) = p(1-q), P(1,0) = (1-p)q
        let mut best_min: f64 = 0.0;
        let mut best_balanced: f64 = 0.0;
        for i in 0..=400 {
            for j in 0..=400 {
                let (p, q) = (i as f64 / 400.0, j as f64 / 400.0);
                let (a, b) = (p * (1.0 - q), (1.0 - p) * q);
                best_min = best_min.max(a.min(b));
                if (a - b).abs() < 1e-12 {
                    best_balanced = best_balanced.max(a + b);
                }
            }
        }
        assert!((best_min - 0.25).abs() < 1e-12);
        assert!((best_balanced - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ar_with_zero_conditioning_matches_factored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let space = ActionSpace::new(3, 4);
        let mut ar = AutoregressivePolicy::new(2, space, &cfg(), &mut rng).unwrap();
        let mut fac = FactoredPolicy::new(2, space, &cfg(), &mut rng);
        for name in fac.params.names().to_vec() {
            let (dst, src) = (fac.params.find(&name).unwrap(), ar.params.find(&name).unwrap());
            *fac.params.get_mut(dst) = ar.params.get(src).clone();
        }
        let c = ar.cond;
        ar.params.get_mut(c).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let obs = [0.4, -0.7];
        assert_eq!(ar.full_distribution(&obs).unwrap(), fac.full_distribution(&obs).unwrap());
        let marg = fac.marginals(&obs).unwrap();
        assert_eq!(ar.next_dimension_probs(&obs, &[]).unwrap(), marg[0]);
        assert_eq!(ar.next_dimension_probs(&obs, &[3, 1]).unwrap(), marg[2]);
    }

    #[test]
    fn ar_distribution_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ar = AutoregressivePolicy::new(2, ActionSpace::new(3, 4), &cfg(), &mut rng).unwrap();
        let d = ar.full_distribution(&[0.1, 0.9]).unwrap().unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ar_rejects_bad_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = HeadConfig { ar_order: vec![0, 0, 1], ..cfg() };
        assert!(AutoregressivePolicy::new(2, ActionSpace::new(3, 4), &c, &mut rng).is_err());
    }

    #[test]
    fn sampling_matches_full_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let space = ActionSpace::new(2, 3);
        let cat = CategoricalPolicy::new(2, space, &cfg(), &mut rng).unwrap();
        let fac = FactoredPolicy::new(2, space, &cfg(), &mut rng);
        let ar = AutoregressivePolicy::new(2, space, &HeadConfig { ar_order: vec![1, 0], ..cfg() }, &mut rng).unwrap();
        let obs = [0.5, -1.5];
        for pol in [&cat as &dyn Policy, &fac, &ar] {
            let exact = pol.full_distribution(&obs).unwrap().unwrap();
            assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let emp = empirical(pol, &obs, 100_000, &mut rng);
            assert!(tv(&exact, &emp) < 0.02);
            for (i, a) in space.all_actions().enumerate() {
                let lp = pol.log_prob(&obs, &a, &mut rng).unwrap();
                assert!((lp.exp() - exact[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_examples() {
        let m = |b: &[u8]| MaskVector::new(b.iter().map(|&x| x == 1).collect());
        assert_eq!(apply_mask(&[0.25; 4], &m(&[1, 1, 0, 0])).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        let d = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(apply_mask(&d, &m(&[1, 1, 1, 1])).unwrap(), d.to_vec());
        let r = apply_mask(&[0.2, 0.3, 0.5], &m(&[1, 1, 0])).unwrap();
        assert!((r[0] - 0.4).abs() < 1e-15 && (r[1] - 0.6).abs() < 1e-15 && r[2] == 0.0);
        assert!(matches!(apply_mask(&[0.5, 0.5], &m(&[0, 0])), Err(Error::EmptyMask)));
    }

    #[test]
    fn masked_log_probs_match_renormalized_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pol = MaskedPolicy::new(1, ActionSpace::new(2, 2), &cfg(), &mut rng).unwrap();
        let mask = MaskVector::new(vec![false, true, true, false]);
        let obs = [0.7];
        let exact = pol.masked_distribution(&obs, &mask).unwrap();
        let tape = Tape::new();
        let p = pol.params().bind_frozen(&tape);
        let actions: Vec<CategoricalAction> = pol.action_space().all_actions().collect();
        let refs: Vec<&CategoricalAction> = actions.iter().collect();
        let lp = pol.log_prob_graph_masked(&p, &[&obs[..]; 4], &[&mask; 4], &refs).unwrap().value();
        for i in 0..4 {
            assert!((lp.get(i, 0).exp() - exact[i]).abs() < 1e-12);
        }
        for a in pol.sample_masked(&obs, &mask, 1000, &mut rng).unwrap() {
            assert!(mask.bits[pol.action_space().index_of(&a)]);
        }
    }

    proptest! {
        #[test]
        fn masked_support_is_subset_of_mask(bits in proptest::collection::vec(any::<bool>(), 6), w in proptest::collection::vec(0.01f64..1.0, 6)) {
            let mask = MaskVector::new(bits.clone());
            match apply_mask(&w, &mask) {
                Ok(d) => {
                    for (p, b) in d.iter().zip(&bits) {
                        prop_assert!(*b || *p == 0.0);
                    }
                    prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                Err(e) => prop_assert!(bits.iter().all(|b| !b) && matches!(e, Error::EmptyMask)),
            }
        }
    }
}
