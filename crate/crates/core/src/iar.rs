//! Invalid-action rejection and the corrected policy-gradient estimator.
//!
//! Actions are drawn from the policy `pi` in batches of `S`; the `l` draws
//! that pass the oracle form the batch, and one of them is chosen uniformly
//! (duplicates keep their weight), so the executed action follows the
//! renormalized policy `pi'`. The gradient of `log pi'(a)` is
//! `grad log pi(a) - grad log sum_{C(s)} pi`, and the second term is
//! estimated from the same `l` valid draws.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::action::CategoricalAction;
use crate::error::{Error, Result};
use crate::flow::LogProbBounds;
use crate::policy::Policy;
use crate::tape::Var;

/// Black-box validity predicate `a in C(s)`.
pub trait ConstraintOracle<S: ?Sized> {
    fn is_valid(&self, state: &S, action: &CategoricalAction) -> Result<bool>;

    /// Called once before the queries of each decision; memoizing wrappers reset here.
    fn new_decision(&self) {}
}

impl<S: ?Sized, O: ConstraintOracle<S> + ?Sized> ConstraintOracle<S> for &O {
    fn is_valid(&self, state: &S, action: &CategoricalAction) -> Result<bool> {
        (**self).is_valid(state, action)
    }

    fn new_decision(&self) {
        (**self).new_decision()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AcceptAll;

impl<S: ?Sized> ConstraintOracle<S> for AcceptAll {
    fn is_valid(&self, _: &S, _: &CategoricalAction) -> Result<bool> {
        Ok(true)
    }
}

/// Oracle from a closure.
pub struct FnOracle<F>(pub F);

impl<S: ?Sized, F: Fn(&S, &CategoricalAction) -> bool> ConstraintOracle<S> for FnOracle<F> {
    fn is_valid(&self, state: &S, action: &CategoricalAction) -> Result<bool> {
        Ok((self.0)(state, action))
    }
}

/// Counts every query, then answers repeats within a decision from a cache.
pub struct MeteredOracle<O> {
    inner: O,
    queries: Cell<u64>,
    inner_calls: Cell<u64>,
    cache: RefCell<HashMap<Vec<usize>, bool>>,
}

impl<O> MeteredOracle<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, queries: Cell::new(0), inner_calls: Cell::new(0), cache: RefCell::new(HashMap::new()) }
    }

    /// Queries issued, before memoization.
    pub fn queries(&self) -> u64 {
        self.queries.get()
    }

    /// Queries that reached the wrapped oracle.
    pub fn inner_calls(&self) -> u64 {
        self.inner_calls.get()
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<S: ?Sized, O: ConstraintOracle<S>> ConstraintOracle<S> for MeteredOracle<O> {
    fn is_valid(&self, state: &S, action: &CategoricalAction) -> Result<bool> {
        self.queries.set(self.queries.get() + 1);
        if let Some(&hit) = self.cache.borrow().get(&action.0) {
            return Ok(hit);
        }
        self.inner_calls.set(self.inner_calls.get() + 1);
        let ok = self.inner.is_valid(state, action)?;
        self.cache.borrow_mut().insert(action.0.clone(), ok);
        Ok(ok)
    }

    fn new_decision(&self) {
        self.cache.borrow_mut().clear();
        self.inner.new_decision();
    }
}

/// One decision's worth of rejection sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidActionBatch {
    /// `S`, the size of the batch that produced the valid draws.
    pub samples: usize,
    /// The `l` valid draws, with multiplicity, in draw order.
    pub valid_actions: Vec<CategoricalAction>,
    pub chosen: CategoricalAction,
    /// Filled in by callers that estimate log-probabilities; empty otherwise.
    pub logprob_bounds_of_valid: Vec<LogProbBounds>,
    /// Batches drawn, including the accepted one.
    pub batches: usize,
    /// Oracle queries issued for this decision.
    pub queries: usize,
}

impl ValidActionBatch {
    pub fn valid_count(&self) -> usize {
        self.valid_actions.len()
    }

    /// Distinct valid actions with their draw counts, in first-seen order.
    pub fn distinct_valid(&self) -> Vec<(CategoricalAction, usize)> {
        let mut out: Vec<(CategoricalAction, usize)> = Vec::new();
        for a in &self.valid_actions {
            match out.iter_mut().find(|(b, _)| b == a) {
                Some((_, c)) => *c += 1,
                None => out.push((a.clone(), 1)),
            }
        }
        out
    }
}

/// Draw batches of `samples` actions until one holds a valid action, then
/// pick one valid draw uniformly.
pub fn rejection_sample<S, P, O>(
    policy: &P,
    obs: &[f64],
    state: &S,
    oracle: &O,
    samples: usize,
    max_retries: usize,
    rng: &mut dyn RngCore,
) -> Result<ValidActionBatch>
where
    S: fmt::Debug + ?Sized,
    P: Policy + ?Sized,
    O: ConstraintOracle<S> + ?Sized,
{
    if samples == 0 {
        return Err(Error::Contract("rejection sampling needs S >= 1".into()));
    }
    oracle.new_decision();
    let mut queries = 0;
    for batch in 1..=max_retries + 1 {
        let draws = policy.sample(obs, samples, rng)?;
        let mut valid = Vec::new();
        for a in draws {
            queries += 1;
            if oracle.is_valid(state, &a)? {
                valid.push(a);
            }
        }
        if !valid.is_empty() {
            let chosen = valid[rng.random_range(0..valid.len())].clone();
            return Ok(ValidActionBatch {
                samples,
                valid_actions: valid,
                chosen,
                logprob_bounds_of_valid: Vec::new(),
                batches: batch,
                queries,
            });
        }
    }
    Err(Error::Starvation {
        state: format!("{state:?}"),
        samples_drawn: samples * (max_retries + 1),
        batches: max_retries + 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionStatistics {
    /// `l / S`, an unbiased estimate of the valid mass `sum_{C(s)} pi`.
    pub valid_fraction: f64,
    /// `S / l^2`, the weight as printed alongside the summed valid-draw gradients.
    pub correction_weight: f64,
    /// `1 / l`, the weight that turns the sum into a mean over valid draws.
    pub ratio_weight: f64,
}

pub fn correction_statistics(batch: &ValidActionBatch) -> CorrectionStatistics {
    let s = batch.samples as f64;
    let l = batch.valid_count() as f64;
    CorrectionStatistics { valid_fraction: l / s, correction_weight: s / (l * l), ratio_weight: 1.0 / l }
}

/// How the summed valid-draw gradient is scaled in the correction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionWeighting {
    /// `1 / l`: the mean of `grad log pi` over valid draws, which estimates
    /// `grad sum_C pi / sum_C pi` without bias.
    #[default]
    RatioOfMeans,
    /// `S / l^2`.
    AsPrinted,
}

impl CorrectionWeighting {
    /// Weight of one valid draw, computed as `count / l` (or `S count / l^2`)
    /// so that a singleton valid set gives exactly 1.
    pub fn draw_weight(self, samples: usize, valid: usize, count: usize) -> f64 {
        let (s, l, c) = (samples as f64, valid as f64, count as f64);
        match self {
            CorrectionWeighting::RatioOfMeans => c / l,
            CorrectionWeighting::AsPrinted => s * c / (l * l),
        }
    }
}

/// Per-step loss whose gradient is
/// `-A (grad chosen - w sum_j grad valid_j)`; `advantage` and the weight are constants.
pub fn iar_surrogate_loss<'t>(
    advantage: f64,
    chosen_logprob: Var<'t>,
    valid_logprobs: &[Var<'t>],
    samples: usize,
    weighting: CorrectionWeighting,
) -> Result<Var<'t>> {
    if valid_logprobs.is_empty() {
        return Err(Error::Contract("correction term needs at least one valid draw".into()));
    }
    let w = weighting.draw_weight(samples, valid_logprobs.len(), 1);
    let mut sum = valid_logprobs[0];
    for v in &valid_logprobs[1..] {
        sum = sum.add(*v);
    }
    Ok(chosen_logprob.sub(sum.scale(w)).scale(-advantage))
}

/// Loss coefficients per distinct action for one decision, so that the actor
/// loss is `sum_k coef_k * log pi(a_k)`. The chosen action's own term and its
/// correction weight are merged into one coefficient, which is exactly zero
/// when the chosen action is the only valid draw.
pub fn actor_coefficients(
    batch: &ValidActionBatch,
    advantage: f64,
    weighting: CorrectionWeighting,
    correct: bool,
) -> Vec<(CategoricalAction, f64)> {
    if !correct {
        return vec![(batch.chosen.clone(), -advantage)];
    }
    let l = batch.valid_count();
    let mut out: Vec<(CategoricalAction, f64)> = batch
        .distinct_valid()
        .into_iter()
        .map(|(a, count)| {
            let w = weighting.draw_weight(batch.samples, l, count);
            let own = if a == batch.chosen { 1.0 } else { 0.0 };
            let coef = -advantage * (own - w);
            (a, coef)
        })
        .collect();
    if !out.iter().any(|(a, _)| *a == batch.chosen) {
        out.push((batch.chosen.clone(), -advantage));
    }
    out
}

/// `pi'(a|s) = pi(a|s) 1[a valid] / sum_{C(s)} pi`, by enumeration.
pub fn exact_effective_policy<S, P, O>(policy: &P, obs: &[f64], state: &S, oracle: &O) -> Result<Vec<f64>>
where
    S: ?Sized,
    P: Policy + ?Sized,
    O: ConstraintOracle<S> + ?Sized,
{
    let space = policy.action_space();
    let dist = policy
        .full_distribution(obs)?
        .ok_or_else(|| Error::Contract("effective policy needs an enumerable head".into()))?;
    let mut mask = Vec::with_capacity(dist.len());
    for a in space.all_actions() {
        mask.push(oracle.is_valid(state, &a)?);
    }
    crate::policy::apply_mask(&dist, &crate::policy::MaskVector::new(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionSpace;
    use crate::policy::{CategoricalPolicy, HeadConfig};
    use crate::tape::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A categorical head whose distribution is exactly `probs` at observation `[0]`.
    pub(crate) fn pinned(probs: &[f64], space: ActionSpace) -> CategoricalPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = HeadConfig { hidden: vec![], ..HeadConfig::default() };
        let mut pol = CategoricalPolicy::new(1, space, &cfg, &mut rng).unwrap();
        let w = pol.params().find("trunk.0.weight").unwrap();
        pol.params_mut().get_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let b = pol.output_bias();
        pol.params_mut().get_mut(b).data_mut().iter_mut().zip(probs).for_each(|(x, p)| *x = p.ln());
        pol
    }

    fn by_index(valid: &'static [usize]) -> FnOracle<impl Fn(&(), &CategoricalAction) -> bool> {
        FnOracle(move |_: &(), a: &CategoricalAction| valid.contains(&a.0[0]))
    }

    fn frequencies(space: ActionSpace, picks: impl Iterator<Item = CategoricalAction>, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; space.size() as usize];
        for a in picks {
            c[space.index_of(&a)] += 1.0;
        }
        c.iter().map(|x| x / n as f64).collect()
    }

    #[test]
    fn accept_all_reproduces_policy() {
        let space = ActionSpace::new(1, 4);
        let probs = [0.1, 0.2, 0.3, 0.4];
        let pol = pinned(&probs, space);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let picks = (0..n).map(|_| rejection_sample(&pol, &[0.0], &(), &AcceptAll, 8, 16, &mut rng).unwrap().chosen);
        let f = frequencies(space, picks, n);
        let tv: f64 = 0.5 * f.iter().zip(&probs).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn rejection_renormalizes() {
        let space = ActionSpace::new(1, 3);
        let pol = pinned(&[0.2, 0.3, 0.5], space);
        let oracle = by_index(&[0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let picks = (0..n).map(|_| rejection_sample(&pol, &[0.0], &(), &oracle, 4, 16, &mut rng).unwrap().chosen);
        let f = frequencies(space, picks, n);
        let sigma = (0.4f64 * 0.6 / n as f64).sqrt();
        assert!((f[0] - 0.4).abs() < 3.0 * sigma && (f[1] - 0.6).abs() < 3.0 * sigma && f[2] == 0.0, "{f:?}");
        let exact = exact_effective_policy(&pol, &[0.0], &(), &oracle).unwrap();
        assert!((exact[0] - 0.4).abs() < 1e-12 && (exact[1] - 0.6).abs() < 1e-12 && exact[2] == 0.0);
    }

    #[test]
    fn all_valid_effective_policy_is_policy() {
        let space = ActionSpace::new(1, 3);
        let pol = pinned(&[0.2, 0.3, 0.5], space);
        let exact = exact_effective_policy(&pol, &[0.0], &(), &AcceptAll).unwrap();
        for (a, b) in exact.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn valid_fraction_is_unbiased() {
        let space = ActionSpace::new(1, 4);
        let pol = pinned(&[0.1, 0.2, 0.3, 0.4], space);
        let oracle = by_index(&[0, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| correction_statistics(&rejection_sample(&pol, &[0.0], &(), &oracle, 16, 16, &mut rng).unwrap()).valid_fraction)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.4).abs() / 0.4 < 0.01, "{mean}");
    }

    #[test]
    fn distinct_selection_is_wrong() {
        // pi = (0.9, 0.1), both valid, S = 4. Picking uniformly among distinct
        // actions gives action 1 with probability
        // P(only 1) + P(both present) / 2 = 0.1^4 + (1 - 0.9^4 - 0.1^4) / 2.
        let space = ActionSpace::new(1, 2);
        let pol = pinned(&[0.9, 0.1], space);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let (mut with_mult, mut distinct) = (0usize, 0usize);
        for _ in 0..n {
            let b = rejection_sample(&pol, &[0.0], &(), &AcceptAll, 4, 0, &mut rng).unwrap();
            with_mult += usize::from(b.chosen.0[0] == 1);
            let d = b.distinct_valid();
            distinct += usize::from(d[rng.random_range(0..d.len())].0 .0[0] == 1);
        }
        let expected_distinct = 0.1f64.powi(4) + (1.0 - 0.9f64.powi(4) - 0.1f64.powi(4)) / 2.0;
        assert!((with_mult as f64 / n as f64 - 0.1).abs() < 0.005);
        assert!((distinct as f64 / n as f64 - expected_distinct).abs() < 0.01);
        assert!(expected_distinct > 0.15);
    }

    #[test]
    fn starvation_reports_draws() {
        let pol = pinned(&[0.5, 0.5], ActionSpace::new(1, 2));
        let never = FnOracle(|_: &u8, _: &CategoricalAction| false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        match rejection_sample(&pol, &[0.0], &7u8, &never, 8, 3, &mut rng) {
            Err(Error::Starvation { state, samples_drawn, batches }) => {
                assert_eq!((state.as_str(), samples_drawn, batches), ("7", 32, 4));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn executed_actions_are_always_valid() {
        let space = ActionSpace::new(2, 3);
        let probs: Vec<f64> = (1..=9).map(|i| i as f64 / 45.0).collect();
        let pol = pinned(&probs, space);
        let oracle = FnOracle(|s: &usize, a: &CategoricalAction| (a.0[0] + a.0[1]) % 3 != *s);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in 0..5000 {
            let s = t % 3;
            let b = rejection_sample(&pol, &[0.0], &s, &oracle, 6, 16, &mut rng).unwrap();
            assert!(oracle.is_valid(&s, &b.chosen).unwrap());
            assert!(b.valid_actions.iter().all(|a| oracle.is_valid(&s, a).unwrap()));
            assert!(b.valid_actions.contains(&b.chosen));
            assert!(b.valid_count() >= 1 && b.valid_count() <= b.samples);
        }
    }

    #[test]
    fn metered_oracle_counts_before_memo() {
        let pol = pinned(&[0.5, 0.5], ActionSpace::new(1, 2));
        let metered = MeteredOracle::new(AcceptAll);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = rejection_sample(&pol, &[0.0], &(), &metered, 64, 16, &mut rng).unwrap();
        assert_eq!(b.queries, 64);
        assert_eq!(metered.queries(), 64);
        assert!(metered.inner_calls() <= 2);
        rejection_sample(&pol, &[0.0], &(), &metered, 64, 16, &mut rng).unwrap();
        assert_eq!(metered.queries(), 128);
        assert!(metered.inner_calls() <= 4);
    }

    #[test]
    fn correction_statistics_examples() {
        let a = CategoricalAction(vec![0]);
        let mk = |s: usize, l: usize| ValidActionBatch {
            samples: s,
            valid_actions: vec![a.clone(); l],
            chosen: a.clone(),
            logprob_bounds_of_valid: vec![],
            batches: 1,
            queries: s,
        };
        let c = correction_statistics(&mk(10, 4));
        assert_eq!((c.valid_fraction, c.correction_weight, c.ratio_weight), (0.4, 0.625, 0.25));
        let c = correction_statistics(&mk(5, 5));
        assert_eq!(c.valid_fraction, 1.0);
        assert!((c.correction_weight - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_valid_chosen_draw_cancels() {
        let tape = Tape::new();
        let theta = tape.param(Tensor::row_vector(vec![0.3, -0.2]));
        let lp = theta.log_softmax_cols().slice_cols(1, 2);
        for weighting in [CorrectionWeighting::RatioOfMeans, CorrectionWeighting::AsPrinted] {
            let loss = iar_surrogate_loss(2.5, lp, &[lp], 1, weighting).unwrap();
            let g = tape.backward(loss.sum()).get_or_zeros(theta);
            assert!(g.data().iter().all(|&x| x == 0.0), "{g:?}");
        }
        assert!(iar_surrogate_loss(1.0, lp, &[], 1, CorrectionWeighting::RatioOfMeans).is_err());
    }

    #[test]
    fn singleton_valid_set_has_zero_coefficient() {
        for (s, l) in [(64, 1), (64, 3), (64, 49), (7, 7), (1000, 997)] {
            let a = CategoricalAction(vec![2, 1]);
            let batch = ValidActionBatch {
                samples: s,
                valid_actions: vec![a.clone(); l],
                chosen: a.clone(),
                logprob_bounds_of_valid: vec![],
                batches: 1,
                queries: s,
            };
            let coefs = actor_coefficients(&batch, -3.7, CorrectionWeighting::RatioOfMeans, true);
            assert_eq!(coefs, vec![(a, 0.0)]);
        }
    }

    #[test]
    fn coefficients_match_surrogate_gradient() {
        let space = ActionSpace::new(1, 4);
        let pol = pinned(&[0.1, 0.2, 0.3, 0.4], space);
        let oracle = by_index(&[1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for weighting in [CorrectionWeighting::RatioOfMeans, CorrectionWeighting::AsPrinted] {
            let b = rejection_sample(&pol, &[0.0], &(), &oracle, 9, 16, &mut rng).unwrap();
            let adv = 1.3;
            let tape = Tape::new();
            let theta = tape.param(Tensor::row_vector(vec![0.1, -0.4, 0.2, 0.7]));
            let lsm = theta.log_softmax_cols();
            let lp = |a: &CategoricalAction| lsm.slice_cols(a.0[0], a.0[0] + 1);
            let valid: Vec<_> = b.valid_actions.iter().map(lp).collect();
            let direct = iar_surrogate_loss(adv, lp(&b.chosen), &valid, b.samples, weighting).unwrap();
            let g1 = tape.backward(direct.sum()).get_or_zeros(theta);
            let coefs = actor_coefficients(&b, adv, weighting, true);
            let mut merged = tape.scalar(0.0);
            for (a, c) in &coefs {
                merged = merged.add(lp(a).scale(*c));
            }
            let g2 = tape.backward(merged.sum()).get_or_zeros(theta);
            for (x, y) in g1.data().iter().zip(g2.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correction_is_zero_mean_when_everything_is_valid() {
        // E[(1/l) sum_j grad log pi(a_j)] = grad sum_a pi = 0 when C(s) is everything
        let space = ActionSpace::new(1, 3);
        let probs = [0.2, 0.3, 0.5];
        let pol = pinned(&probs, space);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let b = rejection_sample(&pol, &[0.0], &(), &AcceptAll, 4, 0, &mut rng).unwrap();
            let mut g = [0.0; 3];
            for a in &b.valid_actions {
                for k in 0..3 {
                    // d log softmax_a / d theta_k
                    g[k] += (if k == a.0[0] { 1.0 } else { 0.0 } - probs[k]) / b.valid_count() as f64;
                }
            }
            for k in 0..3 {
                sum[k] += g[k];
                sq[k] += g[k] * g[k];
            }
        }
        for k in 0..3 {
            let mean = sum[k] / n as f64;
            let se = ((sq[k] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(mean.abs() < 3.0 * se + 1e-12, "coord {k}: {mean} vs se {se}");
        }
    }
}
