//! Contamination-robust temporal-difference critics.
//!
//! A critic fits state values against one-step targets in which the adversary
//! diverts a `delta` fraction of every transition onto the worst visited
//! state. The fit is a damped fixed-point iteration: each epoch freezes the
//! current model as the bootstrap target (including the worst-state value),
//! then takes stochastic gradient steps on the resulting weighted regression.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::mdp::UncertaintyConfig;
use crate::nn::{Adam, Mlp};
use crate::seed::{stream, stream_rng};

/// One-step bootstrap target under contaminated transitions.
pub fn robust_td_target(signal: f64, v_next: f64, v_min: f64, gamma: f64, delta: f64) -> f64 {
    signal + gamma * delta * v_min + gamma * (1.0 - delta) * v_next
}

/// Differentiable scalar-valued function approximator.
pub trait ValueModel: Clone + Send + Sync {
    fn input_len(&self) -> usize;
    fn value(&self, feat: &[f64]) -> f64;
    /// Parameter gradient of `value(feat)`, flat and matching `params()`.
    fn grad(&self, feat: &[f64]) -> Vec<f64>;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Multiply the model's output by `c` exactly (affine heads only).
    fn scale_output(&mut self, c: f64);
}

impl ValueModel for Mlp {
    fn input_len(&self) -> usize {
        self.input_len()
    }

    fn value(&self, feat: &[f64]) -> f64 {
        debug_assert_eq!(self.output_len(), 1, "value networks have a scalar head");
        self.forward(feat)[0]
    }

    fn grad(&self, feat: &[f64]) -> Vec<f64> {
        let trace = self.forward_trace(feat);
        self.backward(&trace, &[1.0])
    }

    fn params(&self) -> &[f64] {
        self.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.params_mut()
    }

    fn scale_output(&mut self, c: f64) {
        self.scale_output_layer(c);
    }
}

/// Linear value function. Over one-hot features this is an exact table, which
/// is what the tabular validation paths use.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearValue {
    weights: Vec<f64>,
}

impl LinearValue {
    pub fn new(input_len: usize) -> Self {
        LinearValue { weights: vec![0.0; input_len] }
    }
}

impl ValueModel for LinearValue {
    fn input_len(&self) -> usize {
        self.weights.len()
    }

    fn value(&self, feat: &[f64]) -> f64 {
        assert_eq!(feat.len(), self.weights.len(), "feature length mismatch");
        self.weights.iter().zip(feat).map(|(w, x)| w * x).sum()
    }

    fn grad(&self, feat: &[f64]) -> Vec<f64> {
        feat.to_vec()
    }

    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn scale_output(&mut self, c: f64) {
        for w in &mut self.weights {
            *w *= c;
        }
    }
}

/// One transition for critic fitting. `weight` scales the sample's share of
/// the regression loss; enumerated batches use exact visit probabilities,
/// sampled batches use 1.
#[derive(Debug, Clone)]
pub struct FitSample {
    pub feat: Vec<f64>,
    pub signal: f64,
    pub feat_next: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub minibatch: usize,
    /// Stop once the epoch loss changes by less than this relative amount.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_epochs: 2000, lr: 1e-3, minibatch: 64, rel_tol: 1e-10, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs: usize,
    pub loss: f64,
    pub v_min: f64,
    /// Index into the state pool; see [`RobustCritic::min_value`].
    pub argmin: usize,
}

/// Critic with a worst-state record.
///
/// The candidate pool for the worst state is every state appearing in the fit
/// batch: pool index `i < n` refers to `batch[i].feat` and pool index
/// `n + i` to `batch[i].feat_next`. Callers that need to resume the worst
/// state (for gradient estimation) keep their own snapshots in the same
/// order and translate the index back.
#[derive(Debug, Clone)]
pub struct RobustCritic<M> {
    model: M,
    uncertainty: UncertaintyConfig,
    min_record: Option<(f64, usize)>,
}

impl<M: ValueModel> RobustCritic<M> {
    pub fn new(model: M, uncertainty: UncertaintyConfig) -> Result<Self> {
        uncertainty.validate()?;
        Ok(RobustCritic { model, uncertainty, min_record: None })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn uncertainty(&self) -> &UncertaintyConfig {
        &self.uncertainty
    }

    pub fn value(&self, feat: &[f64]) -> f64 {
        self.model.value(feat)
    }

    /// Install a worst-state record directly, for pipelines whose value
    /// function is known analytically (exact tables in validation code).
    /// [`fit`](Self::fit) overwrites this.
    pub fn set_min_record(&mut self, v_min: f64, argmin: usize) {
        self.min_record = Some((v_min, argmin));
    }

    /// Lowest fitted value over the last batch's state pool, with its pool
    /// index. Errors until [`fit`](Self::fit) has run.
    pub fn min_value(&self) -> Result<(f64, usize)> {
        self.min_record.ok_or(Error::CriticNotFitted)
    }

    /// Fit the model to the robust one-step targets. Diverging runs (any
    /// non-finite loss or parameter) are restarted once from the entry
    /// parameters at half the step size before giving up.
    ///
    /// Internally the regression runs on value-scale-normalized targets: the
    /// signals are divided by a batch-derived bound on the value magnitude
    /// and the model's affine output is rescaled around the fit, so signals
    /// of any magnitude meet the optimizer at a comparable scale. Callers
    /// see raw-scale values throughout.
    pub fn fit(&mut self, batch: &[FitSample], cfg: &FitConfig) -> Result<FitReport> {
        if batch.is_empty() {
            return Err(Error::Config("critic fit needs a nonempty batch".into()));
        }
        for (i, s) in batch.iter().enumerate() {
            if s.feat.len() != self.model.input_len() || s.feat_next.len() != self.model.input_len()
            {
                return Err(Error::Config(format!("fit sample {i} has wrong feature length")));
            }
            if !(s.weight.is_finite() && s.weight > 0.0) || !s.signal.is_finite() {
                return Err(Error::Config(format!("fit sample {i} has bad weight or signal")));
            }
        }
        // |v| <= max|signal| / (1 - gamma) for any discounted return.
        let max_signal = batch.iter().map(|s| s.signal.abs()).fold(0.0, f64::max);
        let scale = (max_signal / (1.0 - self.uncertainty.gamma)).max(1.0);
        let entry_params = self.model.params().to_vec();
        self.model.scale_output(1.0 / scale);
        let mut attempt_cfg = cfg.clone();
        let normalized = match self.fit_once(batch, scale, &attempt_cfg) {
            Ok(report) => Ok(report),
            Err(Error::CriticDiverged(first)) => {
                self.model.params_mut().copy_from_slice(&entry_params);
                self.model.scale_output(1.0 / scale);
                attempt_cfg.lr = cfg.lr / 2.0;
                self.fit_once(batch, scale, &attempt_cfg).map_err(|e| match e {
                    Error::CriticDiverged(second) => Error::CriticDiverged(format!(
                        "{first}; retry at lr {} also diverged: {second}",
                        attempt_cfg.lr
                    )),
                    other => other,
                })
            }
            Err(e) => Err(e),
        };
        match normalized {
            Ok(mut report) => {
                self.model.scale_output(scale);
                report.v_min *= scale;
                report.loss *= scale * scale;
                if let Some(rec) = &mut self.min_record {
                    rec.0 *= scale;
                }
                Ok(report)
            }
            Err(e) => {
                // A failed fit leaves the model at its entry state.
                self.model.params_mut().copy_from_slice(&entry_params);
                Err(e)
            }
        }
    }

    fn fit_once(&mut self, batch: &[FitSample], scale: f64, cfg: &FitConfig) -> Result<FitReport> {
        let n = batch.len();
        let weight_total: f64 = batch.iter().map(|s| s.weight).sum();
        let mut opt = Adam::new(self.model.params().len(), cfg.lr);
        let mut rng = stream_rng(cfg.seed, stream::CRITIC_FIT, 0);
        let mut order: Vec<usize> = (0..n).collect();
        let mut prev_loss = f64::INFINITY;
        let mut epochs = 0;
        let mut loss = 0.0;
        for epoch in 0..cfg.max_epochs {
            epochs = epoch + 1;
            // Freeze the bootstrap: targets and the worst pooled state come
            // from the model as of this epoch's start.
            let target_model = self.model.clone();
            let (v_min, _) = pool_min(&target_model, batch);
            let targets: Vec<f64> = batch
                .iter()
                .map(|s| {
                    robust_td_target(
                        s.signal / scale,
                        target_model.value(&s.feat_next),
                        v_min,
                        self.uncertainty.gamma,
                        self.uncertainty.delta,
                    )
                })
                .collect();
            order.shuffle(&mut rng);
            loss = 0.0;
            for chunk in order.chunks(cfg.minibatch.max(1)) {
                let chunk_weight: f64 = chunk.iter().map(|&i| batch[i].weight).sum();
                let mut grad = vec![0.0; self.model.params().len()];
                for &i in chunk {
                    let err = self.model.value(&batch[i].feat) - targets[i];
                    loss += batch[i].weight * err * err;
                    let scale = 2.0 * batch[i].weight * err / chunk_weight;
                    for (g, d) in grad.iter_mut().zip(self.model.grad(&batch[i].feat)) {
                        *g += scale * d;
                    }
                }
                opt.step(self.model.params_mut(), &grad);
            }
            loss /= weight_total;
            if !loss.is_finite() || self.model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::CriticDiverged(format!(
                    "non-finite loss or parameters at epoch {epoch} (lr {})",
                    cfg.lr
                )));
            }
            if (prev_loss - loss).abs() <= cfg.rel_tol * (1.0 + loss.abs()) {
                break;
            }
            prev_loss = loss;
        }
        let (v_min, argmin) = pool_min(&self.model, batch);
        self.min_record = Some((v_min, argmin));
        Ok(FitReport { epochs, loss, v_min, argmin })
    }
}

/// Minimum model value over the batch's state pool (feats, then feat_nexts).
fn pool_min<M: ValueModel>(model: &M, batch: &[FitSample]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, s) in batch.iter().enumerate() {
        let v = model.value(&s.feat);
        if v < best.0 {
            best = (v, i);
        }
    }
    for (i, s) in batch.iter().enumerate() {
        let v = model.value(&s.feat_next);
        if v < best.0 {
            best = (v, batch.len() + i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream, stream_rng};
    use crate::tabular::{SoftmaxPolicy, TabularMdp};

    #[test]
    fn td_target_mixes_worst_state_mass() {
        let t = robust_td_target(1.0, 10.0, -4.0, 0.9, 0.1);
        assert!((t - (1.0 + 0.9 * 0.1 * -4.0 + 0.9 * 0.9 * 10.0)).abs() < 1e-15);
        // delta = 0 reduces to the plain bootstrap.
        let plain = robust_td_target(1.0, 10.0, -400.0, 0.9, 0.0);
        assert!((plain - (1.0 + 0.9 * 10.0)).abs() < 1e-15);
    }

    fn one_hot(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    /// Enumerated batch: one sample per (s, a, s') triple with its exact
    /// visit probability under a uniform state draw.
    fn enumerate_batch(mdp: &TabularMdp, pol: &SoftmaxPolicy) -> Vec<FitSample> {
        let ns = mdp.n_states();
        let mut batch = Vec::new();
        for s in 0..ns {
            let probs = pol.probs(s);
            for a in 0..mdp.n_actions() {
                for s2 in 0..ns {
                    let w = probs[a] * mdp.transition[s][a][s2];
                    if w > 0.0 {
                        batch.push(FitSample {
                            feat: one_hot(s, ns),
                            signal: mdp.reward[s][a],
                            feat_next: one_hot(s2, ns),
                            weight: w,
                        });
                    }
                }
            }
        }
        batch
    }

    /// Fixed point computed by a loop written out here, independent of the
    /// crate's tabular helpers.
    fn local_fixed_point(mdp: &TabularMdp, pol: &SoftmaxPolicy, gamma: f64, delta: f64) -> Vec<f64> {
        let ns = mdp.n_states();
        let mut v = vec![0.0; ns];
        for _ in 0..100_000 {
            let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                let probs = pol.probs(s);
                for a in 0..mdp.n_actions() {
                    let pv: f64 =
                        mdp.transition[s][a].iter().zip(&v).map(|(p, vn)| p * vn).sum();
                    next[s] += probs[a]
                        * (mdp.reward[s][a] + gamma * delta * vmin + gamma * (1.0 - delta) * pv);
                }
            }
            let diff =
                next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if diff < 1e-13 {
                break;
            }
        }
        v
    }

    #[test]
    fn tabular_fit_reaches_the_robust_fixed_point() {
        let mut rng = stream_rng(21, stream::INIT_PARAMS, 0);
        let mdp = TabularMdp::random(3, 2, &mut rng);
        let pol = SoftmaxPolicy::random(3, 2, &mut rng);
        let (gamma, delta) = (0.9, 0.15);
        let expected = local_fixed_point(&mdp, &pol, gamma, delta);

        let unc = UncertaintyConfig { gamma, delta };
        let mut critic = RobustCritic::new(LinearValue::new(3), unc).unwrap();
        let batch = enumerate_batch(&mdp, &pol);
        let cfg = FitConfig {
            max_epochs: 6000,
            lr: 0.05,
            minibatch: batch.len(),
            rel_tol: 0.0,
            seed: 77,
        };
        critic.fit(&batch, &cfg).unwrap();
        for s in 0..3 {
            let got = critic.value(&one_hot(s, 3));
            assert!(
                (got - expected[s]).abs() < 1e-3,
                "state {s}: fitted {got}, fixed point {}",
                expected[s]
            );
        }

        // The worst-state record points at the true argmin.
        let (v_min, arg) = critic.min_value().unwrap();
        let true_min = expected.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((v_min - true_min).abs() < 1e-3, "min {v_min} vs {true_min}");
        let state_of = |pool: usize| {
            let i = pool % batch.len();
            let feat = if pool < batch.len() { &batch[i].feat } else { &batch[i].feat_next };
            feat.iter().position(|&x| x == 1.0).unwrap()
        };
        let true_arg = expected
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(state_of(arg), true_arg, "argmin record points at the wrong state");
    }

    #[test]
    fn plain_fit_matches_linear_solve_when_delta_is_zero() {
        use nalgebra::{DMatrix, DVector};
        let mut rng = stream_rng(22, stream::INIT_PARAMS, 0);
        let mdp = TabularMdp::random(4, 2, &mut rng);
        let pol = SoftmaxPolicy::random(4, 2, &mut rng);
        let gamma = 0.9;

        let ns = 4;
        let mut p_pi = DMatrix::zeros(ns, ns);
        let mut r_pi = DVector::zeros(ns);
        for s in 0..ns {
            let probs = pol.probs(s);
            for a in 0..2 {
                r_pi[s] += probs[a] * mdp.reward[s][a];
                for s2 in 0..ns {
                    p_pi[(s, s2)] += probs[a] * mdp.transition[s][a][s2];
                }
            }
        }
        let lhs: DMatrix<f64> = DMatrix::identity(ns, ns) - gamma * p_pi;
        let expected = lhs.lu().solve(&r_pi).expect("nonsingular");

        let unc = UncertaintyConfig { gamma, delta: 0.0 };
        let mut critic = RobustCritic::new(LinearValue::new(ns), unc).unwrap();
        let batch = enumerate_batch(&mdp, &pol);
        let cfg = FitConfig {
            max_epochs: 6000,
            lr: 0.05,
            minibatch: batch.len(),
            rel_tol: 0.0,
            seed: 5,
        };
        critic.fit(&batch, &cfg).unwrap();
        for s in 0..ns {
            let got = critic.value(&one_hot(s, ns));
            assert!(
                (got - expected[s]).abs() < 1e-3,
                "state {s}: fitted {got}, solve {}",
                expected[s]
            );
        }
    }

    #[test]
    fn divergent_fit_reports_after_halved_retry() {
        // A weight of 1e200 against a feature of 1e200 overflows the value
        // and the squared error in the very first epoch, so both the fit and
        // its halved-step retry must report divergence.
        let unc = UncertaintyConfig { gamma: 0.9, delta: 0.0 };
        let mut model = LinearValue::new(1);
        model.params_mut()[0] = 1e200;
        let mut critic = RobustCritic::new(model, unc).unwrap();
        let batch = vec![FitSample {
            feat: vec![1e200],
            signal: 1.0,
            feat_next: vec![1e200],
            weight: 1.0,
        }];
        let cfg = FitConfig { max_epochs: 50, lr: 1.0, minibatch: 1, rel_tol: 0.0, seed: 0 };
        let err = critic.fit(&batch, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("retry at lr 0.5"), "expected retry trace, got: {msg}");
        // Entry parameters were restored before the retry.
        assert_eq!(critic.model().params()[0], 1e200, "entry parameters not restored");
    }

    #[test]
    fn unfitted_critic_has_no_min_record() {
        let unc = UncertaintyConfig { gamma: 0.9, delta: 0.1 };
        let critic = RobustCritic::new(LinearValue::new(2), unc).unwrap();
        assert!(matches!(critic.min_value(), Err(Error::CriticNotFitted)));
    }

    #[test]
    fn mlp_value_model_gradient_matches_finite_differences() {
        let mut rng = stream_rng(23, stream::INIT_PARAMS, 0);
        let mlp = Mlp::init_uniform(vec![4, 6, 1], &mut rng)
            .with_activation(crate::nn::Activation::Identity);
        let feat = [0.3, -0.7, 0.1, 0.9];
        let analytic = ValueModel::grad(&mlp, &feat);
        let mut probe = mlp.clone();
        for (i, a) in analytic.iter().enumerate() {
            let orig = ValueModel::params(&probe)[i];
            probe.params_mut()[i] = orig + 1e-6;
            let up = ValueModel::value(&probe, &feat);
            probe.params_mut()[i] = orig - 1e-6;
            let dn = ValueModel::value(&probe, &feat);
            probe.params_mut()[i] = orig;
            let n = (up - dn) / 2e-6;
            assert!((a - n).abs() < 1e-6, "param {i}: analytic {a}, numeric {n}");
        }
    }
}
