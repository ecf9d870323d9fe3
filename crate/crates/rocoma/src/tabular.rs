//! Small dense decision processes with softmax policies.
//!
//! This is the analysis substrate for the gradient machinery: every quantity
//! here is computed by explicit sums (fixed-point iteration, matrix series,
//! exact least squares), so the sampled estimators elsewhere in the crate can
//! be validated against exact counterparts on the same model.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense MDP: `transition[s][a][s']` row-stochastic, `reward[s][a]` bounded.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn n_actions(&self) -> usize {
        self.reward.first().map_or(0, Vec::len)
    }

    /// Random MDP with uniform-Dirichlet transition rows and rewards in
    /// [-1, 1]. Every transition probability is strictly positive.
    pub fn random(n_states: usize, n_actions: usize, rng: &mut ChaCha8Rng) -> Self {
        let transition = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        // Exponential spacings normalize to a uniform simplex
                        // point with no zero entries.
                        let draws: Vec<f64> =
                            (0..n_states).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
                        let total: f64 = draws.iter().sum();
                        draws.iter().map(|d| d / total).collect()
                    })
                    .collect()
            })
            .collect();
        let reward = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        TabularMdp { transition, reward }
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states(), self.n_actions());
        if ns == 0 || na == 0 {
            return Err(Error::Config("tabular MDP needs states and actions".into()));
        }
        for s in 0..ns {
            if self.transition[s].len() != na || self.reward[s].len() != na {
                return Err(Error::Config(format!("state {s} has inconsistent action count")));
            }
            for a in 0..na {
                let row = &self.transition[s][a];
                if row.len() != ns {
                    return Err(Error::Config(format!("transition row ({s},{a}) has bad length")));
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) || (sum - 1.0).abs() > 1e-9
                {
                    return Err(Error::Config(format!(
                        "transition row ({s},{a}) is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Tabular softmax policy, one logit per (state, action).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    pub logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        SoftmaxPolicy { n_states, n_actions, logits: vec![0.0; n_states * n_actions] }
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::new(n_states, n_actions);
        for l in &mut p.logits {
            *l = rng.random_range(-0.5..0.5);
        }
        p
    }

    pub fn param_len(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        let row = &self.logits[s * self.n_actions..(s + 1) * self.n_actions];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }

    /// Score `d log pi(a|s) / d logits`, dense over all parameters.
    pub fn score(&self, s: usize, a: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.logits.len()];
        let probs = self.probs(s);
        for a2 in 0..self.n_actions {
            g[s * self.n_actions + a2] = if a2 == a { 1.0 - probs[a2] } else { -probs[a2] };
        }
        g
    }
}

/// One application of the robust expectation operator: the adversary moves
/// `delta` of every transition's mass onto the lowest-value state.
pub fn robust_bellman(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    delta: f64,
    v: &[f64],
) -> Vec<f64> {
    let v_min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    (0..mdp.n_states())
        .map(|s| {
            let probs = policy.probs(s);
            (0..mdp.n_actions())
                .map(|a| {
                    let pv: f64 =
                        mdp.transition[s][a].iter().zip(v).map(|(p, vn)| p * vn).sum();
                    probs[a] * (mdp.reward[s][a] + gamma * delta * v_min + gamma * (1.0 - delta) * pv)
                })
                .sum()
        })
        .collect()
}

/// Robust state values: the fixed point of [`robust_bellman`], found by
/// iteration (the operator is a gamma-contraction in the sup norm).
pub fn robust_value(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    delta: f64,
    tol: f64,
) -> Vec<f64> {
    let mut v = vec![0.0; mdp.n_states()];
    for _ in 0..200_000 {
        let next = robust_bellman(mdp, policy, gamma, delta, &v);
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff <= tol {
            break;
        }
    }
    v
}

/// Unnormalized discounted visitation weights from `start`:
/// `sum_k (gamma (1 - delta))^k P(s_k = s | s_0 = start)`, summed until the
/// remaining tail is below `tol`.
pub fn visitation_series(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    delta: f64,
    start: usize,
    tol: f64,
) -> Vec<f64> {
    let ns = mdp.n_states();
    let rho = gamma * (1.0 - delta);
    let mut dist = vec![0.0; ns];
    dist[start] = 1.0;
    let mut out = vec![0.0; ns];
    let mut scale = 1.0;
    // Remaining mass of the geometric tail is scale * rho / (1 - rho).
    while scale > tol * (1.0 - rho) / rho.max(1e-300) {
        for (o, d) in out.iter_mut().zip(&dist) {
            *o += scale * d;
        }
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if dist[s] == 0.0 {
                continue;
            }
            let probs = policy.probs(s);
            for a in 0..mdp.n_actions() {
                let w = dist[s] * probs[a];
                for (nx, p) in next.iter_mut().zip(&mdp.transition[s][a]) {
                    *nx += w * p;
                }
            }
        }
        dist = next;
        scale *= rho;
        if rho == 0.0 {
            break;
        }
    }
    out
}

/// Exact ingredients of the natural-gradient regression at one start state.
struct ExactParts {
    /// `sum_s d(s) sum_a pi psi phi`, the score-weighted residual moment.
    moment: Vec<f64>,
    /// Fisher-like normal matrix `sum_s d(s) sum_a pi psi psi^T`.
    fisher: DMatrix<f64>,
}

fn exact_parts(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    delta: f64,
    start: usize,
    v: &[f64],
    with_fisher: bool,
) -> ExactParts {
    let np = policy.param_len();
    let v_min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let d = visitation_series(mdp, policy, gamma, delta, start, 1e-14);
    let mut moment = vec![0.0; np];
    let mut fisher = DMatrix::zeros(if with_fisher { np } else { 0 }, if with_fisher { np } else { 0 });
    for s in 0..mdp.n_states() {
        if d[s] == 0.0 {
            continue;
        }
        let probs = policy.probs(s);
        for a in 0..mdp.n_actions() {
            let pv: f64 = mdp.transition[s][a].iter().zip(v).map(|(p, vn)| p * vn).sum();
            let phi = mdp.reward[s][a] + gamma * delta * v_min + gamma * (1.0 - delta) * pv - v[s];
            let w = d[s] * probs[a];
            let psi = policy.score(s, a);
            for (m, p) in moment.iter_mut().zip(&psi) {
                *m += w * phi * p;
            }
            if with_fisher {
                for i in 0..np {
                    if psi[i] == 0.0 {
                        continue;
                    }
                    for j in 0..np {
                        fisher[(i, j)] += w * psi[i] * psi[j];
                    }
                }
            }
        }
    }
    ExactParts { moment, fisher }
}

/// Exact robust natural gradient at `start`, solving the score regression in
/// closed form: the minimum-norm solution of `F g = m + b`, where `m` is the
/// visitation-weighted score moment of the robust one-step residual and `b`
/// the worst-state bias term. The bias enters through its score projection,
/// which the pseudo-inverse absorbs exactly.
pub fn exact_rnpg(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    delta: f64,
    start: usize,
) -> Result<Vec<f64>> {
    mdp.validate()?;
    let v = robust_value(mdp, policy, gamma, delta, 1e-14);
    let parts = exact_parts(mdp, policy, gamma, delta, start, &v, true);
    let mut rhs = DVector::from_vec(parts.moment);
    let kappa = gamma * delta / (1.0 - gamma + gamma * delta);
    if kappa > 0.0 {
        // Danskin direction at the worst state: the self-visitation recursion
        // closes to m(s*) / (1 - kappa).
        let s_min = argmin(&v);
        let bias = exact_parts(mdp, policy, gamma, delta, s_min, &v, false);
        let scale = kappa / (1.0 - kappa);
        for (r, b) in rhs.iter_mut().zip(&bias.moment) {
            *r += scale * b;
        }
    }
    let pinv = parts
        .fisher
        .clone()
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Config(format!("fisher pseudo-inverse failed: {e}")))?;
    Ok((pinv * rhs).iter().cloned().collect())
}

/// Single-agent sampling world over a [`TabularMdp`], for validating the
/// sampled gradient pipeline against the exact quantities above. States are
/// exposed to critics as one-hot features.
#[derive(Debug, Clone)]
pub struct TabularWorld {
    mdp: TabularMdp,
    policy: SoftmaxPolicy,
    state: usize,
    start: usize,
}

impl TabularWorld {
    /// World whose start distribution is a point mass at `start`, matching
    /// the per-start-state exact gradients.
    pub fn new(mdp: TabularMdp, policy: SoftmaxPolicy, start: usize) -> Self {
        assert!(start < mdp.n_states(), "start state out of range");
        TabularWorld { mdp, policy, state: start, start }
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl crate::rnpg::World for TabularWorld {
    fn n_agents(&self) -> usize {
        1
    }

    fn param_len(&self) -> usize {
        self.policy.param_len()
    }

    fn features(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.mdp.n_states()];
        f[self.state] = 1.0;
        f
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) {
        self.state = self.start;
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> crate::rnpg::WorldStep {
        let a = sample_categorical(&self.policy.probs(self.state), rng);
        let scores = vec![self.policy.score(self.state, a)];
        let reward = self.mdp.reward[self.state][a];
        self.state = sample_categorical(&self.mdp.transition[self.state][a], rng);
        crate::rnpg::WorldStep { reward, cost: 0.0, scores }
    }
}

/// Index of the smallest value, lowest index on ties.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}
