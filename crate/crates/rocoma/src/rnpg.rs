//! Sampled robust natural-gradient estimation.
//!
//! The direction is the minimizer of a least-squares regression of one-step
//! robust residuals onto policy scores, which this module approximates by
//! sampling: draw start states, roll each to a geometrically distributed
//! depth so the landing states follow the discounted robust visitation
//! weights, branch one-step transitions there, and run projected SGD on the
//! per-branch regression with iterate averaging. Under contamination the
//! worst state contributes an extra term, estimated by the same pipeline
//! pinned to start at the critic's lowest-valued state.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;

use crate::critic::{robust_td_target, RobustCritic, ValueModel};
use crate::error::{Error, Result};
use crate::seed::{stream, stream_rng};

/// Which scalar signal the estimate differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Reward,
    Cost,
}

/// One policy step of an environment the estimator can drive.
///
/// `scores` holds one vector per agent: the gradient of that agent's log
/// action density with respect to the shared policy parameters. The joint
/// score is their sum.
#[derive(Debug, Clone)]
pub struct WorldStep {
    pub reward: f64,
    pub cost: f64,
    pub scores: Vec<Vec<f64>>,
}

/// Environment + policy bundle the gradient estimator samples from. Cloning
/// must snapshot the full stochastic state so branches can be replayed from
/// a common root.
pub trait World: Clone + Send + Sync {
    fn n_agents(&self) -> usize;
    /// Shared policy parameter count; every score vector has this length.
    fn param_len(&self) -> usize;
    /// Critic features of the current state.
    fn features(&self) -> Vec<f64>;
    /// Draw a fresh start state from the initial distribution.
    fn reset(&mut self, rng: &mut ChaCha8Rng);
    /// Sample a joint action from the policy and advance one step.
    fn step(&mut self, rng: &mut ChaCha8Rng) -> WorldStep;
    /// Advance one step when the caller does not need scores. Must consume
    /// randomness exactly like [`World::step`]; implementors override it to
    /// skip the score computation.
    fn advance(&mut self, rng: &mut ChaCha8Rng) {
        self.step(rng);
    }
}

/// Depth of one sampling excursion: geometric on {1, 2, ...} with success
/// probability `1 - gamma + gamma*delta`, so landing on the `(T-1)`-step
/// state weights states by the discounted robust visitation series.
pub fn sample_horizon(gamma: f64, delta: f64, rng: &mut ChaCha8Rng) -> u64 {
    let q = 1.0 - gamma + gamma * delta;
    let geo = Geometric::new(q).expect("horizon success probability must lie in (0, 1]");
    geo.sample(rng) + 1
}

/// One-step robust residual paired with the worst-state correction.
///
/// `phi` is the sampled regression target. `b` is zero at this level: the
/// correction is a whole-pipeline quantity (the pinned-start estimate inside
/// [`estimate_rnpg`]), not a per-transition one, and it vanishes exactly
/// when `delta` is zero because the pinned stream never runs.
#[derive(Debug, Clone)]
pub struct TdResidualTerms {
    pub phi: f64,
    pub b: Vec<f64>,
}

/// Robust TD residual of one transition under a fitted critic.
pub fn residual<V: ValueModel>(
    feat: &[f64],
    signal: f64,
    feat_next: &[f64],
    critic: &RobustCritic<V>,
    param_len: usize,
) -> Result<TdResidualTerms> {
    let (v_min, _) = critic.min_value()?;
    let unc = critic.uncertainty();
    let target = robust_td_target(signal, critic.value(feat_next), v_min, unc.gamma, unc.delta);
    Ok(TdResidualTerms { phi: target - critic.value(feat), b: vec![0.0; param_len] })
}

/// One projected SGD step on the score regression
/// `L(g) = sum_d (g . scores[d] - targets[d])^2 / D`, clipping the result to
/// the l2 ball of the given radius.
pub fn sgd_step(
    g: &[f64],
    scores: &[&[f64]],
    targets: &[f64],
    zeta: f64,
    radius: f64,
) -> Vec<f64> {
    assert_eq!(scores.len(), targets.len(), "one target per score vector");
    assert!(!scores.is_empty(), "sgd step needs at least one branch");
    let d = scores.len() as f64;
    let mut out = g.to_vec();
    for (psi, &t) in scores.iter().zip(targets) {
        let err: f64 = g.iter().zip(*psi).map(|(gi, pi)| gi * pi).sum::<f64>() - t;
        let coeff = zeta * 2.0 * err / d;
        for (o, pi) in out.iter_mut().zip(*psi) {
            *o -= coeff * pi;
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > radius {
        let scale = radius / norm;
        for o in &mut out {
            *o *= scale;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct EstimateConfig {
    pub objective: Objective,
    /// Outer start-state samples (M).
    pub m_outer: usize,
    /// Projected SGD steps per agent (W).
    pub w_steps: usize,
    /// One-step branches per landing state (D).
    pub d_branches: usize,
    /// Inner SGD step size.
    pub zeta: f64,
    /// l2 projection radius.
    pub radius: f64,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            objective: Objective::Reward,
            m_outer: 16,
            w_steps: 500,
            d_branches: 8,
            zeta: 0.1,
            radius: 100.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub g_tilde: Vec<f64>,
    pub objective: Objective,
    pub m_outer: usize,
    pub w_steps: usize,
    pub d_branches: usize,
}

/// Estimate the robust natural gradient of the chosen objective's value at
/// the start distribution.
///
/// `world` supplies fresh starts via [`World::reset`]; `pinned`, required
/// whenever `delta > 0`, is a snapshot sitting at the critic's lowest-valued
/// state and seeds the worst-state correction stream (scaled by
/// `kappa / (1 - kappa)`, the closed form of the correction's
/// self-recursion). Outer samples run in parallel; per-sample generators are
/// derived from the seed alone, and the reduction is ordered, so results are
/// reproducible regardless of thread schedule.
pub fn estimate_rnpg<W: World, V: ValueModel>(
    world: &W,
    pinned: Option<&W>,
    critic: &RobustCritic<V>,
    cfg: &EstimateConfig,
) -> Result<GradEstimate> {
    critic.uncertainty().validate()?;
    if cfg.m_outer == 0 || cfg.w_steps == 0 || cfg.d_branches == 0 {
        return Err(Error::Config("estimate needs m_outer, w_steps, d_branches >= 1".into()));
    }
    let kappa = critic.uncertainty().kappa();
    let mut g = stream_estimate(world, true, critic, cfg, stream::RNPG_OUTER)?;
    if kappa > 0.0 {
        let pinned = pinned.ok_or_else(|| {
            Error::Config("contaminated estimate needs a worst-state snapshot".into())
        })?;
        let bias = stream_estimate(pinned, false, critic, cfg, stream::RNPG_BIAS)?;
        let scale = kappa / (1.0 - kappa);
        for (gi, bi) in g.iter_mut().zip(&bias) {
            *gi += scale * bi;
        }
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("gradient estimate has non-finite entries".into()));
    }
    Ok(GradEstimate {
        g_tilde: g,
        objective: cfg.objective,
        m_outer: cfg.m_outer,
        w_steps: cfg.w_steps,
        d_branches: cfg.d_branches,
    })
}

/// One sampling stream: M excursions from (fresh or pinned) starts, averaged
/// over SGD iterates, agents, and excursions.
fn stream_estimate<W: World, V: ValueModel>(
    proto: &W,
    fresh_starts: bool,
    critic: &RobustCritic<V>,
    cfg: &EstimateConfig,
    tag: u64,
) -> Result<Vec<f64>> {
    let (v_min, _) = critic.min_value()?;
    let unc = *critic.uncertainty();
    let p = proto.param_len();
    let per_sample: Vec<Vec<f64>> = (0..cfg.m_outer)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(cfg.seed, tag, j as u64);
            let mut w = proto.clone();
            if fresh_starts {
                w.reset(&mut rng);
            }
            let t = sample_horizon(unc.gamma, unc.delta, &mut rng);
            for _ in 0..t - 1 {
                w.advance(&mut rng);
            }
            let v_here = critic.value(&w.features());
            let mut branch_scores = Vec::with_capacity(cfg.d_branches);
            let mut targets = Vec::with_capacity(cfg.d_branches);
            for _ in 0..cfg.d_branches {
                let mut b = w.clone();
                let ws = b.step(&mut rng);
                let signal = match cfg.objective {
                    Objective::Reward => ws.reward,
                    Objective::Cost => ws.cost,
                };
                let target = robust_td_target(
                    signal,
                    critic.value(&b.features()),
                    v_min,
                    unc.gamma,
                    unc.delta,
                ) - v_here;
                branch_scores.push(ws.scores);
                targets.push(target);
            }
            // Per-agent regression solves, averaged over SGD iterates then
            // over agents.
            let n = w.n_agents() as f64;
            let mut acc = vec![0.0; p];
            for agent in 0..w.n_agents() {
                let psis: Vec<&[f64]> =
                    branch_scores.iter().map(|s| s[agent].as_slice()).collect();
                let mut g = vec![0.0; p];
                let mut sum = vec![0.0; p];
                for _ in 0..cfg.w_steps {
                    g = sgd_step(&g, &psis, &targets, cfg.zeta, cfg.radius);
                    for (s, gi) in sum.iter_mut().zip(&g) {
                        *s += gi;
                    }
                }
                let scale = 1.0 / (cfg.w_steps as f64 * n);
                for (a, s) in acc.iter_mut().zip(&sum) {
                    *a += s * scale;
                }
            }
            acc
        })
        .collect();
    // Ordered reduction keeps the result independent of thread scheduling.
    let mut out = vec![0.0; p];
    for sample in &per_sample {
        for (o, s) in out.iter_mut().zip(sample) {
            *o += s;
        }
    }
    let inv_m = 1.0 / cfg.m_outer as f64;
    for o in &mut out {
        *o *= inv_m;
    }
    Ok(out)
}
