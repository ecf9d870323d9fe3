//! Outer training loop: per iteration it rolls out a batch of episodes,
//! fits the robust critics, estimates the natural gradients of the reward
//! and fairness objectives, ascends the Lagrangian, and takes a projected
//! descent step on the fairness multiplier.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critic::{FitConfig, FitSample, RobustCritic};
use crate::error::{Error, Result};
use crate::mdp::{CostWeights, Policy, UncertaintyConfig};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::encode::{encode_joint, joint_encoding_len, EncodeNorm};
use crate::nn::mlp::{Activation, Mlp};
use crate::nn::policy::DirichletPolicy;
use crate::rnpg::{estimate_rnpg, EstimateConfig, Objective, World, WorldStep};
use crate::seed::{derive_seed, stream, stream_rng};
use crate::sim::{PerturbConfig, Sim, SimConfig};

/// Training hyperparameters. `Default` matches the deployment-scale run;
/// tests and quick experiments shrink the budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Outer iterations; each consumes `m_rollouts` episodes.
    pub iterations: u32,
    /// Policy ascent step size.
    pub alpha: f64,
    /// Multiplier descent step size.
    pub beta: f64,
    /// Discount factor.
    pub gamma: f64,
    /// Contamination level the critics and estimators defend against.
    pub delta: f64,
    /// Reward and fairness weights passed to the simulator.
    pub weights: CostWeights,
    /// Discounted fairness floor; `None` uses `d_step / (1 - gamma)`.
    pub discounted_floor: Option<f64>,
    /// Episodes rolled out (and outer estimator samples) per iteration.
    pub m_rollouts: usize,
    /// Inner regression steps per agent.
    pub w_steps: usize,
    /// One-step branches per landing state.
    pub d_branches: usize,
    /// Inner regression step size.
    pub zeta: f64,
    /// l2 projection radius of the inner regression.
    pub radius: f64,
    /// Hidden layer widths of both critics.
    pub critic_hidden: Vec<usize>,
    pub critic_lr: f64,
    pub critic_epochs: usize,
    pub critic_minibatch: usize,
    /// Relative epoch-loss change below which a critic fit stops early.
    pub critic_rel_tol: f64,
    /// Initial fairness multiplier.
    pub lambda0: f64,
    /// Keep the multiplier at `lambda0` and skip the fairness critic and
    /// multiplier update entirely.
    pub freeze_lambda: bool,
    /// Fold the per-step fairness cost into the reward signal (weight 1).
    pub merge_cost_into_reward: bool,
    /// Step the policy along `g_r - lambda g_c` instead of the default
    /// `g_r + lambda g_c`.
    pub subtract_cost_gradient: bool,
    /// Write a checkpoint every this many iterations; 0 checkpoints only at
    /// the end of the run.
    pub checkpoint_every: u32,
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            // 20000-episode budget at 16 episodes per iteration.
            iterations: 1250,
            alpha: 0.01,
            beta: 0.05,
            gamma: 0.99,
            delta: 0.05,
            weights: CostWeights::default(),
            discounted_floor: None,
            m_rollouts: 16,
            w_steps: 500,
            d_branches: 8,
            zeta: 0.1,
            radius: 100.0,
            critic_hidden: vec![64, 64],
            critic_lr: 1e-3,
            critic_epochs: 2000,
            critic_minibatch: 64,
            critic_rel_tol: 1e-6,
            lambda0: 0.0,
            freeze_lambda: false,
            merge_cost_into_reward: false,
            subtract_cost_gradient: false,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config("step sizes alpha and beta must be positive".into()));
        }
        UncertaintyConfig::new(self.gamma, self.delta)?;
        if self.m_rollouts == 0 || self.w_steps == 0 || self.d_branches == 0 {
            return Err(Error::Config("sample counts must be at least 1".into()));
        }
        if !(self.zeta > 0.0) || !(self.radius > 0.0) {
            return Err(Error::Config("zeta and radius must be positive".into()));
        }
        if !(self.critic_lr > 0.0) || self.critic_epochs == 0 || self.critic_minibatch == 0 {
            return Err(Error::Config("critic fit budgets must be positive".into()));
        }
        if !(self.critic_rel_tol >= 0.0) {
            return Err(Error::Config("critic_rel_tol must be non-negative".into()));
        }
        if self.critic_hidden.is_empty() || self.critic_hidden.contains(&0) {
            return Err(Error::Config("critic_hidden needs at least one nonzero width".into()));
        }
        if !(self.lambda0 >= 0.0) {
            return Err(Error::Config("lambda0 must be non-negative".into()));
        }
        Ok(())
    }

    /// Effective discounted fairness floor.
    pub fn floor(&self) -> f64 {
        self.discounted_floor.unwrap_or(self.weights.d_step / (1.0 - self.gamma))
    }

    pub fn uncertainty(&self) -> Result<UncertaintyConfig> {
        UncertaintyConfig::new(self.gamma, self.delta)
    }
}

/// One file describing a full run: environment plus training settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad run config {}: {e}", path.display())))?;
        cfg.sim.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Feature normalizer matching a simulator configuration.
pub fn policy_norm(sim_cfg: &SimConfig) -> EncodeNorm {
    let max_chargers = sim_cfg.chargers_per_region.iter().copied().max().unwrap_or(0);
    EncodeNorm::new(sim_cfg.fleet_size, max_chargers)
}

/// Simulator plus factored policy, exposed to the gradient estimator.
/// Each region is one agent; its score is the gradient of that region's
/// action density with respect to the shared parameters.
#[derive(Clone)]
pub struct SimWorld {
    sim: Sim,
    policy: DirichletPolicy,
    merge_cost_into_reward: bool,
}

impl SimWorld {
    pub fn new(sim: Sim, policy: DirichletPolicy, merge_cost_into_reward: bool) -> Self {
        SimWorld { sim, policy, merge_cost_into_reward }
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn policy(&self) -> &DirichletPolicy {
        &self.policy
    }
}

impl World for SimWorld {
    fn n_agents(&self) -> usize {
        self.sim.grid().len()
    }

    fn param_len(&self) -> usize {
        self.policy.param_len()
    }

    fn features(&self) -> Vec<f64> {
        encode_joint(&self.sim.observe(), &self.policy.norm())
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.sim.reset(rng);
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> WorldStep {
        let state = self.sim.observe();
        let grid = *self.sim.grid();
        let action = self.policy.act(&state, &grid, rng);
        let scores = (0..grid.len())
            .map(|i| {
                self.policy.grad_log_density_region(
                    &state,
                    i,
                    &grid,
                    &action.vacant[i],
                    &action.low_battery[i],
                )
            })
            .collect();
        let out = self
            .sim
            .step(&action, rng)
            .expect("policy-sampled actions are valid for the simulator grid");
        let reward =
            if self.merge_cost_into_reward { out.reward + out.cost } else { out.reward };
        WorldStep { reward, cost: out.cost, scores }
    }

    // Same draws as `step` (action sampling, then simulator noise); only the
    // deterministic score computation is skipped.
    fn advance(&mut self, rng: &mut ChaCha8Rng) {
        let state = self.sim.observe();
        let grid = *self.sim.grid();
        let action = self.policy.act(&state, &grid, rng);
        self.sim
            .step(&action, rng)
            .expect("policy-sampled actions are valid for the simulator grid");
    }
}

/// Projected multiplier step: `max(lambda - beta * (v_c_avg - d), 0)`.
///
/// A fairness value above the floor (positive slack) shrinks the multiplier;
/// a violation grows it; the floor at zero keeps it a valid multiplier.
pub fn lambda_update(lambda: f64, v_c_avg: f64, d: f64, beta: f64) -> f64 {
    (lambda - beta * (v_c_avg - d)).max(0.0)
}

/// One metrics row per outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iteration: u32,
    /// Mean per-step training reward across the iteration's rollouts.
    pub avg_reward: f64,
    /// Fairness critic's value at the start-state features, averaged over
    /// rollouts; NaN when the multiplier is frozen.
    pub cost_value: f64,
    /// Multiplier after this iteration's update.
    pub lambda: f64,
    /// `cost_value - floor`; NaN when the multiplier is frozen.
    pub slack: f64,
}

pub const METRICS_HEADER: &str = "iteration,avg_reward,cost_value,lambda,slack\n";

impl MetricRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}\n",
            self.iteration, self.avg_reward, self.cost_value, self.lambda, self.slack
        )
    }
}

/// Everything that survives an iteration boundary. Checkpoints capture this
/// state exactly, so a resumed run continues bit-for-bit.
pub struct TrainState {
    pub policy: DirichletPolicy,
    pub lambda: f64,
    /// Next iteration to run.
    pub iteration: u32,
    pub critic_r: RobustCritic<Mlp>,
    pub critic_c: RobustCritic<Mlp>,
    pub history: Vec<MetricRow>,
}

fn critic_sizes(cfg: &TrainConfig, input: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(cfg.critic_hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(&cfg.critic_hidden);
    sizes.push(1);
    sizes
}

fn fresh_critic(cfg: &TrainConfig, input: usize, stream_idx: u64) -> Result<RobustCritic<Mlp>> {
    let mut rng = stream_rng(cfg.seed, stream::INIT_PARAMS, stream_idx);
    let model = Mlp::init_uniform(critic_sizes(cfg, input), &mut rng)
        .with_activation(Activation::Identity);
    RobustCritic::new(model, cfg.uncertainty()?)
}

fn restored_critic(
    cfg: &TrainConfig,
    input: usize,
    stream_idx: u64,
    params: &[f64],
) -> Result<RobustCritic<Mlp>> {
    let mut rng = stream_rng(cfg.seed, stream::INIT_PARAMS, stream_idx);
    let mut model = Mlp::init_uniform(critic_sizes(cfg, input), &mut rng)
        .with_activation(Activation::Identity);
    if params.len() != model.params().len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpointed critic has {} parameters, the configured critic has {}",
            params.len(),
            model.params().len()
        )));
    }
    model.params_mut().copy_from_slice(params);
    RobustCritic::new(model, cfg.uncertainty()?)
}

fn init_state(cfg: &TrainConfig, sim_cfg: &SimConfig) -> Result<TrainState> {
    let mut rng = stream_rng(cfg.seed, stream::INIT_PARAMS, 0);
    let policy = DirichletPolicy::init(policy_norm(sim_cfg), &mut rng);
    let joint = joint_encoding_len(sim_cfg.n_regions());
    Ok(TrainState {
        policy,
        lambda: cfg.lambda0,
        iteration: 0,
        critic_r: fresh_critic(cfg, joint, 1)?,
        critic_c: fresh_critic(cfg, joint, 2)?,
        history: Vec::new(),
    })
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}


fn require_meta_match(key: &str, stored: &str, expected: &str) -> Result<()> {
    if stored != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{key} is {stored} in the checkpoint but {expected} in the config"
        )));
    }
    Ok(())
}

impl TrainState {
    /// Serialize the full state, stamped with enough configuration to refuse
    /// resuming under a different setup.
    pub fn checkpoint(&self, cfg: &TrainConfig, sim_cfg: &SimConfig) -> Checkpoint {
        let mut ck = Checkpoint::new("trainer");
        ck.set_meta("iteration", self.iteration);
        ck.set_meta("seed", cfg.seed);
        ck.set_meta("gamma", fmt_f64(cfg.gamma));
        ck.set_meta("delta", fmt_f64(cfg.delta));
        ck.set_meta("alpha", fmt_f64(cfg.alpha));
        ck.set_meta("beta", fmt_f64(cfg.beta));
        ck.set_meta("grid_rows", sim_cfg.grid_rows);
        ck.set_meta("grid_cols", sim_cfg.grid_cols);
        ck.set_meta("fleet_size", sim_cfg.fleet_size);
        let max_chargers = sim_cfg.chargers_per_region.iter().copied().max().unwrap_or(0);
        ck.set_meta("max_chargers", max_chargers);
        let hidden: Vec<String> = cfg.critic_hidden.iter().map(|w| w.to_string()).collect();
        ck.set_meta("critic_hidden", hidden.join("x"));
        ck.push_section("theta", self.policy.params().to_vec());
        ck.push_section("lambda", vec![self.lambda]);
        ck.push_section("critic_r", self.critic_r.model().params().to_vec());
        ck.push_section("critic_c", self.critic_c.model().params().to_vec());
        ck
    }

    /// Rebuild trainer state from a checkpoint, validating it against the
    /// configs the run will use.
    pub fn from_checkpoint(
        ck: &Checkpoint,
        cfg: &TrainConfig,
        sim_cfg: &SimConfig,
    ) -> Result<TrainState> {
        if ck.kind != "trainer" {
            return Err(Error::CheckpointMismatch(format!(
                "expected a trainer checkpoint, found kind {}",
                ck.kind
            )));
        }
        let meta_or = |key: &str| {
            ck.meta(key).ok_or_else(|| Error::BadCheckpoint(format!("missing meta key {key}")))
        };
        require_meta_match("seed", meta_or("seed")?, &cfg.seed.to_string())?;
        require_meta_match("grid_rows", meta_or("grid_rows")?, &sim_cfg.grid_rows.to_string())?;
        require_meta_match("grid_cols", meta_or("grid_cols")?, &sim_cfg.grid_cols.to_string())?;
        require_meta_match("fleet_size", meta_or("fleet_size")?, &sim_cfg.fleet_size.to_string())?;
        for (key, expected) in [("gamma", cfg.gamma), ("delta", cfg.delta)] {
            let stored: f64 = ck.meta_parsed(key)?;
            if stored.to_bits() != expected.to_bits() {
                return Err(Error::CheckpointMismatch(format!(
                    "{key} is {stored} in the checkpoint but {expected} in the config"
                )));
            }
        }
        let hidden: Vec<String> = cfg.critic_hidden.iter().map(|w| w.to_string()).collect();
        require_meta_match("critic_hidden", meta_or("critic_hidden")?, &hidden.join("x"))?;

        let iteration: u32 = ck.meta_parsed("iteration")?;
        let theta = ck.section("theta")?;
        let lambda = match ck.section("lambda")? {
            [l] if *l >= 0.0 && l.is_finite() => *l,
            _ => return Err(Error::BadCheckpoint("lambda section must be one value >= 0".into())),
        };

        if theta.len() != DirichletPolicy::param_count() {
            return Err(Error::CheckpointMismatch(format!(
                "theta has {} parameters, the policy architecture has {}",
                theta.len(),
                DirichletPolicy::param_count()
            )));
        }
        let policy = DirichletPolicy::from_params(policy_norm(sim_cfg), theta);
        let joint = joint_encoding_len(sim_cfg.n_regions());
        let critic_r = restored_critic(cfg, joint, 1, ck.section("critic_r")?)?;
        let critic_c = restored_critic(cfg, joint, 2, ck.section("critic_c")?)?;
        Ok(TrainState { policy, lambda, iteration, critic_r, critic_c, history: Vec::new() })
    }
}

/// Load only the policy from a trainer checkpoint (for evaluation).
pub fn load_policy(ck: &Checkpoint) -> Result<DirichletPolicy> {
    if ck.kind != "trainer" {
        return Err(Error::CheckpointMismatch(format!(
            "expected a trainer checkpoint, found kind {}",
            ck.kind
        )));
    }
    let fleet: u32 = ck.meta_parsed("fleet_size")?;
    let max_chargers: u32 = ck.meta_parsed("max_chargers")?;
    let theta = ck.section("theta")?;
    if theta.len() != DirichletPolicy::param_count() {
        return Err(Error::CheckpointMismatch(format!(
            "theta has {} parameters, the policy architecture has {}",
            theta.len(),
            DirichletPolicy::param_count()
        )));
    }
    Ok(DirichletPolicy::from_params(EncodeNorm::new(fleet, max_chargers), theta))
}

struct Rollout {
    samples_r: Vec<FitSample>,
    samples_c: Vec<FitSample>,
    /// Simulator snapshots before and after each step, aligned with the
    /// critic's candidate pool (all `pre` entries, then all `post`).
    pre: Vec<Sim>,
    post: Vec<Sim>,
    start_feat: Vec<f64>,
    reward_sum: f64,
}

fn collect_rollout(proto: &SimWorld, steps: u32, rng: &mut ChaCha8Rng) -> Rollout {
    let mut world = proto.clone();
    world.sim.reset(rng);
    let grid = *world.sim.grid();
    let norm = world.policy.norm();
    let start_feat = encode_joint(&world.sim.observe(), &norm);
    let mut out = Rollout {
        samples_r: Vec::with_capacity(steps as usize),
        samples_c: Vec::with_capacity(steps as usize),
        pre: Vec::with_capacity(steps as usize),
        post: Vec::with_capacity(steps as usize),
        start_feat: start_feat.clone(),
        reward_sum: 0.0,
    };
    let mut feat = start_feat;
    for _ in 0..steps {
        let state = world.sim.observe();
        out.pre.push(world.sim.clone());
        let action = world.policy.act(&state, &grid, rng);
        let step = world
            .sim
            .step(&action, rng)
            .expect("policy-sampled actions are valid for the simulator grid");
        let feat_next = encode_joint(&world.sim.observe(), &norm);
        let reward = if world.merge_cost_into_reward {
            step.reward + step.cost
        } else {
            step.reward
        };
        out.samples_r.push(FitSample {
            feat: feat.clone(),
            signal: reward,
            feat_next: feat_next.clone(),
            weight: 1.0,
        });
        out.samples_c.push(FitSample {
            feat,
            signal: step.cost,
            feat_next: feat_next.clone(),
            weight: 1.0,
        });
        out.post.push(world.sim.clone());
        out.reward_sum += reward;
        feat = feat_next;
    }
    out
}

struct IterationBatch {
    samples_r: Vec<FitSample>,
    samples_c: Vec<FitSample>,
    pre: Vec<Sim>,
    post: Vec<Sim>,
    start_feats: Vec<Vec<f64>>,
    avg_reward: f64,
}

impl IterationBatch {
    /// Simulator snapshot for a critic pool index (`pre` block first).
    fn snapshot(&self, pool_index: usize) -> &Sim {
        let n = self.pre.len();
        if pool_index < n {
            &self.pre[pool_index]
        } else {
            &self.post[pool_index - n]
        }
    }
}

fn collect_batch(cfg: &TrainConfig, sim_cfg: &SimConfig, proto: &SimWorld, t: u32) -> IterationBatch {
    let steps = sim_cfg.steps_per_episode;
    let m = cfg.m_rollouts;
    let rollouts: Vec<Rollout> = (0..m)
        .into_par_iter()
        .map(|j| {
            let idx = u64::from(t) * m as u64 + j as u64;
            let mut rng = stream_rng(cfg.seed, stream::TRAIN_ROLLOUT, idx);
            collect_rollout(proto, steps, &mut rng)
        })
        .collect();

    let total_steps = m * steps as usize;
    let mut batch = IterationBatch {
        samples_r: Vec::with_capacity(total_steps),
        samples_c: Vec::with_capacity(total_steps),
        pre: Vec::with_capacity(total_steps),
        post: Vec::with_capacity(total_steps),
        start_feats: Vec::with_capacity(m),
        avg_reward: 0.0,
    };
    let mut reward_sum = 0.0;
    for r in rollouts {
        batch.samples_r.extend(r.samples_r);
        batch.samples_c.extend(r.samples_c);
        batch.pre.extend(r.pre);
        batch.post.extend(r.post);
        batch.start_feats.push(r.start_feat);
        reward_sum += r.reward_sum;
    }
    batch.avg_reward = reward_sum / total_steps as f64;
    batch
}

fn run_iteration(
    cfg: &TrainConfig,
    sim_cfg: &SimConfig,
    state: &mut TrainState,
    t: u32,
    d_floor: f64,
) -> Result<MetricRow> {
    let proto = SimWorld::new(
        Sim::new(sim_cfg.clone(), PerturbConfig::default(), cfg.weights, cfg.seed)?,
        state.policy.clone(),
        cfg.merge_cost_into_reward,
    );
    let batch = collect_batch(cfg, sim_cfg, &proto, t);

    let fit_cfg = |idx: u64| FitConfig {
        max_epochs: cfg.critic_epochs,
        lr: cfg.critic_lr,
        minibatch: cfg.critic_minibatch,
        rel_tol: cfg.critic_rel_tol,
        seed: derive_seed(cfg.seed, stream::CRITIC_FIT, u64::from(t) * 2 + idx),
    };
    let rep_r = state.critic_r.fit(&batch.samples_r, &fit_cfg(0))?;
    let need_cost = !cfg.freeze_lambda;
    let rep_c = if need_cost {
        Some(state.critic_c.fit(&batch.samples_c, &fit_cfg(1))?)
    } else {
        None
    };

    let delta_on = cfg.delta > 0.0;
    let pin_world = |pool_index: usize| {
        SimWorld::new(
            batch.snapshot(pool_index).clone(),
            state.policy.clone(),
            cfg.merge_cost_into_reward,
        )
    };
    let est_cfg = |objective: Objective, idx: u64| EstimateConfig {
        objective,
        m_outer: cfg.m_rollouts,
        w_steps: cfg.w_steps,
        d_branches: cfg.d_branches,
        zeta: cfg.zeta,
        radius: cfg.radius,
        seed: derive_seed(cfg.seed, stream::RNPG_OUTER, u64::from(t) * 2 + idx),
    };

    let pin_r = delta_on.then(|| pin_world(rep_r.argmin));
    let g_r = estimate_rnpg(&proto, pin_r.as_ref(), &state.critic_r, &est_cfg(Objective::Reward, 0))?;

    let mut direction = g_r.g_tilde;
    // lambda == 0 contributes nothing, so the cost-side estimate is skipped;
    // its streams are independent, so skipping cannot shift other draws.
    if let (Some(rep_c), true) = (&rep_c, state.lambda > 0.0) {
        let pin_c = delta_on.then(|| pin_world(rep_c.argmin));
        let g_c =
            estimate_rnpg(&proto, pin_c.as_ref(), &state.critic_c, &est_cfg(Objective::Cost, 1))?;
        let scale = if cfg.subtract_cost_gradient { -state.lambda } else { state.lambda };
        for (d, g) in direction.iter_mut().zip(&g_c.g_tilde) {
            *d += scale * g;
        }
    }
    for (p, d) in state.policy.params_mut().iter_mut().zip(&direction) {
        *p += cfg.alpha * d;
    }
    if state.policy.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Config(format!(
            "policy parameters became non-finite at iteration {t}; lower alpha or radius"
        )));
    }

    let (cost_value, slack) = if need_cost {
        let v = batch
            .start_feats
            .iter()
            .map(|f| state.critic_c.value(f))
            .sum::<f64>()
            / batch.start_feats.len() as f64;
        (v, v - d_floor)
    } else {
        (f64::NAN, f64::NAN)
    };
    if need_cost {
        state.lambda = lambda_update(state.lambda, cost_value, d_floor, cfg.beta);
    }

    Ok(MetricRow {
        iteration: t,
        avg_reward: batch.avg_reward,
        cost_value,
        lambda: state.lambda,
        slack,
    })
}

struct Sinks {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
}

fn open_append_csv(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = BufWriter::new(file);
    if fresh {
        out.write_all(header.as_bytes())?;
    }
    Ok(out)
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Sinks {
            dir: dir.to_path_buf(),
            metrics: open_append_csv(&dir.join("metrics.csv"), METRICS_HEADER)?,
            timings: open_append_csv(&dir.join("timings.csv"), "iteration,seconds\n")?,
        })
    }

    fn record(&mut self, row: &MetricRow, seconds: f64) -> Result<()> {
        self.metrics.write_all(row.csv().as_bytes())?;
        self.metrics.flush()?;
        // Wall time lives in a sidecar so metrics.csv stays run-to-run
        // reproducible byte for byte.
        self.timings
            .write_all(format!("{},{}\n", row.iteration, seconds).as_bytes())?;
        self.timings.flush()?;
        Ok(())
    }
}

fn run_loop(
    cfg: &TrainConfig,
    sim_cfg: &SimConfig,
    mut state: TrainState,
    out: Option<&Path>,
) -> Result<TrainState> {
    let mut sinks = match out {
        Some(dir) => Some(Sinks::open(dir)?),
        None => None,
    };
    let d_floor = cfg.floor();
    while state.iteration < cfg.iterations {
        let t = state.iteration;
        let started = Instant::now();
        let row = run_iteration(cfg, sim_cfg, &mut state, t, d_floor)?;
        state.iteration = t + 1;
        state.history.push(row);
        if let Some(s) = sinks.as_mut() {
            s.record(&row, started.elapsed().as_secs_f64())?;
            let cadence_hit = cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0;
            if cadence_hit || state.iteration == cfg.iterations {
                state.checkpoint(cfg, sim_cfg).save(&s.dir.join("checkpoint.ckpt"))?;
            }
        }
    }
    Ok(state)
}

/// Train from scratch. With an output directory, writes `metrics.csv`,
/// `timings.csv`, and periodic `checkpoint.ckpt` files there.
pub fn train(cfg: &TrainConfig, sim_cfg: &SimConfig, out: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    sim_cfg.validate()?;
    run_loop(cfg, sim_cfg, init_state(cfg, sim_cfg)?, out)
}

/// Continue a run from restored state until `cfg.iterations`. Because every
/// iteration's streams are derived from the master seed and the iteration
/// index, a resumed run is bit-for-bit identical to an uninterrupted one.
pub fn resume(
    cfg: &TrainConfig,
    sim_cfg: &SimConfig,
    state: TrainState,
    out: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    sim_cfg.validate()?;
    run_loop(cfg, sim_cfg, state, out)
}
