//! Factored Dirichlet rebalancing policy.
//!
//! One shared network maps each agent's local state to two concentration
//! heads (vacant and low-battery EVs) over the five movement slots; boundary
//! regions read the subset of slots that exist for them. The joint policy is
//! the product of the per-region Dirichlet densities, so the joint score is
//! the sum of per-agent scores, which is what the gradient estimator needs.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::encode::{encode_local, EncodeNorm, LOCAL_ENCODING_LEN};
use super::math::{digamma, ln_gamma};
use super::mlp::{Activation, Mlp, Trace};
use crate::mdp::{Grid, JointState, Policy, RebalanceAction, NUM_SLOTS, SLOT_OFFSETS};

/// Additive floor keeping concentrations strictly positive and the density
/// differentiable everywhere.
pub const CONCENTRATION_FLOOR: f64 = 1e-3;

/// Simplex clamp applied to sampled actions before density evaluation, so
/// boundary samples keep finite log-densities and gradients.
const ACTION_CLAMP: f64 = 1e-6;

/// Default hidden widths of the policy network. A single narrow layer keeps
/// the score regression cheap (its cost is linear in the parameter count)
/// while remaining expressive enough for the local per-region features.
pub const POLICY_HIDDEN: [usize; 1] = [16];

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPolicy {
    mlp: Mlp,
    norm: EncodeNorm,
}

/// Concentrations of one region: parallel to `Grid::neighborhood(region)`.
#[derive(Debug, Clone)]
pub struct RegionConcentrations {
    pub vacant: Vec<f64>,
    pub low_battery: Vec<f64>,
    trace: Trace,
    /// Positions of this region's valid slots inside the network output.
    slots: Vec<usize>,
}

impl DirichletPolicy {
    /// Fresh policy with uniform parameter init on [-0.1, 0.1].
    pub fn init(norm: EncodeNorm, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![LOCAL_ENCODING_LEN];
        sizes.extend_from_slice(&POLICY_HIDDEN);
        sizes.push(2 * NUM_SLOTS);
        DirichletPolicy { mlp: Mlp::init_uniform(sizes, rng), norm }
    }

    pub fn from_params(norm: EncodeNorm, params: &[f64]) -> Self {
        let mut sizes = vec![LOCAL_ENCODING_LEN];
        sizes.extend_from_slice(&POLICY_HIDDEN);
        sizes.push(2 * NUM_SLOTS);
        let mut mlp = Mlp::new(sizes, Activation::Softplus);
        mlp.set_params(params);
        DirichletPolicy { mlp, norm }
    }

    /// Parameter count of the fixed policy architecture.
    pub fn param_count() -> usize {
        let mut sizes = vec![LOCAL_ENCODING_LEN];
        sizes.extend_from_slice(&POLICY_HIDDEN);
        sizes.push(2 * NUM_SLOTS);
        crate::nn::mlp::param_count(&sizes)
    }

    pub fn norm(&self) -> EncodeNorm {
        self.norm
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn param_len(&self) -> usize {
        self.mlp.params().len()
    }

    /// Concentration vectors for one region's two heads.
    pub fn concentrations(
        &self,
        state: &JointState,
        region: usize,
        grid: &Grid,
    ) -> RegionConcentrations {
        let x = encode_local(state, region, grid, &self.norm);
        let trace = self.mlp.forward_trace(&x);
        let out = trace.output();
        let (r, c) = grid.position(region);
        let mut slots = Vec::with_capacity(NUM_SLOTS);
        for (slot, (dr, dc)) in SLOT_OFFSETS.iter().enumerate() {
            let nr = r as i64 + dr;
            let nc = c as i64 + dc;
            if nr >= 0 && nr < grid.rows() as i64 && nc >= 0 && nc < grid.cols() as i64 {
                slots.push(slot);
            }
        }
        let vacant = slots.iter().map(|&s| out[s] + CONCENTRATION_FLOOR).collect();
        let low_battery =
            slots.iter().map(|&s| out[NUM_SLOTS + s] + CONCENTRATION_FLOOR).collect();
        RegionConcentrations { vacant, low_battery, trace, slots }
    }

    /// Samples one simplex point from a Dirichlet with the given
    /// concentrations via normalized Gamma draws.
    fn sample_simplex(alphas: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        if alphas.len() == 1 {
            return vec![1.0];
        }
        let mut draws = Vec::with_capacity(alphas.len());
        let mut total = 0.0;
        for &a in alphas {
            let g = Gamma::new(a, 1.0).expect("positive concentration").sample(rng);
            total += g;
            draws.push(g);
        }
        if total <= f64::MIN_POSITIVE {
            // All Gamma draws underflowed (only possible for tiny
            // concentrations); fall back to uniform deterministically.
            let k = alphas.len() as f64;
            return vec![1.0 / k; alphas.len()];
        }
        draws.iter().map(|g| g / total).collect()
    }

    /// Clamp a sampled simplex point away from the boundary and renormalize.
    fn clamp_simplex(a: &[f64]) -> Vec<f64> {
        let mut w: Vec<f64> = a.iter().map(|&x| x.clamp(ACTION_CLAMP, 1.0 - ACTION_CLAMP)).collect();
        let s: f64 = w.iter().sum();
        for x in &mut w {
            *x /= s;
        }
        w
    }

    /// Log-density of one head's simplex point under concentrations `alphas`.
    /// A single-slot neighborhood is a point mass with log-density 0.
    fn log_density_head(alphas: &[f64], a: &[f64]) -> f64 {
        debug_assert_eq!(alphas.len(), a.len());
        if alphas.len() == 1 {
            return 0.0;
        }
        let a = Self::clamp_simplex(a);
        let a0: f64 = alphas.iter().sum();
        let mut lp = ln_gamma(a0);
        for (&alpha, &ai) in alphas.iter().zip(&a) {
            lp -= ln_gamma(alpha);
            lp += (alpha - 1.0) * ai.ln();
        }
        lp
    }

    /// Log-density of one agent's pair of head samples.
    pub fn log_density_region(
        &self,
        state: &JointState,
        region: usize,
        grid: &Grid,
        action_v: &[f64],
        action_l: &[f64],
    ) -> f64 {
        let conc = self.concentrations(state, region, grid);
        Self::log_density_head(&conc.vacant, action_v)
            + Self::log_density_head(&conc.low_battery, action_l)
    }

    /// Joint log-density over all regions of both heads.
    pub fn log_density(&self, state: &JointState, grid: &Grid, action: &RebalanceAction) -> f64 {
        (0..grid.len())
            .map(|i| self.log_density_region(state, i, grid, &action.vacant[i], &action.low_battery[i]))
            .sum()
    }

    /// Score vector of one agent: the exact gradient w.r.t. the shared
    /// parameters of `log pi_i(a_i | s_i)` for that agent's two heads.
    pub fn grad_log_density_region(
        &self,
        state: &JointState,
        region: usize,
        grid: &Grid,
        action_v: &[f64],
        action_l: &[f64],
    ) -> Vec<f64> {
        let conc = self.concentrations(state, region, grid);
        if conc.slots.len() == 1 {
            // Point-mass density: locally flat in the parameters.
            return vec![0.0; self.mlp.params().len()];
        }
        let mut upstream = vec![0.0; 2 * NUM_SLOTS];
        for (head, (alphas, act)) in
            [(&conc.vacant, action_v), (&conc.low_battery, action_l)].iter().enumerate()
        {
            let a = Self::clamp_simplex(act);
            let a0: f64 = alphas.iter().sum();
            let d_a0 = digamma(a0);
            for (k, &slot) in conc.slots.iter().enumerate() {
                // d logp / d alpha_k, routed to the head's output unit. The
                // concentration floor is additive, so d alpha / d out = 1.
                upstream[head * NUM_SLOTS + slot] = a[k].ln() - digamma(alphas[k]) + d_a0;
            }
        }
        self.mlp.backward(&conc.trace, &upstream)
    }

    /// Sum of per-agent scores: the joint score of the factored policy.
    pub fn grad_log_density(
        &self,
        state: &JointState,
        grid: &Grid,
        action: &RebalanceAction,
    ) -> Vec<f64> {
        let mut total = vec![0.0; self.mlp.params().len()];
        for i in 0..grid.len() {
            let g = self.grad_log_density_region(state, i, grid, &action.vacant[i], &action.low_battery[i]);
            for (t, gi) in total.iter_mut().zip(&g) {
                *t += gi;
            }
        }
        total
    }
}

impl Policy for DirichletPolicy {
    fn act(&self, state: &JointState, grid: &Grid, rng: &mut ChaCha8Rng) -> RebalanceAction {
        let n = grid.len();
        let mut vacant = Vec::with_capacity(n);
        let mut low = Vec::with_capacity(n);
        for i in 0..n {
            let conc = self.concentrations(state, i, grid);
            vacant.push(Self::sample_simplex(&conc.vacant, rng));
            low.push(Self::sample_simplex(&conc.low_battery, rng));
        }
        RebalanceAction { vacant, low_battery: low }
    }
}
