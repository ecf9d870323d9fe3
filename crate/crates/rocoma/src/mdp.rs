//! Core vocabulary shared by the simulator, the learners, and the baselines:
//! grid geometry, per-region state counts, simplex-valued rebalancing
//! actions, and the fairness / reward / cost signals.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Movement slots of a region's neighborhood, in canonical order.
///
/// Every neighborhood starts with the region itself; boundary regions simply
/// skip the directions that fall off the grid. Action vectors, Dirichlet
/// concentration heads, and tie-breaking in [`integer_split`] all use this
/// order.
pub const SLOT_OFFSETS: [(i64, i64); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

/// Number of movement slots (stay + 4 compass directions).
pub const NUM_SLOTS: usize = SLOT_OFFSETS.len();

/// Flat-indexed rectangular grid of city regions.
///
/// Region `i` sits at row `i / cols`, column `i % cols`. Distances are
/// Manhattan in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(Grid { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of regions.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn position(&self, region: usize) -> (usize, usize) {
        debug_assert!(region < self.len());
        (region / self.cols, region % self.cols)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    pub fn manhattan(&self, a: usize, b: usize) -> u32 {
        let (ra, ca) = self.position(a);
        let (rb, cb) = self.position(b);
        (ra.abs_diff(rb) + ca.abs_diff(cb)) as u32
    }

    /// Region indices of a neighborhood in slot order (stay first, then the
    /// in-bounds compass directions).
    pub fn neighborhood(&self, region: usize) -> Vec<usize> {
        let (r, c) = self.position(region);
        let mut out = Vec::with_capacity(NUM_SLOTS);
        for (dr, dc) in SLOT_OFFSETS {
            let nr = r as i64 + dr;
            let nc = c as i64 + dc;
            if nr >= 0 && nr < self.rows as i64 && nc >= 0 && nc < self.cols as i64 {
                out.push(self.index(nr as usize, nc as usize));
            }
        }
        out
    }

    pub fn neighborhood_size(&self, region: usize) -> usize {
        self.neighborhood(region).len()
    }
}

/// Aggregate counts describing one region at one time step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionState {
    /// Idle EVs with enough charge to serve trips.
    pub vacant: u32,
    /// Idle EVs below the battery threshold, waiting for a charger.
    pub low_battery: u32,
    /// Outstanding ride orders originating here.
    pub demand: u32,
    /// Unoccupied charging spots.
    pub empty_chargers: u32,
    /// Total charging spots installed.
    pub chargers: u32,
}

/// Snapshot of the whole grid as observed by policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub regions: Vec<RegionState>,
    /// Absolute step counter since the episode start.
    pub t: u64,
    /// Time of day as a fraction in `[0, 1)`.
    pub time_of_day: f64,
}

/// Per-region distributions over neighborhood slots for vacant and
/// low-battery EVs. `vacant[i]` and `low_battery[i]` are probability vectors
/// aligned with `Grid::neighborhood(i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceAction {
    pub vacant: Vec<Vec<f64>>,
    pub low_battery: Vec<Vec<f64>>,
}

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::BadSimplex("empty weight vector".into()));
    }
    let mut sum = 0.0;
    for &x in w {
        if !x.is_finite() || x < -SIMPLEX_TOL {
            return Err(Error::BadSimplex(format!("weight {x} out of range")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-6_f64.max(SIMPLEX_TOL * w.len() as f64) {
        return Err(Error::BadSimplex(format!("weights sum to {sum}")));
    }
    Ok(())
}

impl RebalanceAction {
    /// All mass on the stay slot: nothing moves.
    pub fn identity(grid: &Grid) -> Self {
        let per_region: Vec<Vec<f64>> = (0..grid.len())
            .map(|i| {
                let k = grid.neighborhood_size(i);
                let mut w = vec![0.0; k];
                w[0] = 1.0;
                w
            })
            .collect();
        RebalanceAction { vacant: per_region.clone(), low_battery: per_region }
    }

    /// Uniform mass over each neighborhood.
    pub fn uniform(grid: &Grid) -> Self {
        let per_region: Vec<Vec<f64>> = (0..grid.len())
            .map(|i| {
                let k = grid.neighborhood_size(i);
                vec![1.0 / k as f64; k]
            })
            .collect();
        RebalanceAction { vacant: per_region.clone(), low_battery: per_region }
    }

    /// Checks that both halves have one probability vector per region with
    /// the right neighborhood length.
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let n = grid.len();
        if self.vacant.len() != n || self.low_battery.len() != n {
            return Err(Error::ActionGridMismatch(format!(
                "expected {n} regions, got {} vacant rows and {} low-battery rows",
                self.vacant.len(),
                self.low_battery.len()
            )));
        }
        for i in 0..n {
            let k = grid.neighborhood_size(i);
            for (name, row) in [("vacant", &self.vacant[i]), ("low_battery", &self.low_battery[i])] {
                if row.len() != k {
                    return Err(Error::ActionGridMismatch(format!(
                        "region {i}: {name} row has {} weights, neighborhood has {k}",
                        row.len()
                    )));
                }
                check_simplex(row)
                    .map_err(|e| Error::ActionGridMismatch(format!("region {i} ({name}): {e}")))?;
            }
        }
        Ok(())
    }
}

/// Discounting and contamination level of the robust objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    pub gamma: f64,
    pub delta: f64,
}

impl UncertaintyConfig {
    pub fn new(gamma: f64, delta: f64) -> Result<Self> {
        let cfg = UncertaintyConfig { gamma, delta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// Success probability of the geometric effective-horizon distribution.
    pub fn horizon_q(&self) -> f64 {
        1.0 - self.gamma + self.gamma * self.delta
    }

    /// Weight of the worst-state value in gradient bias corrections:
    /// `gamma * delta / (1 - gamma + gamma * delta)`.
    pub fn kappa(&self) -> f64 {
        self.gamma * self.delta / self.horizon_q()
    }
}

/// Weights composing the scalar reward and cost signals, plus the per-step
/// fairness floor used by the constrained trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Weight of low-battery movement distance inside the reward.
    pub alpha_bar: f64,
    /// Weight of the mobility-fairness term inside the cost.
    pub beta_bar: f64,
    /// Per-step fairness floor `d`; the trainer converts it to discounted
    /// units unless overridden.
    pub d_step: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { alpha_bar: 1.0, beta_bar: 1.0, d_step: -20.0 }
    }
}

/// Charging-opportunity fairness: negated total deviation of each region's
/// empty-charger ratio `E_i / C_i` from the global ratio. Regions with no
/// chargers are excluded from both the sum and the global ratio; a grid with
/// no chargers anywhere has no well-defined ratio and is an error.
pub fn fairness_charging(regions: &[RegionState]) -> Result<f64> {
    let mut total_e = 0u64;
    let mut total_c = 0u64;
    for r in regions {
        if r.chargers > 0 {
            total_e += u64::from(r.empty_chargers);
            total_c += u64::from(r.chargers);
        }
    }
    if total_c == 0 {
        return Err(Error::NoChargers);
    }
    let global = total_e as f64 / total_c as f64;
    let mut dev = 0.0;
    for r in regions {
        if r.chargers > 0 {
            dev += (f64::from(r.empty_chargers) / f64::from(r.chargers) - global).abs();
        }
    }
    Ok(-dev)
}

/// Mobility fairness: negated total deviation of each region's
/// demand-to-available-supply ratio from the global ratio. Zero available
/// supply is guarded with `max(V, 1)` per region and globally, so the value
/// is always defined.
pub fn fairness_mobility(regions: &[RegionState], available: &[u32]) -> f64 {
    debug_assert_eq!(regions.len(), available.len());
    let total_d: u64 = regions.iter().map(|r| u64::from(r.demand)).sum();
    let total_v: u64 = available.iter().map(|&v| u64::from(v)).sum();
    let global = total_d as f64 / total_v.max(1) as f64;
    let mut dev = 0.0;
    for (r, &v) in regions.iter().zip(available) {
        dev += (f64::from(r.demand) / f64::from(v.max(1)) - global).abs();
    }
    -dev
}

/// Rebalancing reward: negated movement distance, with low-battery movement
/// weighted by `alpha_bar`. Zero movement gives the maximum reward of 0.
pub fn reward(moved_vacant: f64, moved_low_battery: f64, w: &CostWeights) -> f64 {
    -(moved_vacant + w.alpha_bar * moved_low_battery)
}

/// Fairness cost signal combining both fairness terms. Higher is fairer;
/// the value is always <= 0.
pub fn cost(u_charging: f64, u_mobility: f64, w: &CostWeights) -> f64 {
    u_charging + w.beta_bar * u_mobility
}

/// Splits `n` units across weights by largest remainder: floor each share,
/// then hand the leftover units to the largest fractional remainders, ties
/// going to the lowest slot index. Conserves `n` exactly.
pub fn integer_split(weights: &[f64], n: u32) -> Result<Vec<u32>> {
    check_simplex(weights)?;
    let nf = f64::from(n);
    let mut floors = Vec::with_capacity(weights.len());
    let mut remainders = Vec::with_capacity(weights.len());
    let mut assigned: u64 = 0;
    for &w in weights {
        let share = w.max(0.0) * nf;
        let fl = share.floor();
        assigned += fl as u64;
        floors.push(fl as u32);
        remainders.push(share - fl);
    }
    debug_assert!(assigned <= u64::from(n));
    let mut leftover = (u64::from(n) - assigned) as usize;
    if leftover > 0 {
        let mut order: Vec<usize> = (0..weights.len()).collect();
        order.sort_by(|&a, &b| {
            remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b))
        });
        for &idx in order.iter().take(leftover.min(order.len())) {
            floors[idx] += 1;
        }
        leftover = leftover.saturating_sub(order.len());
        debug_assert_eq!(leftover, 0, "leftover exceeded slot count");
    }
    Ok(floors)
}

/// Anything that can pick a rebalancing action for an observed state.
pub trait Policy {
    fn act(&self, state: &JointState, grid: &Grid, rng: &mut ChaCha8Rng) -> RebalanceAction;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn region(v: u32, l: u32, d: u32, e: u32, c: u32) -> RegionState {
        RegionState { vacant: v, low_battery: l, demand: d, empty_chargers: e, chargers: c }
    }

    #[test]
    fn grid_geometry_and_neighborhoods() {
        let g = Grid::new(5, 5).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(g.manhattan(0, 24), 8);
        assert_eq!(g.neighborhood(12), vec![12, 7, 17, 11, 13]);
        assert_eq!(g.neighborhood(0), vec![0, 5, 1]);
        assert_eq!(g.neighborhood(4), vec![4, 9, 3]);
        assert_eq!(g.neighborhood(2), vec![2, 7, 1, 3]);
        assert!(Grid::new(0, 3).is_err());
    }

    #[test]
    fn charging_fairness_matches_hand_cases() {
        // Perfectly uneven two-region case: ratios 0 and 1 around global 1/2.
        let r = [region(0, 0, 0, 0, 4), region(0, 0, 0, 4, 4)];
        assert!((fairness_charging(&r).unwrap() - (-1.0)).abs() < 1e-12);

        // A zero-charger region changes nothing.
        let r = [region(0, 0, 0, 1, 2), region(0, 0, 0, 1, 2), region(0, 0, 0, 0, 0)];
        assert_eq!(fairness_charging(&r).unwrap(), 0.0);

        let r = [region(0, 0, 0, 0, 0); 3];
        assert!(matches!(fairness_charging(&r), Err(Error::NoChargers)));
    }

    #[test]
    fn mobility_fairness_matches_hand_cases() {
        let r = [region(0, 0, 4, 0, 0), region(0, 0, 0, 0, 0)];
        assert!((fairness_mobility(&r, &[2, 2]) - (-2.0)).abs() < 1e-12);

        // All supply gone: the max(V, 1) guard keeps the value defined.
        let v = fairness_mobility(&r, &[0, 0]);
        assert!((v - (-4.0)).abs() < 1e-12);

        // Uniform ratios are perfectly fair.
        let r = [region(0, 0, 2, 0, 0), region(0, 0, 2, 0, 0)];
        assert_eq!(fairness_mobility(&r, &[4, 4]), 0.0);
    }

    #[test]
    fn reward_and_cost_compose_linearly() {
        let w = CostWeights::default();
        assert_eq!(reward(0.0, 0.0, &w), 0.0);
        assert_eq!(reward(3.0, 2.0, &w), -5.0);
        let w2 = CostWeights { alpha_bar: 0.5, beta_bar: 2.0, d_step: -20.0 };
        assert_eq!(reward(3.0, 2.0, &w2), -4.0);
        assert_eq!(cost(-1.0, -2.0, &w2), -5.0);
    }

    #[test]
    fn integer_split_hand_cases() {
        assert_eq!(integer_split(&[0.5, 0.5], 3).unwrap(), vec![2, 1]);
        assert_eq!(integer_split(&[0.2; 5], 7).unwrap(), vec![2, 2, 1, 1, 1]);
        assert_eq!(integer_split(&[1.0], 9).unwrap(), vec![9]);
        assert_eq!(integer_split(&[0.3, 0.3, 0.4], 0).unwrap(), vec![0, 0, 0]);
        assert!(integer_split(&[0.5, 0.6], 3).is_err());
        assert!(integer_split(&[], 3).is_err());
    }

    #[test]
    fn action_constructors_validate() {
        let g = Grid::new(3, 3).unwrap();
        RebalanceAction::identity(&g).validate(&g).unwrap();
        RebalanceAction::uniform(&g).validate(&g).unwrap();

        let mut bad = RebalanceAction::identity(&g);
        bad.vacant[4] = vec![1.0; 3];
        assert!(matches!(bad.validate(&g), Err(Error::ActionGridMismatch(_))));
    }

    #[test]
    fn uncertainty_config_derived_quantities() {
        let u = UncertaintyConfig::new(0.99, 0.05).unwrap();
        assert!((u.horizon_q() - 0.0595).abs() < 1e-12);
        assert!((u.kappa() - 0.99 * 0.05 / 0.0595).abs() < 1e-12);
        assert!(UncertaintyConfig::new(1.0, 0.0).is_err());
        assert!(UncertaintyConfig::new(0.9, 1.0).is_err());
        let plain = UncertaintyConfig::new(0.9, 0.0).unwrap();
        assert_eq!(plain.kappa(), 0.0);
        assert!((plain.horizon_q() - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn integer_split_conserves_mass(n in 0u32..1_000_000, raw in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let split = integer_split(&w, n).unwrap();
            prop_assert_eq!(split.iter().map(|&x| u64::from(x)).sum::<u64>(), u64::from(n));
            // Largest-remainder rounding never strays more than one unit
            // from the exact share.
            for (s, wi) in split.iter().zip(&w) {
                let exact = wi * f64::from(n);
                prop_assert!((f64::from(*s) - exact).abs() < 1.0 + 1e-6);
            }
        }

        #[test]
        fn fairness_is_permutation_invariant(
            es in proptest::collection::vec((0u32..5, 1u32..6), 2..6),
            ds in proptest::collection::vec((0u32..9, 0u32..9), 2..6),
        ) {
            let regions: Vec<RegionState> = es.iter().map(|&(e, c)| region(0, 0, 0, e.min(c), c)).collect();
            let mut rev = regions.clone();
            rev.reverse();
            let a = fairness_charging(&regions).unwrap();
            let b = fairness_charging(&rev).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a <= 0.0);

            let regions: Vec<RegionState> = ds.iter().map(|&(d, _)| region(0, 0, d, 0, 0)).collect();
            let avail: Vec<u32> = ds.iter().map(|&(_, v)| v).collect();
            let mut rr = regions.clone();
            rr.reverse();
            let mut ra = avail.clone();
            ra.reverse();
            let a = fairness_mobility(&regions, &avail);
            let b = fairness_mobility(&rr, &ra);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a <= 0.0);
        }
    }
}
