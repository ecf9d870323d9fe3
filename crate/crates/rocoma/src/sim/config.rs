//! Simulator configuration: grid shape, fleet, energy model, demand process,
//! and the perturbation knobs used for robustness evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Grid;

/// Full environment description. Loaded from TOML for CLI runs; the default
/// is a desk-scale city tuned so that doing nothing is visibly bad and
/// rebalancing visibly helps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub fleet_size: u32,
    /// Charging points per region, length `grid_rows * grid_cols`.
    pub chargers_per_region: Vec<u32>,
    /// Mean order arrivals per step, per region per time-of-day slot.
    pub demand_rates: Vec<Vec<f64>>,
    /// Row-stochastic origin -> destination matrix for passenger trips.
    pub trip_kernel: Vec<Vec<f64>>,
    pub steps_per_episode: u32,
    /// Steps making up one demand cycle (a "day").
    pub steps_per_day: u32,
    pub battery_capacity: f64,
    pub energy_per_cell: f64,
    pub low_battery_threshold: f64,
    pub charge_per_step: f64,
    /// Steps an order waits before it expires.
    pub patience_steps: u32,
}

/// Environment perturbations for robustness evaluation. The default is the
/// nominal environment (no perturbation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    /// Multiplier on every demand rate.
    pub demand_scale: f64,
    /// Multiplier on charging speed.
    pub charge_scale: f64,
    /// Magnitude of the random perturbation applied to the trip kernel.
    pub kernel_noise: f64,
    /// Per-step probability of replacing the step's demand draws (counts and
    /// destinations) with draws from a uniform alternative.
    pub contamination: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { demand_scale: 1.0, charge_scale: 1.0, kernel_noise: 0.0, contamination: 0.0 }
    }
}

impl PerturbConfig {
    /// The stress environment used for robustness comparisons.
    pub fn perturbed() -> Self {
        PerturbConfig { demand_scale: 1.3, charge_scale: 0.8, kernel_noise: 0.1, contamination: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.demand_scale > 0.0) || !(self.charge_scale > 0.0) {
            return Err(Error::Config("perturbation multipliers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.contamination) {
            return Err(Error::Config("contamination must lie in [0, 1)".into()));
        }
        if !(self.kernel_noise >= 0.0) {
            return Err(Error::Config("kernel noise must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for SimConfig {
    /// 5x5 city, 100 EVs. Demand comes mostly from the periphery while trips
    /// gravitate toward the center, so an unmanaged fleet drains inward and
    /// strands periphery riders; chargers cluster near the center, so parked
    /// low-battery EVs also crowd a few stations. Doing nothing is visibly
    /// bad here and spreading the fleet visibly helps.
    fn default() -> Self {
        let (rows, cols) = (5, 5);
        let grid = Grid::new(rows, cols).expect("default grid is nonempty");
        let n = grid.len();
        let center = grid.index(rows / 2, cols / 2);

        let mut chargers = vec![1u32; n];
        chargers[center] = 8;
        for i in 0..n {
            if grid.manhattan(i, center) == 1 {
                chargers[i] = 3;
            }
        }

        let slots = 24;
        let mut demand_rates = Vec::with_capacity(n);
        for i in 0..n {
            let d = grid.manhattan(i, center) as f64;
            let base = 0.05 + 0.33 * d;
            let row: Vec<f64> = (0..slots)
                .map(|s| {
                    let phase = 2.0 * std::f64::consts::PI * s as f64 / slots as f64;
                    base * (1.0 + 0.2 * phase.sin())
                })
                .collect();
            demand_rates.push(row);
        }

        let mut trip_kernel = Vec::with_capacity(n);
        for i in 0..n {
            let mut row: Vec<f64> = (0..n)
                .map(|j| {
                    let pull = 0.2 + 3.0 * (-(grid.manhattan(j, center) as f64)).exp();
                    (-(grid.manhattan(i, j) as f64) / 1.8).exp() * pull
                })
                .collect();
            let total: f64 = row.iter().sum();
            for p in &mut row {
                *p /= total;
            }
            trip_kernel.push(row);
        }

        SimConfig {
            grid_rows: rows,
            grid_cols: cols,
            fleet_size: 100,
            chargers_per_region: chargers,
            demand_rates,
            trip_kernel,
            steps_per_episode: 25,
            steps_per_day: 288,
            battery_capacity: 30.0,
            energy_per_cell: 1.0,
            low_battery_threshold: 10.0,
            charge_per_step: 3.0,
            patience_steps: 3,
        }
    }
}

impl SimConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid_rows, self.grid_cols)
    }

    pub fn n_regions(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn time_slots(&self) -> usize {
        self.demand_rates.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let n = grid.len();
        if self.fleet_size == 0 {
            return Err(Error::Config("fleet_size must be positive".into()));
        }
        if self.chargers_per_region.len() != n {
            return Err(Error::Config(format!(
                "chargers_per_region has {} entries for {} regions",
                self.chargers_per_region.len(),
                n
            )));
        }
        if self.chargers_per_region.iter().all(|&c| c == 0) {
            // The charging-fairness signal needs at least one charger.
            return Err(Error::NoChargers);
        }
        if self.demand_rates.len() != n {
            return Err(Error::Config(format!(
                "demand_rates has {} rows for {} regions",
                self.demand_rates.len(),
                n
            )));
        }
        let slots = self.time_slots();
        if slots == 0 {
            return Err(Error::Config("demand_rates needs at least one time slot".into()));
        }
        for (i, row) in self.demand_rates.iter().enumerate() {
            if row.len() != slots {
                return Err(Error::Config(format!("demand_rates row {i} has ragged length")));
            }
            if row.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(Error::Config(format!("demand_rates row {i} has a bad rate")));
            }
        }
        if self.trip_kernel.len() != n {
            return Err(Error::Config(format!(
                "trip_kernel has {} rows for {} regions",
                self.trip_kernel.len(),
                n
            )));
        }
        for (i, row) in self.trip_kernel.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config(format!("trip_kernel row {i} has ragged length")));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "trip_kernel row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        if self.steps_per_episode == 0 || self.steps_per_day == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        if !(self.battery_capacity > 0.0)
            || !(self.energy_per_cell >= 0.0)
            || !(self.charge_per_step > 0.0)
        {
            return Err(Error::Config("energy parameters must be positive".into()));
        }
        if !(self.low_battery_threshold >= 0.0)
            || self.low_battery_threshold >= self.battery_capacity
        {
            return Err(Error::Config(
                "low_battery_threshold must lie in [0, battery_capacity)".into(),
            ));
        }
        Ok(())
    }

    /// Battery level at which a charging EV unplugs and turns vacant.
    /// Sits well above the low-battery threshold to prevent oscillation.
    pub fn charge_target(&self) -> f64 {
        (self.low_battery_threshold + 0.25 * self.battery_capacity).min(self.battery_capacity)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SimConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_regions(), 25);
        assert_eq!(cfg.time_slots(), 24);
        assert!(cfg.charge_target() > cfg.low_battery_threshold);
        PerturbConfig::default().validate().unwrap();
        PerturbConfig::perturbed().validate().unwrap();
    }

    #[test]
    fn default_demand_peaks_in_morning_and_evening() {
        let cfg = SimConfig::default();
        let total = |slot: usize| -> f64 { cfg.demand_rates.iter().map(|r| r[slot]).sum() };
        assert!(total(8) > 2.0 * total(0), "morning peak too weak");
        assert!(total(18) > 2.0 * total(0), "evening peak too weak");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = SimConfig::default();
        let dir = std::env::temp_dir().join(format!("rocoma-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sim.toml");
        cfg.save(&path).unwrap();
        let loaded = SimConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded, "TOML round-trip changed the config");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SimConfig::default();
        cfg.trip_kernel[3][0] += 0.5;
        assert!(cfg.validate().is_err(), "non-stochastic kernel accepted");

        let mut cfg = SimConfig::default();
        cfg.low_battery_threshold = cfg.battery_capacity;
        assert!(cfg.validate().is_err(), "threshold at capacity accepted");

        let mut bad = PerturbConfig::default();
        bad.contamination = 1.0;
        assert!(bad.validate().is_err(), "contamination 1.0 accepted");
    }
}
