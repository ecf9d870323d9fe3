//! Evaluation harness: runs a policy for repeated episodes, reports the
//! deployment metrics (rebalancing cost, system fairness, expired orders,
//! response rate), and renders side-by-side comparisons.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp::{CostWeights, Policy};
use crate::seed::{derive_seed, stream, stream_rng};
use crate::sim::{PerturbConfig, Sim, SimConfig};

/// What to evaluate: one policy, one environment, several seeded repeats.
pub struct EvalSpec<'a> {
    /// Label recorded in the report (for example "cop" or "rocoma").
    pub policy_label: String,
    /// Label for the environment variant (for example "nominal").
    pub env_label: String,
    pub sim: &'a SimConfig,
    pub perturb: PerturbConfig,
    pub weights: CostWeights,
    pub repeats: usize,
    pub seed: u64,
}

/// Metrics from one evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub repeat: usize,
    /// Total vacant plus weighted low-battery rebalancing movement.
    pub rebalancing_cost: f64,
    /// Sum of the per-step fairness utilities (closer to zero is fairer).
    pub system_fairness: f64,
    pub expired_orders: u64,
    /// Share of generated orders served, in percent. An episode with no
    /// demand counts as fully served.
    pub response_rate: f64,
    pub generated: u64,
    pub served: u64,
}

/// Mean and sample standard deviation of one metric across repeats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
}

fn stats(values: impl Iterator<Item = f64> + Clone) -> MetricStats {
    let n = values.clone().count();
    if n == 0 {
        return MetricStats { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MetricStats { mean, std }
}

/// Aggregate view of a report, one entry per metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportSummary {
    pub rebalancing_cost: MetricStats,
    pub system_fairness: MetricStats,
    pub expired_orders: MetricStats,
    pub response_rate: MetricStats,
}

/// Per-repeat metrics for one policy in one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy_label: String,
    pub env_label: String,
    pub episodes: Vec<EpisodeMetrics>,
}

pub const REPORT_HEADER: &str =
    "policy,env,repeat,rebalancing_cost,system_fairness,expired_orders,response_rate,generated,served\n";

impl EvalReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            rebalancing_cost: stats(self.episodes.iter().map(|e| e.rebalancing_cost)),
            system_fairness: stats(self.episodes.iter().map(|e| e.system_fairness)),
            expired_orders: stats(self.episodes.iter().map(|e| e.expired_orders as f64)),
            response_rate: stats(self.episodes.iter().map(|e| e.response_rate)),
        }
    }

    /// Render the per-repeat rows plus mean and std rows as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        for e in &self.episodes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.policy_label,
                self.env_label,
                e.repeat,
                e.rebalancing_cost,
                e.system_fairness,
                e.expired_orders,
                e.response_rate,
                e.generated,
                e.served
            );
        }
        let s = self.summary();
        for (name, row) in [
            ("mean", [s.rebalancing_cost.mean, s.system_fairness.mean, s.expired_orders.mean, s.response_rate.mean]),
            ("std", [s.rebalancing_cost.std, s.system_fairness.std, s.expired_orders.std, s.response_rate.std]),
        ] {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},,",
                self.policy_label, self.env_label, name, row[0], row[1], row[2], row[3]
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse a report written by [`EvalReport::to_csv`]. Aggregate rows are
    /// recomputed from the per-repeat rows rather than trusted.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != REPORT_HEADER.trim_end() {
            return Err(Error::Config(format!(
                "{} is not an evaluation report (unexpected header)",
                path.display()
            )));
        }
        let mut report: Option<EvalReport> = None;
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(Error::Config(format!(
                    "{} line {}: expected 9 fields, found {}",
                    path.display(),
                    lineno + 2,
                    fields.len()
                )));
            }
            let (policy, env, repeat) = (fields[0], fields[1], fields[2]);
            if repeat == "mean" || repeat == "std" {
                continue;
            }
            let bad = |what: &str| {
                Error::Config(format!("{} line {}: bad {what}", path.display(), lineno + 2))
            };
            let episode = EpisodeMetrics {
                repeat: repeat.parse().map_err(|_| bad("repeat index"))?,
                rebalancing_cost: fields[3].parse().map_err(|_| bad("rebalancing_cost"))?,
                system_fairness: fields[4].parse().map_err(|_| bad("system_fairness"))?,
                expired_orders: fields[5].parse().map_err(|_| bad("expired_orders"))?,
                response_rate: fields[6].parse().map_err(|_| bad("response_rate"))?,
                generated: fields[7].parse().map_err(|_| bad("generated"))?,
                served: fields[8].parse().map_err(|_| bad("served"))?,
            };
            match &mut report {
                None => {
                    report = Some(EvalReport {
                        policy_label: policy.to_string(),
                        env_label: env.to_string(),
                        episodes: vec![episode],
                    });
                }
                Some(r) => {
                    if r.policy_label != policy || r.env_label != env {
                        return Err(Error::Config(format!(
                            "{} mixes reports ({}/{} and {policy}/{env}); expected one per file",
                            path.display(),
                            r.policy_label,
                            r.env_label
                        )));
                    }
                    r.episodes.push(episode);
                }
            }
        }
        report.ok_or_else(|| {
            Error::Config(format!("{} contains no per-repeat rows", path.display()))
        })
    }
}

/// Run one seeded episode and collect its metrics.
fn run_episode(
    policy: &(dyn Policy + Sync),
    spec: &EvalSpec<'_>,
    repeat: usize,
) -> Result<EpisodeMetrics> {
    let sim_seed = derive_seed(spec.seed, stream::EVAL_REPEAT, repeat as u64);
    let mut sim = Sim::new(spec.sim.clone(), spec.perturb, spec.weights, sim_seed)?;
    let mut rng = stream_rng(spec.seed, stream::EVAL_REPEAT, repeat as u64);
    sim.reset(&mut rng);
    let grid = *sim.grid();
    let mut fairness = 0.0;
    for _ in 0..spec.sim.steps_per_episode {
        let state = sim.observe();
        let action = policy.act(&state, &grid, &mut rng);
        let out = sim.step(&action, &mut rng)?;
        fairness += out.u_charging + spec.weights.beta_bar * out.u_mobility;
    }
    let totals = sim.totals();
    let response_rate = if totals.generated == 0 {
        100.0
    } else {
        100.0 * totals.served as f64 / totals.generated as f64
    };
    Ok(EpisodeMetrics {
        repeat,
        rebalancing_cost: totals.moved_vacant + spec.weights.alpha_bar * totals.moved_low,
        system_fairness: fairness,
        expired_orders: totals.expired,
        response_rate,
        generated: totals.generated,
        served: totals.served,
    })
}

/// Evaluate a policy over `spec.repeats` independent episodes. Fully
/// deterministic in the spec: episode seeds derive from `spec.seed` and the
/// repeat index, so repeated calls give identical reports.
pub fn evaluate(policy: &(dyn Policy + Sync), spec: &EvalSpec<'_>) -> Result<EvalReport> {
    if spec.repeats == 0 {
        return Err(Error::Config("evaluation needs at least one repeat".into()));
    }
    spec.sim.validate()?;
    spec.perturb.validate()?;
    let episodes: Result<Vec<EpisodeMetrics>> = (0..spec.repeats)
        .into_par_iter()
        .map(|i| run_episode(policy, spec, i))
        .collect();
    Ok(EvalReport {
        policy_label: spec.policy_label.clone(),
        env_label: spec.env_label.clone(),
        episodes: episodes?,
    })
}

/// Write a per-step, per-region trajectory trace for one seeded episode.
/// Counts are the state before the step; reward and cost belong to the step
/// taken from it.
pub fn trace_csv(
    policy: &(dyn Policy + Sync),
    spec: &EvalSpec<'_>,
    path: &Path,
) -> Result<()> {
    let sim_seed = derive_seed(spec.seed, stream::EVAL_REPEAT, 0);
    let mut sim = Sim::new(spec.sim.clone(), spec.perturb, spec.weights, sim_seed)?;
    let mut rng = stream_rng(spec.seed, stream::EVAL_REPEAT, 0);
    sim.reset(&mut rng);
    let grid = *sim.grid();
    let mut out = String::from(
        "t,region,vacant,low_battery,demand,empty_chargers,chargers,reward,cost,u_charging,u_mobility\n",
    );
    for t in 0..spec.sim.steps_per_episode {
        let state = sim.observe();
        let action = policy.act(&state, &grid, &mut rng);
        let step = sim.step(&action, &mut rng)?;
        for (i, r) in state.regions.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t},{i},{},{},{},{},{},{},{},{},{}",
                r.vacant, r.low_battery, r.demand, r.empty_chargers, r.chargers,
                step.reward, step.cost, step.u_charging, step.u_mobility
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One metric's side-by-side comparison row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricDelta {
    pub metric: &'static str,
    /// Reference mean.
    pub reference: f64,
    /// (policy label, mean, percent change versus the reference).
    pub others: Vec<(String, f64, f64)>,
}

/// Comparison of several reports against one of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reference_label: String,
    pub env_label: String,
    pub metrics: Vec<MetricDelta>,
}

fn percent_change(value: f64, reference: f64) -> f64 {
    if reference.abs() < 1e-12 {
        f64::NAN
    } else {
        100.0 * (value - reference) / reference.abs()
    }
}

/// Compare reports metric by metric against the report at `reference`.
/// Reports must share the environment label and repeat count; comparing
/// across different setups is refused rather than silently misleading.
pub fn compare(reports: &[EvalReport], reference: usize) -> Result<Comparison> {
    let reference_report = reports.get(reference).ok_or_else(|| {
        Error::Config(format!("reference index {reference} is out of range"))
    })?;
    for r in reports {
        if r.env_label != reference_report.env_label {
            return Err(Error::IncomparableReports(format!(
                "environment {} does not match the reference environment {}",
                r.env_label, reference_report.env_label
            )));
        }
        if r.episodes.len() != reference_report.episodes.len() {
            return Err(Error::IncomparableReports(format!(
                "{} has {} repeats, the reference has {}",
                r.policy_label,
                r.episodes.len(),
                reference_report.episodes.len()
            )));
        }
    }
    let ref_summary = reference_report.summary();
    let picks: [(&'static str, fn(&ReportSummary) -> f64); 4] = [
        ("rebalancing_cost", |s| s.rebalancing_cost.mean),
        ("system_fairness", |s| s.system_fairness.mean),
        ("expired_orders", |s| s.expired_orders.mean),
        ("response_rate", |s| s.response_rate.mean),
    ];
    let metrics = picks
        .iter()
        .map(|(name, pick)| {
            let ref_value = pick(&ref_summary);
            let others = reports
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != reference)
                .map(|(_, r)| {
                    let value = pick(&r.summary());
                    (r.policy_label.clone(), value, percent_change(value, ref_value))
                })
                .collect();
            MetricDelta { metric: name, reference: ref_value, others }
        })
        .collect();
    Ok(Comparison {
        reference_label: reference_report.policy_label.clone(),
        env_label: reference_report.env_label.clone(),
        metrics,
    })
}

impl Comparison {
    /// Plain-text table: one row per metric, one column pair per policy.
    pub fn render(&self) -> String {
        let mut out = format!(
            "metric deltas versus {} ({} environment)\n",
            self.reference_label, self.env_label
        );
        let _ = writeln!(out, "{:<18} {:>14}", "metric", self.reference_label);
        for m in &self.metrics {
            let mut line = format!("{:<18} {:>14.4}", m.metric, m.reference);
            for (label, value, pct) in &m.others {
                if pct.is_nan() {
                    let _ = write!(line, "  {label}: {value:.4} (n/a)");
                } else {
                    let _ = write!(line, "  {label}: {value:.4} ({pct:+.1}%)");
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{BaselineKind, BaselinePolicy};

    fn tiny_sim() -> SimConfig {
        SimConfig {
            grid_rows: 2,
            grid_cols: 2,
            fleet_size: 12,
            chargers_per_region: vec![2, 1, 1, 2],
            demand_rates: vec![
                vec![0.9, 1.3],
                vec![0.4, 0.2],
                vec![0.2, 0.4],
                vec![1.1, 0.7],
            ],
            trip_kernel: vec![
                vec![0.4, 0.3, 0.2, 0.1],
                vec![0.25; 4],
                vec![0.1, 0.2, 0.3, 0.4],
                vec![0.25; 4],
            ],
            steps_per_episode: 12,
            steps_per_day: 6,
            battery_capacity: 20.0,
            energy_per_cell: 1.0,
            low_battery_threshold: 6.0,
            charge_per_step: 4.0,
            patience_steps: 3,
        }
    }

    fn spec_for<'a>(sim: &'a SimConfig, policy_label: &str, seed: u64) -> EvalSpec<'a> {
        EvalSpec {
            policy_label: policy_label.to_string(),
            env_label: "nominal".to_string(),
            sim,
            perturb: PerturbConfig::default(),
            weights: CostWeights::default(),
            repeats: 4,
            seed,
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let sim = tiny_sim();
        let policy = BaselinePolicy::new(BaselineKind::RandomSpread, CostWeights::default());
        let spec = spec_for(&sim, "rdp", 5);
        let a = evaluate(&policy, &spec).expect("first evaluation runs");
        let b = evaluate(&policy, &spec).expect("second evaluation runs");
        assert_eq!(a.to_csv(), b.to_csv(), "identical specs should give identical reports");
    }

    #[test]
    fn stay_put_policy_reports_zero_rebalancing_cost() {
        let sim = tiny_sim();
        let policy = BaselinePolicy::new(BaselineKind::StayPut, CostWeights::default());
        let report = evaluate(&policy, &spec_for(&sim, "no", 7)).expect("evaluation runs");
        for e in &report.episodes {
            assert_eq!(e.rebalancing_cost, 0.0, "doing nothing should move nothing");
        }
        let spread = BaselinePolicy::new(BaselineKind::EvenSpread, CostWeights::default());
        let moved = evaluate(&spread, &spec_for(&sim, "edp", 7)).expect("evaluation runs");
        assert!(
            moved.summary().rebalancing_cost.mean > 0.0,
            "even spreading should report movement"
        );
    }

    #[test]
    fn zero_demand_counts_as_full_response() {
        let mut sim = tiny_sim();
        sim.demand_rates = vec![vec![0.0, 0.0]; 4];
        let policy = BaselinePolicy::new(BaselineKind::StayPut, CostWeights::default());
        let report = evaluate(&policy, &spec_for(&sim, "no", 11)).expect("evaluation runs");
        for e in &report.episodes {
            assert_eq!(e.generated, 0, "zero rates should generate no orders");
            assert_eq!(e.response_rate, 100.0, "no demand should count as fully served");
        }
    }

    #[test]
    fn report_csv_round_trips() {
        let sim = tiny_sim();
        let policy = BaselinePolicy::new(BaselineKind::EvenSpread, CostWeights::default());
        let report = evaluate(&policy, &spec_for(&sim, "edp", 13)).expect("evaluation runs");
        let dir = std::env::temp_dir().join(format!("rocoma-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).expect("temp dir");
        let path = dir.join("report.csv");
        report.save_csv(&path).expect("report saves");
        let back = EvalReport::load_csv(&path).expect("report loads");
        assert_eq!(back, report, "CSV round trip should preserve every episode row");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn summary_matches_hand_computation() {
        let report = EvalReport {
            policy_label: "x".into(),
            env_label: "nominal".into(),
            episodes: vec![
                EpisodeMetrics {
                    repeat: 0,
                    rebalancing_cost: 2.0,
                    system_fairness: -4.0,
                    expired_orders: 3,
                    response_rate: 80.0,
                    generated: 10,
                    served: 8,
                },
                EpisodeMetrics {
                    repeat: 1,
                    rebalancing_cost: 6.0,
                    system_fairness: -8.0,
                    expired_orders: 1,
                    response_rate: 90.0,
                    generated: 10,
                    served: 9,
                },
            ],
        };
        let s = report.summary();
        assert_eq!(s.rebalancing_cost.mean, 4.0);
        assert!((s.rebalancing_cost.std - (8.0f64).sqrt()).abs() < 1e-12,
            "sample std of (2, 6) should be sqrt(8)");
        assert_eq!(s.system_fairness.mean, -6.0);
        assert_eq!(s.expired_orders.mean, 2.0);
        assert_eq!(s.response_rate.mean, 85.0);
    }

    #[test]
    fn comparison_reports_percent_deltas() {
        let base = EvalReport {
            policy_label: "no".into(),
            env_label: "nominal".into(),
            episodes: vec![EpisodeMetrics {
                repeat: 0,
                rebalancing_cost: 10.0,
                system_fairness: -20.0,
                expired_orders: 5,
                response_rate: 50.0,
                generated: 10,
                served: 5,
            }],
        };
        let mut better = base.clone();
        better.policy_label = "cop".into();
        better.episodes[0].system_fairness = -10.0;
        better.episodes[0].response_rate = 75.0;
        let cmp = compare(&[base, better], 0).expect("reports compare");
        assert_eq!(cmp.reference_label, "no");
        let fairness = cmp.metrics.iter().find(|m| m.metric == "system_fairness").unwrap();
        let (_, value, pct) = &fairness.others[0];
        assert_eq!(*value, -10.0);
        assert!((pct - 50.0).abs() < 1e-9, "-10 versus -20 should be +50%, got {pct}");
        let response = cmp.metrics.iter().find(|m| m.metric == "response_rate").unwrap();
        assert!((response.others[0].2 - 50.0).abs() < 1e-9, "75 versus 50 should be +50%");
        let rendered = cmp.render();
        assert!(rendered.contains("system_fairness"), "render should list each metric");
    }

    #[test]
    fn comparison_refuses_mismatched_reports() {
        let a = EvalReport {
            policy_label: "no".into(),
            env_label: "nominal".into(),
            episodes: vec![EpisodeMetrics {
                repeat: 0,
                rebalancing_cost: 1.0,
                system_fairness: -1.0,
                expired_orders: 0,
                response_rate: 100.0,
                generated: 0,
                served: 0,
            }],
        };
        let mut other_env = a.clone();
        other_env.env_label = "perturbed".into();
        assert!(matches!(
            compare(&[a.clone(), other_env], 0),
            Err(Error::IncomparableReports(_))
        ));
        let mut other_len = a.clone();
        other_len.episodes.push(other_len.episodes[0]);
        other_len.episodes[1].repeat = 1;
        assert!(matches!(
            compare(&[a, other_len], 0),
            Err(Error::IncomparableReports(_))
        ));
    }

    #[test]
    fn trace_lists_every_region_at_every_step() {
        let sim = tiny_sim();
        let policy = BaselinePolicy::new(BaselineKind::EvenSpread, CostWeights::default());
        let spec = spec_for(&sim, "edp", 17);
        let dir = std::env::temp_dir().join(format!("rocoma-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).expect("temp dir");
        let path = dir.join("trace.csv");
        trace_csv(&policy, &spec, &path).expect("trace writes");
        let text = std::fs::read_to_string(&path).expect("trace reads");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines.len(),
            1 + (sim.steps_per_episode as usize) * 4,
            "trace should hold one row per region per step plus the header"
        );
        let first = lines[1].split(',').collect::<Vec<_>>();
        assert_eq!(first.len(), 11, "trace rows should have eleven columns");
        assert_eq!(first[0], "0");
        assert_eq!(first[1], "0");
        std::fs::remove_dir_all(&dir).ok();
    }
}
