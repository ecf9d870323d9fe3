use rocoma::harness::{evaluate, EvalSpec};
use rocoma::mdp::{CostWeights, Policy};
use rocoma::sim::{PerturbConfig, SimConfig};
use rocoma::trainer::{train, TrainConfig};

fn eval_policy(
    label: &str,
    policy: &(dyn Policy + Sync),
    sim_cfg: &SimConfig,
) -> (f64, f64, f64, f64) {
    let spec = EvalSpec {
        policy_label: label.to_string(),
        env_label: "nominal".to_string(),
        sim: sim_cfg,
        perturb: PerturbConfig::default(),
        weights: CostWeights::default(),
        repeats: 10,
        seed: 1,
    };
    let report = evaluate(policy, &spec).unwrap();
    let s = report.summary();
    println!(
        "{label:>12}: cost {:>8.1}  fairness {:>8.1}  expired {:>6.1}  response {:>6.2}%",
        s.rebalancing_cost.mean, s.system_fairness.mean, s.expired_orders.mean, s.response_rate.mean
    );
    (s.rebalancing_cost.mean, s.system_fairness.mean, s.expired_orders.mean, s.response_rate.mean)
}

#[test]
fn probe_constrained_training() {
    let sim_cfg = SimConfig::default();
    let cfg = TrainConfig {
        iterations: 100,
        alpha: 0.3,
        beta: 0.002,
        gamma: 0.9,
        delta: 0.05,
        m_rollouts: 16,
        w_steps: 300,
        d_branches: 32,
        zeta: 0.5,
        radius: 10.0,
        critic_hidden: vec![32, 32],
        critic_epochs: 300,
        critic_rel_tol: 1e-8,
        lambda0: 0.0,
        freeze_lambda: false,
        merge_cost_into_reward: false,
        checkpoint_every: 1000,
        seed: 7,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let state = train(&cfg, &sim_cfg, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    println!("100 iterations took {:.1}s ({:.2}s/iter)", secs, secs / 100.0);
    println!("floor d = {:.1}", cfg.floor());
    for row in state.history.iter().step_by(5) {
        println!(
            "iter {:>3}  avg_reward {:>8.2}  v_c {:>8.1}  lambda {:>7.3}  slack {:>8.1}",
            row.iteration, row.avg_reward, row.cost_value, row.lambda, row.slack
        );
    }

    use rocoma::baselines::{BaselineKind, BaselinePolicy};
    let w = CostWeights::default();
    eval_policy("trained", &state.policy, &sim_cfg);
    for kind in [BaselineKind::StayPut, BaselineKind::EvenSpread, BaselineKind::RandomSpread] {
        let b = BaselinePolicy::new(kind, w);
        eval_policy(&format!("{kind}"), &b, &sim_cfg);
    }
}
