//! Temporary probe: fairness scale breakdown per baseline on the default city.

use rocoma::baselines::{BaselineKind, BaselinePolicy};
use rocoma::mdp::{CostWeights, Policy};
use rocoma::seed::{stream, stream_rng};
use rocoma::sim::{PerturbConfig, Sim, SimConfig};

fn run_baseline(kind: BaselineKind, cfg: &SimConfig, episodes: usize) {
    let weights = CostWeights::default();
    let mut sim = Sim::new(cfg.clone(), PerturbConfig::default(), weights, 1).unwrap();
    let grid = *sim.grid();
    let policy = BaselinePolicy::new(kind, weights);
    let mut tot_uc = 0.0;
    let mut tot_um = 0.0;
    let mut tot_cost = 0.0;
    let mut tot_move = 0.0;
    let mut gen = 0u64;
    let mut served = 0u64;
    let mut fair_eps: Vec<f64> = Vec::new();
    for ep in 0..episodes {
        let mut rng = stream_rng(1, stream::EVAL_REPEAT, ep as u64);
        sim.reset(&mut rng);
        let mut ep_fair = 0.0;
        for _ in 0..cfg.steps_per_episode {
            let state = sim.observe();
            let action = policy.act(&state, &grid, &mut rng);
            let out = sim.step(&action, &mut rng).unwrap();
            tot_uc += out.u_charging;
            tot_um += out.u_mobility;
            tot_cost += out.cost;
            tot_move += out.moved_vacant + out.moved_low;
            gen += u64::from(out.generated);
            served += u64::from(out.served);
            ep_fair += out.cost;
        }
        fair_eps.push(ep_fair);
    }
    let steps = (episodes as f64) * cfg.steps_per_episode as f64;
    fair_eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "{:>4}: u_c/step {:7.2}  u_m/step {:7.2}  cost/step {:7.2}  move/step {:6.1}  resp {:5.1}%  ep_fair med {:8.1}",
        format!("{kind}"),
        tot_uc / steps,
        tot_um / steps,
        tot_cost / steps,
        tot_move / steps,
        100.0 * served as f64 / gen as f64,
        fair_eps[episodes / 2],
    );
}

#[test]
fn probe_fairness_scales() {
    let cfg = SimConfig::default();
    println!("--- default city ---");
    for kind in [
        BaselineKind::StayPut,
        BaselineKind::EvenSpread,
        BaselineKind::RandomSpread,
        BaselineKind::ConstrainedOpt,
    ] {
        run_baseline(kind, &cfg, 10);
    }
}
