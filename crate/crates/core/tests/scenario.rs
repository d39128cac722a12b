mod common;

use common::{benchmark, m1};
use graphgame::dynamics::{simulate, AgentPolicy, DisturbanceModel, FeedbackLaw, FleetModel, ProbeSpec};
use graphgame::game::{GameMode, GameWeights};
use graphgame::graph::GraphTopology;
use graphgame::linalg::{quad_form, Mat};
use graphgame::pi_solver::{
    coop_curvature_ok, global_closed_loop_radius, local_lqr_gains, noncoop_inertia_ok, run_pi_coop, run_pi_noncoop,
    DataSpec, Evaluation, PiOptions, PiResult,
};
use graphgame::Error;

fn run(model: &FleetModel, topo: &GraphTopology, w: &GameWeights, k0: &[Mat], eval: &Evaluation) -> graphgame::Result<PiResult> {
    match w.mode {
        GameMode::Cooperative => run_pi_coop(model, topo, w, k0, eval, &PiOptions::default()),
        GameMode::Noncooperative => run_pi_noncoop(model, topo, w, k0, eval, &PiOptions::default()),
    }
}

#[test]
fn unit_attenuation_benchmark_is_ill_posed() {
    for mode in [GameMode::Cooperative, GameMode::Noncooperative] {
        let (model, topo, w, _, _) = benchmark(mode, 1.0);
        let k0 = local_lqr_gains(&model, &topo, &w).unwrap();
        assert!(global_closed_loop_radius(&model, &topo, &k0) < 1.0);
        assert!(matches!(run(&model, &topo, &w, &k0, &Evaluation::ModelBased), Err(Error::WrongCurvature { .. })), "{mode:?}");
    }
}

#[test]
fn large_attenuation_benchmark_converges_and_synchronizes() {
    for mode in [GameMode::Cooperative, GameMode::Noncooperative] {
        let (model, topo, w, xs, x0) = benchmark(mode, 10.0);
        let k0 = local_lqr_gains(&model, &topo, &w).unwrap();
        let res = run(&model, &topo, &w, &k0, &Evaluation::ModelBased).unwrap();
        assert!(res.iterations <= 10);
        assert!(res.monotonicity_violations(1e-8).is_empty());
        for s in &res.kernels {
            match mode {
                GameMode::Cooperative => assert!(coop_curvature_ok(s)),
                GameMode::Noncooperative => assert!(noncoop_inertia_ok(s)),
            }
        }
        let controls: Vec<Mat> = res.gains.iter().map(|g| g.control.clone()).collect();
        assert!(global_closed_loop_radius(&model, &topo, &controls) < 1.0);
        let policies: Vec<AgentPolicy> = controls.iter().map(|k| AgentPolicy::control_only(FeedbackLaw::linear(k))).collect();
        let log = simulate(&model, &topo, None, &policies, &vec![DisturbanceModel::zero(1); 4], &xs, &x0, 300, None).unwrap();
        assert!(log.max_sync_error(300) < 0.05, "{mode:?}: {}", log.max_sync_error(300));

        // Bellman consistency of each converged kernel along its own policy.
        for (g, s) in res.gains.iter().zip(&res.kernels) {
            let gm = g.policy_matrix();
            let lambda = w.stage_kernel(g.agent, &g.blocks);
            let m = model.stacked_input_matrix(&topo, g.agent, &g.blocks.neighbors).unwrap();
            for d in graphgame::pi_solver::probe_states(2) {
                let z = &gm * &d;
                let z_next = &gm * (&m * &z);
                let residual = s.value(&z) - quad_form(&lambda, &z) - s.value(&z_next);
                assert!(residual.abs() < 1e-8 * (1.0 + s.value(&z).abs()));
            }
        }
    }
}

#[test]
fn data_driven_evaluation_matches_model_based_on_isolated_agents() {
    let col = |x: f64, y: f64| Mat::from_column_slice(2, 1, &[x, y]);
    let a = Mat::from_row_slice(2, 2, &[0.995, 0.09983, -0.09983, 0.995]);
    let model = FleetModel::new(a, vec![col(0.2047, 0.08984), col(0.2147, 0.2895)], vec![col(0.1, 0.05), col(0.1, 0.1)]).unwrap();
    let topo = GraphTopology::build(2, &[], &[1, 2]).unwrap();
    let w = GameWeights::uniform(&topo, GameMode::Cooperative, Mat::identity(2, 2), m1(1.0), m1(1.0), m1(1.0), m1(1.0), 3.0).unwrap();
    let k0 = local_lqr_gains(&model, &topo, &w).unwrap();
    let exact = run(&model, &topo, &w, &k0, &Evaluation::ModelBased).unwrap();
    let spec = DataSpec {
        steps: 300,
        probe: ProbeSpec { seed: 4, ..Default::default() },
        x_init: vec![vec![1.0, -0.5], vec![0.3, 0.8]],
        x0_init: vec![0.0, 0.0],
        lsq: Default::default(),
    };
    let learned = run(&model, &topo, &w, &k0, &Evaluation::DataDriven(spec)).unwrap();
    for (a, b) in exact.values.iter().zip(&learned.values) {
        assert!((a - b).norm() / a.norm() < 1e-6);
    }
}
