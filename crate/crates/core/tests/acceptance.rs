//! Exit criteria. Prints one PASS/FAIL line per criterion and exits non-zero
//! when any fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{benchmark, m1, v};
use graphgame::blocks::BlockMap;
use graphgame::dynamics::{
    iterate_error_dynamics, simulate, AgentPolicy, Basis, DisturbanceModel, FeedbackLaw, FleetModel, ProbeSpec,
    TrajectoryLog,
};
use graphgame::experiment::{read_trajectory_csv, reproduce_paper, Case, ReproductionSummary};
use graphgame::game::{check_attenuation_coop, lyapunov_decrease, GameMode, GameWeights};
use graphgame::graph::{disagreement, GraphTopology};
use graphgame::linalg::{Mat, Vector};
use graphgame::online_learner::{critic_step, td_error, LearnerState, LearningRates, Targets};
use graphgame::pi_solver::{
    collect_datasets, local_lqr_gains, policy_eval_lsq, qkernel_from_value, riccati_gains, riccati_oracle_single_agent,
    run_pi_coop, run_pi_noncoop, AgentGains, DataSpec, Evaluation, PiOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYNC: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Reproduction {
    summary: ReproductionSummary,
    seconds: f64,
    training: TrajectoryLog,
    evaluation: TrajectoryLog,
}

fn reproduce(case: Case, dir: &Path) -> Reproduction {
    let start = Instant::now();
    let summary = reproduce_paper(case, dir, None).expect("reproduction run");
    let seconds = start.elapsed().as_secs_f64();
    Reproduction {
        summary,
        seconds,
        training: read_trajectory_csv(&dir.join("trajectory.csv")).expect("training log"),
        evaluation: read_trajectory_csv(&dir.join("evaluation_trajectory.csv")).expect("evaluation log"),
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let col = |x: f64, y: f64| Mat::from_column_slice(2, 1, &[x, y]);
    let variants = [
        ("scalar", FleetModel::new(m1(0.8), vec![m1(1.0)], vec![m1(0.4)]).unwrap(), 2.0, vec![1.0], vec![0.0]),
        (
            "2-state",
            FleetModel::new(
                Mat::from_row_slice(2, 2, &[0.995, 0.09983, -0.09983, 0.995]),
                vec![col(0.2047, 0.08984)],
                vec![col(0.1, 0.05)],
            )
            .unwrap(),
            3.0,
            vec![1.0, -0.5],
            vec![0.0, 0.0],
        ),
    ];
    let topo = GraphTopology::build(1, &[], &[1]).unwrap();
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for (name, model, beta, x, x0) in variants {
        let n = model.n();
        let w = GameWeights::uniform(&topo, GameMode::Cooperative, Mat::identity(n, n), m1(1.0), m1(1.0), m1(1.0), m1(1.0), beta)
            .unwrap();
        let p = riccati_oracle_single_agent(&model, &topo, &w, 0, 1e-14, 100_000).unwrap();
        let exact = qkernel_from_value(&model, &topo, &w, 0, &p, &[]).unwrap();
        let (k, l) = riccati_gains(&model, &topo, &w, 0, &p).unwrap();
        let gains = AgentGains::new(0, k, l, model.block_map(&topo, 0), GameMode::Cooperative).unwrap();
        let spec = DataSpec { steps: 400, probe: ProbeSpec::default(), x_init: vec![x], x0_init: x0, lsq: Default::default() };
        let data = collect_datasets(&model, &topo, &w, &[gains], &spec).unwrap();
        assert_eq!(data[0].count(), 400);
        let fit = policy_eval_lsq(&data[0], GameMode::Cooperative, &Default::default()).unwrap();
        let err = (&fit.kernel.s - &exact.s).norm() / exact.s.norm();
        worst = worst.max(err);
        notes.push(format!("{name} {err:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-6 && secs < 5.0, format!("relative Frobenius error {} (limit 1e-6), {secs:.2}s", notes.join(", ")))
}

fn coop_reproduction(r: &Reproduction) -> Outcome {
    let s = &r.summary;
    outcome(
        s.tail_sync_error < SYNC && s.weights_settled && r.seconds < 30.0,
        format!(
            "tail sync error {:.2e} (< {SYNC}), weight change {:.2e} (< 1e-2), {:.2}s",
            s.tail_sync_error, s.max_weight_relative_change, r.seconds
        ),
    )
}

fn noncoop_reproduction(r: &Reproduction) -> Outcome {
    let s = &r.summary;
    let adv = s.max_adversary_norm.unwrap_or(f64::NAN);
    outcome(
        s.tail_sync_error < SYNC && adv < 1e3 && r.seconds < 30.0,
        format!("tail sync error {:.2e} (< {SYNC}), max adversary norm {adv:.3} (< 1e3), {:.2}s", s.tail_sync_error, r.seconds),
    )
}

fn saddle_point(r: &Reproduction) -> Outcome {
    let gaps = r.summary.saddle_gaps.as_ref().expect("cooperative run has saddle gaps");
    let pass = gaps.iter().all(|g| g.gap_u >= -1e-3 && g.gap_w <= 1e-3);
    let text: Vec<String> =
        gaps.iter().enumerate().map(|(i, g)| format!("agent {} (u {:+.3e}, w {:+.3e})", i + 1, g.gap_u, g.gap_w)).collect();
    outcome(pass, format!("{} [need u >= -1e-3, w <= 1e-3]", text.join("; ")))
}

fn lyapunov() -> Outcome {
    // Pinned, isolated agents with E = 0.5 B satisfy the attenuation test for β ≥ 0.5.
    let a = Mat::from_row_slice(2, 2, &[0.995, 0.09983, -0.09983, 0.995]);
    let b: Vec<Mat> = [[0.2047, 0.08984], [0.2147, 0.2895], [0.2097, 0.1897]]
        .iter()
        .map(|c| Mat::from_column_slice(2, 1, c))
        .collect();
    let e: Vec<Mat> = b.iter().map(|m| m * 0.5).collect();
    let model = FleetModel::new(a, b, e).unwrap();
    let topo = GraphTopology::build(3, &[], &[1, 2, 3]).unwrap();
    let w = GameWeights::uniform(&topo, GameMode::Cooperative, Mat::identity(2, 2), m1(1.0), m1(1.0), m1(1.0), m1(1.0), 1.0)
        .unwrap();
    let att = check_attenuation_coop(&model, &topo, &w).unwrap();
    let values: Vec<Mat> =
        (0..3).map(|i| riccati_oracle_single_agent(&model, &topo, &w, i, 1e-14, 100_000).unwrap()).collect();
    let xs = vec![v(&[0.8, 1.1]), v(&[0.9, 0.3]), v(&[1.2, 0.8])];
    let dec = lyapunov_decrease(&model, &topo, &w, &values, &xs, &v(&[0.4, 0.5]), 200).unwrap();
    outcome(
        att.all_pass() && dec.worst_excess <= 1e-8,
        format!("attenuation test passes: {}, worst ΔV + λ_min(Q)‖δ‖² = {:.2e} (<= 1e-8) over 200 steps", att.all_pass(), dec.worst_excess),
    )
}

fn l2_gain(runs: &[(&str, &Reproduction)]) -> Outcome {
    let mut pass = true;
    let mut text = Vec::new();
    for (name, r) in runs {
        let s = &r.summary;
        match (&s.l2_slack, &s.l2_tail_fraction) {
            (Some(slack), Some(tail)) => {
                pass &= slack.iter().all(|&x| x >= 0.0) && tail.iter().all(|&t| t < 0.01);
                let fmt: Vec<String> = slack.iter().map(|x| format!("{x:+.3}")).collect();
                let worst_tail = tail.iter().cloned().fold(0.0, f64::max);
                text.push(format!("{name} slack [{}], tail <= {worst_tail:.1e}", fmt.join(", ")));
            }
            _ => {
                pass = false;
                text.push(format!("{name}: {}", s.l2_unavailable.as_deref().unwrap_or("no report")));
            }
        }
    }
    outcome(pass, text.join("; "))
}

fn monotonicity() -> Outcome {
    let beta = 30.0;
    let mut pass = true;
    let mut text = Vec::new();
    for mode in [GameMode::Cooperative, GameMode::Noncooperative] {
        let (model, topo, base, _, _) = benchmark(mode, beta);
        let w = GameWeights::uniform(&topo, mode, Mat::identity(2, 2), m1(1.0), m1(1.0), m1(0.01), m1(0.01), beta).unwrap();
        assert_eq!(w.q, base.q);
        let k0 = local_lqr_gains(&model, &topo, &w).unwrap();
        let res = match mode {
            GameMode::Cooperative => run_pi_coop(&model, &topo, &w, &k0, &Evaluation::ModelBased, &PiOptions::default()),
            GameMode::Noncooperative => run_pi_noncoop(&model, &topo, &w, &k0, &Evaluation::ModelBased, &PiOptions::default()),
        };
        match res {
            Ok(r) => {
                let viol = r.monotonicity_violations(1e-8);
                pass &= viol.is_empty();
                text.push(format!("{} {} log entries, {} violations", mode.name(), r.log.len(), viol.len()));
            }
            Err(e) => {
                pass = false;
                text.push(format!("{}: {e}", mode.name()));
            }
        }
    }
    outcome(pass, format!("R_ij = T_ij = 0.01, β = {beta}: {}", text.join("; ")))
}

fn expand_critic(w: &Mat, alpha: f64, e: f64, z: &Vector, zn: &Vector) -> Mat {
    let m = w.nrows();
    Mat::from_fn(m, m, |i, j| w[(i, j)] - alpha * e * (zn[i] * zn[j] - z[i] * z[j]))
}

fn expand_gradient(w: &Mat, alpha: f64, phi: &Vector, t: &Vector) -> Mat {
    Mat::from_fn(w.nrows(), w.ncols(), |r, c| {
        let mut out = 0.0;
        for s in 0..w.nrows() {
            out += w[(s, c)] * phi[s];
        }
        w[(r, c)] - alpha * phi[r] * (out - t[c])
    })
}

fn update_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let cases = 500;
    for _ in 0..cases {
        let mut draw = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let (n, p, q, nb) = (1 + (draw(1, 1)[(0, 0)] > 0.0) as usize, 1, 1 + (draw(1, 1)[(0, 0)] > 0.0) as usize, (draw(1, 1)[(0, 0)].abs() * 3.0) as usize);
        let mode = if draw(1, 1)[(0, 0)] > 0.0 { GameMode::Cooperative } else { GameMode::Noncooperative };
        let blocks = BlockMap::new(n, p, q, (1..=nb).collect());
        let m = blocks.dim();
        let c = draw(m, m);
        let critic = (&c + c.transpose()) * 0.5 + Mat::identity(m, m) * (m as f64);
        let rates = LearningRates {
            critic: draw(1, 1)[(0, 0)].abs(),
            actor: draw(1, 1)[(0, 0)].abs(),
            disturber: draw(1, 1)[(0, 0)].abs(),
            adversary_actor: draw(1, 1)[(0, 0)].abs(),
            adversary_disturber: draw(1, 1)[(0, 0)].abs(),
        };
        let mut s = LearnerState::new(0, blocks, mode, Basis::Identity, critic.clone(), draw(n, p), draw(n, q), rates).unwrap();
        if mode == GameMode::Noncooperative {
            s.adversary_u = (0..nb).map(|_| draw(n, p)).collect();
            s.adversary_w = (0..nb).map(|_| draw(n, q)).collect();
        }
        let colv = |m: Mat| m.column(0).into_owned();
        let (z, zn, r) = (colv(draw(m, 1)), colv(draw(m, 1)), draw(1, 1)[(0, 0)]);
        let mut e_exp = r;
        for i in 0..m {
            for j in 0..m {
                e_exp += critic[(i, j)] * (zn[i] * zn[j] - z[i] * z[j]);
            }
        }
        let e = td_error(&critic, &z, r, &zn).unwrap();
        worst = worst.max((e - e_exp).abs());
        let updated = critic_step(&critic, rates.critic, e, &z, &zn).unwrap();
        worst = worst.max((updated - expand_critic(&critic, rates.critic, e, &z, &zn)).amax());

        let delta = colv(draw(n, 1));
        let targets = Targets {
            u: colv(draw(p, 1)),
            w: colv(draw(q, 1)),
            u_neighbors: (0..nb).map(|_| colv(draw(p, 1))).collect(),
            w_neighbors: (0..nb).map(|_| colv(draw(q, 1))).collect(),
        };
        let out = s.policy_update(&delta, &targets).unwrap();
        worst = worst.max((&out.actor - expand_gradient(&s.actor, rates.actor, &delta, &targets.u)).amax());
        worst = worst.max((&out.disturber - expand_gradient(&s.disturber, rates.disturber, &delta, &targets.w)).amax());
        for k in 0..s.adversary_u.len() {
            let eu = expand_gradient(&s.adversary_u[k], rates.adversary_actor, &delta, &targets.u_neighbors[k]);
            let ew = expand_gradient(&s.adversary_w[k], rates.adversary_disturber, &delta, &targets.w_neighbors[k]);
            worst = worst.max((&out.adversary_u[k] - eu).amax()).max((&out.adversary_w[k] - ew).amax());
        }
    }
    outcome(worst <= 1e-12, format!("{cases} random instances, largest deviation {worst:.2e} (<= 1e-12)"))
}

fn structural(logs: &[(&str, &TrajectoryLog)], model: &FleetModel, topo: &GraphTopology, rerun: bool) -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    let mut worst_path: f64 = 0.0;
    for (_, log) in logs {
        let n = log.n;
        for k in 0..=log.horizon() {
            let eps = disagreement(&log.states[k], &log.leader[k]).norm();
            let delta: f64 = log.deltas[k].iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
            let bound = topo.disagreement_bound(delta, n).unwrap();
            if eps > 0.0 {
                worst_ratio = worst_ratio.max(eps / bound);
            }
        }
        let iterated = iterate_error_dynamics(model, topo, log).unwrap();
        for (a, b) in iterated.iter().zip(&log.deltas) {
            for (x, y) in a.iter().zip(b) {
                worst_path = worst_path.max((x - y).amax());
            }
        }
    }
    outcome(
        worst_ratio <= 1.0 + 1e-9 && worst_path <= 1e-9 && rerun,
        format!(
            "{} logs: disagreement/bound <= {worst_ratio:.6} (<= 1), path deviation {worst_path:.2e} (<= 1e-9), bit-exact rerun: {rerun}",
            logs.len()
        ),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let (coop_dir, noncoop_dir, again_dir) =
        (tmp.path().join("coop"), tmp.path().join("noncoop"), tmp.path().join("noncoop-again"));
    let coop = reproduce(Case::Coop, &coop_dir);
    let noncoop = reproduce(Case::Noncoop, &noncoop_dir);
    reproduce_paper(Case::Noncoop, &again_dir, None).unwrap();
    let rerun = files(&noncoop_dir) == files(&again_dir);

    let (model, topo, w, xs, x0) = benchmark(GameMode::Cooperative, 1.0);
    let gains = local_lqr_gains(&model, &topo, &w).unwrap();
    let policies: Vec<AgentPolicy> = gains.iter().map(|k| AgentPolicy::control_only(FeedbackLaw::linear(k))).collect();
    let dist = vec![DisturbanceModel::decaying_sinusoid(vec![0.5]); 4];
    let probe = ProbeSpec::default();
    let sim = simulate(&model, &topo, Some(&w), &policies, &dist, &xs, &x0, 200, Some(&probe)).unwrap();
    let sim_again = simulate(&model, &topo, Some(&w), &policies, &dist, &xs, &x0, 200, Some(&probe)).unwrap();

    let results = [
        ("oracle equivalence (model-free vs model-based)", oracle_equivalence()),
        ("cooperative reproduction", coop_reproduction(&coop)),
        ("non-cooperative reproduction", noncoop_reproduction(&noncoop)),
        ("saddle-point property at learned cooperative policies", saddle_point(&coop)),
        ("Lyapunov decrease with oracle value kernels", lyapunov()),
        ("L2-gain inequality at learned policies", l2_gain(&[("coop", &coop), ("noncoop", &noncoop)])),
        ("policy-iteration monotonicity", monotonicity()),
        ("update laws match symbolic expansion", update_laws()),
        (
            "structural invariants",
            structural(
                &[
                    ("coop training", &coop.training),
                    ("coop evaluation", &coop.evaluation),
                    ("noncoop training", &noncoop.training),
                    ("noncoop evaluation", &noncoop.evaluation),
                    ("probed simulation", &sim),
                ],
                &model,
                &topo,
                rerun && sim == sim_again,
            ),
        ),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {}: {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
