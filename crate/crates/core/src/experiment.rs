//! Experiment configuration, scenario presets, persistence and metrics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    iterate_error_dynamics, simulate, AgentPolicy, Basis, DisturbanceKind, DisturbanceModel, FeedbackLaw, FleetModel,
    ProbeSpec, TrajectoryLog,
};
use crate::error::{Error, Result};
use crate::game::{
    check_attenuation_coop, check_attenuation_noncoop, cost_to_go, l2_gain_check, saddle_gap, AttenuationReport,
    GameMode, GameWeights, SaddleGap, SaddleGapOptions,
};
use crate::graph::{disagreement, Edge, GraphTopology};
use crate::linalg::{mat_to_rows, Mat, Vector};
use crate::online_learner::{
    initial_states, learned_values, run_online, CriticInit, DisturbanceSource, LearningRates, OnlineOptions,
    OnlineResult, WeightRecord,
};
use crate::pi_solver::{
    local_lqr_gains, run_pi_coop, run_pi_noncoop, DataSpec, Evaluation, LsqOptions, PiOptions,
};

/// Synchronisation threshold on `‖x_i − x_0‖` (and `‖δ_i‖` for `sync_time`).
pub const SYNC_THRESHOLD: f64 = 0.05;
/// Bound on the adversary weight norms of a healthy non-cooperative run.
pub const ADVERSARY_NORM_LIMIT: f64 = 1e3;
/// Largest relative change of a weight norm over the final 10% for it to count as settled.
pub const SETTLE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub agents: usize,
    /// `[from, to, weight]` with 1-based ids; `from` is the neighbor `to` listens to.
    pub edges: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub pins: Vec<usize>,
}

/// Row-major matrices; `b[i]` and `e[i]` belong to agent `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<Vec<f64>>>,
    pub e: Vec<Vec<Vec<f64>>>,
}

/// Uniform weights: the same `Q`, `R`, `T` for every agent and `R_ij`, `T_ij` on every edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub t: Vec<Vec<f64>>,
    pub r_neighbor: Vec<Vec<f64>>,
    pub t_neighbor: Vec<Vec<f64>>,
    pub attenuation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateSpec {
    pub leader: Vec<f64>,
    pub followers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Simulate,
    PiCoop,
    PiNoncoop,
    LearnCoop,
    LearnNoncoop,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGains {
    /// Disturbance-free LQR gain of each local error loop.
    #[default]
    LocalLqr,
    Zero,
    /// One row-major `p × n` gain per agent.
    Explicit(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationSpec {
    #[default]
    ModelBased,
    DataDriven {
        steps: usize,
        #[serde(default)]
        probe: ProbeSpec,
        #[serde(default)]
        lsq: LsqOptions,
    },
}

fn default_horizon() -> usize {
    500
}

fn default_mode() -> GameMode {
    GameMode::Cooperative
}

fn default_threshold() -> f64 {
    SYNC_THRESHOLD
}

fn default_saddle() -> SaddleGapOptions {
    SaddleGapOptions::default()
}

/// Everything one run needs. Unknown keys are rejected.
///
/// `seed` drives every random stream: the probe uses `seed + probe.seed`, the
/// saddle sampler `seed + saddle.seed`, and agent `i`'s noise disturbance
/// `seed + disturbance.seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologySpec,
    pub dynamics: DynamicsSpec,
    pub weights: WeightsSpec,
    #[serde(default = "default_mode")]
    pub mode: GameMode,
    pub algorithm: Algorithm,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub initial_state: InitialStateSpec,
    #[serde(default)]
    pub initial_gains: InitialGains,
    #[serde(default)]
    pub pi: PiOptions,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default)]
    pub learning_rates: LearningRates,
    #[serde(default)]
    pub critic_init: CriticInit,
    #[serde(default)]
    pub basis: Basis,
    #[serde(default)]
    pub training_disturbance: DisturbanceSource,
    /// External disturbance of every agent; a decaying sinusoid of amplitude 0.5 when absent.
    #[serde(default)]
    pub disturbance: Option<DisturbanceModel>,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default = "default_saddle")]
    pub saddle: SaddleGapOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub sync_threshold: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Built objects of a validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: FleetModel,
    pub topology: GraphTopology,
    pub weights: GameWeights,
    pub x_init: Vec<Vector>,
    pub x0: Vector,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<Mat> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Validation(format!("{name}: expected a non-empty rectangular matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{name}: non-finite entry")));
    }
    Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn context(field: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Validation(msg) => Error::Validation(format!("{field}: {msg}")),
        other => other,
    }
}

impl ExperimentConfig {
    /// Game mode the algorithm runs in.
    pub fn effective_mode(&self) -> GameMode {
        match self.algorithm {
            Algorithm::PiCoop | Algorithm::LearnCoop => GameMode::Cooperative,
            Algorithm::PiNoncoop | Algorithm::LearnNoncoop => GameMode::Noncooperative,
            Algorithm::Simulate | Algorithm::Verify => self.mode,
        }
    }

    pub fn build(&self, mode: GameMode) -> Result<Scenario> {
        let t = &self.topology;
        let edges: Vec<Edge> = t.edges.iter().map(|&(f, to, w)| Edge::new(f, to, w)).collect();
        let topology = GraphTopology::build(t.agents, &edges, &t.pins)?;

        let d = &self.dynamics;
        if d.b.len() != t.agents || d.e.len() != t.agents {
            return Err(Error::Validation(format!(
                "dynamics: expected {} input and disturbance matrices, got {} and {}",
                t.agents,
                d.b.len(),
                d.e.len()
            )));
        }
        let a = matrix("dynamics.a", &d.a)?;
        let b = d.b.iter().enumerate().map(|(i, m)| matrix(&format!("dynamics.b[{i}]"), m)).collect::<Result<_>>()?;
        let e = d.e.iter().enumerate().map(|(i, m)| matrix(&format!("dynamics.e[{i}]"), m)).collect::<Result<_>>()?;
        let model = FleetModel::new(a, b, e)?;

        let w = &self.weights;
        let weights = GameWeights::uniform(
            &topology,
            mode,
            matrix("weights.q", &w.q)?,
            matrix("weights.r", &w.r)?,
            matrix("weights.t", &w.t)?,
            matrix("weights.r_neighbor", &w.r_neighbor)?,
            matrix("weights.t_neighbor", &w.t_neighbor)?,
            w.attenuation,
        )?;
        let (n, p, q) = (model.n(), model.p(), model.q());
        for (name, m, rows) in [("weights.q", &weights.q[0], n), ("weights.r", &weights.r_self[0], p), ("weights.t", &weights.t_self[0], q)] {
            if m.nrows() != rows {
                return Err(Error::Validation(format!("{name}: expected {rows} rows, got {}", m.nrows())));
            }
        }

        let s = &self.initial_state;
        if s.leader.len() != n || s.followers.len() != t.agents || s.followers.iter().any(|x| x.len() != n) {
            return Err(Error::Validation(format!(
                "initial_state: expected a leader of length {n} and {} followers of length {n}",
                t.agents
            )));
        }
        Ok(Scenario {
            model,
            topology,
            weights,
            x_init: s.followers.iter().map(|x| Vector::from_column_slice(x)).collect(),
            x0: Vector::from_column_slice(&s.leader),
        })
    }

    /// Checks every precondition without running anything.
    pub fn validate(&self) -> Result<Scenario> {
        if self.horizon == 0 {
            return Err(Error::EmptyHorizon);
        }
        let sc = self.build(self.effective_mode())?;
        self.learning_rates.validate().map_err(context("learning_rates"))?;
        self.external_disturbance(sc.model.q()).validate(sc.model.q()).map_err(context("disturbance"))?;
        for (name, probe) in [("probe", &self.probe)] {
            if !(probe.amplitude >= 0.0 && probe.amplitude.is_finite() && probe.decay >= 0.0) {
                return Err(Error::Validation(format!("{name}: amplitude and decay must be non-negative")));
            }
        }
        if !(self.sync_threshold > 0.0) {
            return Err(Error::Validation("sync_threshold must be positive".into()));
        }
        if let InitialGains::Explicit(g) = &self.initial_gains {
            if g.len() != sc.model.n_agents() {
                return Err(Error::Validation(format!("initial_gains: expected {} gains", sc.model.n_agents())));
            }
        }
        Ok(sc)
    }

    pub fn effective_probe(&self) -> ProbeSpec {
        ProbeSpec { seed: self.seed.wrapping_add(self.probe.seed), ..self.probe.clone() }
    }

    pub fn effective_saddle(&self) -> SaddleGapOptions {
        SaddleGapOptions { seed: self.seed.wrapping_add(self.saddle.seed), ..self.saddle }
    }

    fn external_disturbance(&self, q: usize) -> DisturbanceModel {
        self.disturbance.clone().unwrap_or_else(|| DisturbanceModel::decaying_sinusoid(vec![0.5; q]))
    }

    /// Per-agent external disturbances with derived seeds.
    pub fn disturbances(&self, n_agents: usize, q: usize) -> Vec<DisturbanceModel> {
        let base = self.external_disturbance(q);
        (0..n_agents)
            .map(|i| {
                let mut d = base.clone();
                if d.kind == DisturbanceKind::SeededDecayingNoise {
                    d.seed = self.seed.wrapping_add(base.seed).wrapping_add(i as u64);
                }
                d
            })
            .collect()
    }

    pub fn initial_controls(&self, sc: &Scenario) -> Result<Vec<Mat>> {
        match &self.initial_gains {
            InitialGains::LocalLqr => local_lqr_gains(&sc.model, &sc.topology, &sc.weights),
            InitialGains::Zero => Ok(vec![Mat::zeros(sc.model.p(), sc.model.n()); sc.model.n_agents()]),
            InitialGains::Explicit(g) => {
                g.iter().enumerate().map(|(i, k)| matrix(&format!("initial_gains[{i}]"), k)).collect()
            }
        }
    }

    fn pi_evaluation(&self) -> Evaluation {
        match &self.evaluation {
            EvaluationSpec::ModelBased => Evaluation::ModelBased,
            EvaluationSpec::DataDriven { steps, probe, lsq } => Evaluation::DataDriven(DataSpec {
                steps: *steps,
                probe: ProbeSpec { seed: self.seed.wrapping_add(probe.seed), ..probe.clone() },
                x_init: self.initial_state.followers.clone(),
                x0_init: self.initial_state.leader.clone(),
                lsq: *lsq,
            }),
        }
    }
}

/// Parses a JSON configuration; errors carry the line and column.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

/// Reads and fully validates a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let config = parse_config(&text)?;
    config.validate()?;
    Ok(config)
}

/// The built-in leader-follower benchmark: four followers, one pinned to the leader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Coop,
    Noncoop,
}

impl Case {
    pub fn preset_name(&self) -> &'static str {
        match self {
            Case::Coop => "paper-sec5-coop",
            Case::Noncoop => "paper-sec5-noncoop",
        }
    }

    pub fn from_preset_name(name: &str) -> Result<Self> {
        match name {
            "paper-sec5-coop" => Ok(Case::Coop),
            "paper-sec5-noncoop" => Ok(Case::Noncoop),
            other => Err(Error::Validation(format!("unknown preset {other:?}"))),
        }
    }

    pub fn mode(&self) -> GameMode {
        match self {
            Case::Coop => GameMode::Cooperative,
            Case::Noncoop => GameMode::Noncooperative,
        }
    }
}

/// Benchmark configuration of `case`.
pub fn preset(case: Case) -> ExperimentConfig {
    let col = |x: f64, y: f64| vec![vec![x], vec![y]];
    let one = vec![vec![1.0]];
    ExperimentConfig {
        topology: TopologySpec {
            agents: 4,
            edges: vec![(2, 1, 0.8), (4, 1, 0.7), (3, 2, 0.6), (1, 2, 0.6), (1, 3, 0.8), (1, 4, 0.4)],
            pins: vec![4],
        },
        dynamics: DynamicsSpec {
            a: vec![vec![0.995, 0.09983], vec![-0.09983, 0.995]],
            b: vec![col(0.2047, 0.08984), col(0.2147, 0.2895), col(0.2097, 0.1897), col(0.2, 0.1)],
            e: vec![col(0.21, 0.0984), col(0.32, 0.084), col(0.14, 0.072), col(0.16, 0.024)],
        },
        weights: WeightsSpec {
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: one.clone(),
            t: one.clone(),
            r_neighbor: one.clone(),
            t_neighbor: one,
            attenuation: 1.0,
        },
        mode: case.mode(),
        algorithm: match case {
            Case::Coop => Algorithm::LearnCoop,
            Case::Noncoop => Algorithm::LearnNoncoop,
        },
        horizon: 500,
        initial_state: InitialStateSpec {
            leader: vec![0.4, 0.5],
            followers: vec![vec![0.8, 1.1], vec![0.9, 0.3], vec![1.2, 0.8], vec![0.9, 0.5]],
        },
        initial_gains: InitialGains::LocalLqr,
        pi: PiOptions::default(),
        evaluation: EvaluationSpec::ModelBased,
        learning_rates: LearningRates {
            critic: 0.1,
            actor: 0.1,
            disturber: 0.1,
            adversary_actor: 0.05,
            adversary_disturber: 0.05,
        },
        critic_init: CriticInit::ModelBased,
        basis: Basis::Identity,
        training_disturbance: DisturbanceSource::Learned,
        disturbance: None,
        probe: ProbeSpec { amplitude: 0.1, decay: 0.01, seed: 0, excite_disturbance: true },
        saddle: SaddleGapOptions::default(),
        seed: 0,
        sync_threshold: SYNC_THRESHOLD,
        output_dir: None,
    }
}

// ---------------------------------------------------------------------------
// Persistence

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn trajectory_header(n: usize, p: usize, q: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "agent".to_string()];
    h.extend((1..=n).map(|c| format!("x{c}")));
    h.extend((1..=n).map(|c| format!("delta{c}")));
    h.extend((1..=p).map(|c| format!("u{c}")));
    h.extend((1..=q).map(|c| format!("w{c}")));
    h.push("stage_cost".into());
    h
}

/// Writes `step,agent,x…,delta…,u…,w…,stage_cost`; the leader is agent 0 with
/// empty error, input and cost fields, and the final step has no inputs.
pub fn write_trajectory_csv(path: &Path, log: &TrajectoryLog) -> Result<()> {
    let (n, p, q) = (log.n, log.p, log.q);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trajectory_header(n, p, q))?;
    let blank = |k: usize| vec![String::new(); k];
    for k in 0..=log.horizon() {
        let mut row = vec![k.to_string(), "0".to_string()];
        row.extend(log.leader[k].iter().map(|v| fmt(*v)));
        row.extend(blank(n + p + q + 1));
        w.write_record(&row)?;
        for i in 0..log.n_agents() {
            let mut row = vec![k.to_string(), (i + 1).to_string()];
            row.extend(log.states[k][i].iter().map(|v| fmt(*v)));
            row.extend(log.deltas[k][i].iter().map(|v| fmt(*v)));
            if k < log.horizon() {
                row.extend(log.controls[k][i].iter().map(|v| fmt(*v)));
                row.extend(log.disturbances[k][i].iter().map(|v| fmt(*v)));
                row.push(log.stage_costs.as_ref().map_or(String::new(), |c| fmt(c[k][i])));
            } else {
                row.extend(blank(p + q + 1));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_field(s: &str, line: usize, col: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse(format!("line {line}, field {col}: cannot parse {s:?}")))
}

/// Inverse of [`write_trajectory_csv`].
pub fn read_trajectory_csv(path: &Path) -> Result<TrajectoryLog> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    let count = |prefix: &str| {
        header.iter().filter(|h| h.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok())).count()
    };
    let (n, p, q) = (count("x"), count("u"), count("w"));
    if header != trajectory_header(n, p, q) {
        return Err(Error::Parse(format!("unexpected trajectory header {header:?}")));
    }
    let mut leader: Vec<Vector> = Vec::new();
    let mut states: Vec<Vec<Vector>> = Vec::new();
    let mut deltas: Vec<Vec<Vector>> = Vec::new();
    let mut controls: Vec<Vec<Vector>> = Vec::new();
    let mut disturbances: Vec<Vec<Vector>> = Vec::new();
    let mut costs: Vec<Vec<Option<f64>>> = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = idx + 2;
        let field = |c: usize| -> Result<f64> { parse_field(&rec[c], line, &header[c]) };
        let vec_at = |start: usize, len: usize| -> Result<Vector> {
            Ok(Vector::from_vec((start..start + len).map(field).collect::<Result<Vec<f64>>>()?))
        };
        let step: usize = rec[0].parse().map_err(|_| Error::Parse(format!("line {line}: bad step")))?;
        let agent: usize = rec[1].parse().map_err(|_| Error::Parse(format!("line {line}: bad agent")))?;
        if agent == 0 {
            if step != leader.len() {
                return Err(Error::Parse(format!("line {line}: steps out of order")));
            }
            leader.push(vec_at(2, n)?);
            states.push(Vec::new());
            deltas.push(Vec::new());
            continue;
        }
        if step + 1 != leader.len() || agent != states[step].len() + 1 {
            return Err(Error::Parse(format!("line {line}: rows out of order")));
        }
        states[step].push(vec_at(2, n)?);
        deltas[step].push(vec_at(2 + n, n)?);
        let u_col = 2 + 2 * n;
        if rec[u_col].is_empty() {
            continue;
        }
        if controls.len() == step {
            controls.push(Vec::new());
            disturbances.push(Vec::new());
            costs.push(Vec::new());
        }
        controls[step].push(vec_at(u_col, p)?);
        disturbances[step].push(vec_at(u_col + p, q)?);
        let c = &rec[u_col + p + q];
        costs[step].push(if c.is_empty() { None } else { Some(parse_field(c, line, "stage_cost")?) });
    }
    let stage_costs = if costs.iter().flatten().all(|c| c.is_some()) {
        Some(costs.iter().map(|row| row.iter().map(|c| c.expect("checked")).collect()).collect())
    } else {
        None
    };
    let log = TrajectoryLog { n, p, q, states, leader, deltas, controls, disturbances, stage_costs };
    log.check_consistency()?;
    Ok(log)
}

pub fn write_weight_history_csv(path: &Path, history: &[WeightRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_rows(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    /// 1-based agent id.
    pub agent: usize,
    /// `‖x_i − x_0‖` at the last step.
    pub final_error: f64,
    pub max_error: f64,
    pub cost_to_go: Option<f64>,
    pub l2_slack: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub agents: Vec<AgentMetrics>,
    /// First step from which every `‖δ_i‖` stays below the threshold.
    pub sync_time: Option<usize>,
    pub diverged: bool,
}

/// Per-agent errors and costs of a logged run. `v0` enables the L2 slack.
pub fn metrics(
    log: &TrajectoryLog,
    topology: &GraphTopology,
    weights: &GameWeights,
    v0: Option<&[f64]>,
    threshold: f64,
) -> MetricsSummary {
    let horizon = log.horizon();
    let l2 = v0.and_then(|v| l2_gain_check(log, topology, weights, v).ok());
    let agents = (0..log.n_agents())
        .map(|i| AgentMetrics {
            agent: i + 1,
            final_error: log.sync_error(horizon, i),
            max_error: (0..=horizon).map(|k| log.sync_error(k, i)).fold(0.0, f64::max),
            cost_to_go: if horizon > 0 { cost_to_go(log, topology, weights, i).ok().map(|c| c.total) } else { None },
            l2_slack: l2.as_ref().map(|r| r[i].slack),
        })
        .collect();
    let finite = log.states.iter().flatten().chain(&log.leader).all(|x| x.iter().all(|v| v.is_finite()));
    let sync_time = if finite {
        let ok: Vec<bool> =
            log.deltas.iter().map(|row| row.iter().all(|d| d.norm() < threshold)).collect();
        ok.iter().rposition(|b| !b).map_or(Some(0), |last_bad| (last_bad < horizon).then_some(last_bad + 1))
    } else {
        None
    };
    let start = log.max_sync_error(0).max(threshold);
    let diverged = !finite || log.max_sync_error(horizon) > 10.0 * start;
    MetricsSummary { agents, sync_time, diverged }
}

/// Largest `‖x_i − x_0‖` over the last `fraction` of the horizon.
pub fn tail_sync_error(log: &TrajectoryLog, fraction: f64) -> f64 {
    let h = log.horizon();
    let start = h - ((h as f64) * fraction).floor() as usize;
    (start..=h).map(|k| log.max_sync_error(k)).fold(0.0, f64::max)
}

/// `(max − min) / |max|` of the last `fraction` of a series (0 for an all-zero tail).
pub fn relative_change(series: &[f64], fraction: f64) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let start = series.len() - ((series.len() as f64 * fraction).ceil() as usize).clamp(1, series.len());
    let tail = &series[start..];
    let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi.abs() == 0.0 {
        0.0
    } else {
        (hi - lo) / hi.abs()
    }
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproductionSummary {
    pub case: String,
    pub final_sync_error_per_agent: Vec<f64>,
    /// Largest `‖x_i − x_0‖` over the final 10% of the training run.
    pub tail_sync_error: f64,
    pub max_weight_relative_change: f64,
    pub weights_settled: bool,
    pub max_adversary_norm: Option<f64>,
    pub skipped_updates: Vec<usize>,
    /// Cooperative runs only.
    pub saddle_gaps: Option<Vec<SaddleGap>>,
    /// Absent when the evaluation rollout is too short for the check; see `l2_unavailable`.
    pub l2_slack: Option<Vec<f64>>,
    pub l2_tail_fraction: Option<Vec<f64>>,
    pub l2_unavailable: Option<String>,
    /// Critic values at the initial errors used as `V_0` in the L2 check.
    pub l2_initial_values: Vec<f64>,
    pub attenuation_margins: Vec<f64>,
    pub converged: bool,
}

/// Everything produced by an online-learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningOutcome {
    pub result: OnlineResult,
    /// Learned controls under the external disturbance.
    pub evaluation: TrajectoryLog,
    pub summary: ReproductionSummary,
}

fn attenuation(sc: &Scenario) -> Result<AttenuationReport> {
    match sc.weights.mode {
        GameMode::Cooperative => check_attenuation_coop(&sc.model, &sc.topology, &sc.weights),
        GameMode::Noncooperative => check_attenuation_noncoop(&sc.model, &sc.topology, &sc.weights),
    }
}

/// Trains online, then evaluates the learned policies.
pub fn run_learning(config: &ExperimentConfig, mode: GameMode) -> Result<LearningOutcome> {
    let sc = config.build(mode)?;
    let (model, topo, weights) = (&sc.model, &sc.topology, &sc.weights);
    let controls = config.initial_controls(&sc)?;
    let init = initial_states(model, topo, weights, &controls, config.critic_init, config.learning_rates, config.basis)?;
    let opts = OnlineOptions {
        horizon: config.horizon,
        probe: config.effective_probe(),
        disturbance_source: config.training_disturbance,
        divergence_threshold: crate::online_learner::DIVERGENCE_THRESHOLD,
        snapshot_every: 0,
    };
    let external = config.disturbances(model.n_agents(), model.q());
    let result = run_online(model, topo, weights, init, &sc.x_init, &sc.x0, &external, &opts)?;

    let policies: Vec<AgentPolicy> = result.states.iter().map(|s| s.policy()).collect();
    let saddle_gaps = match mode {
        GameMode::Cooperative => {
            Some(saddle_gap(model, topo, weights, &policies, &sc.x_init, &sc.x0, &config.effective_saddle())?)
        }
        GameMode::Noncooperative => None,
    };
    let controls_only: Vec<AgentPolicy> = policies.iter().map(|p| AgentPolicy::control_only(p.control.clone())).collect();
    let evaluation =
        simulate(model, topo, Some(weights), &controls_only, &external, &sc.x_init, &sc.x0, config.horizon, None)?;
    let v0 = learned_values(&result.states, &evaluation.deltas[0])?;
    let (l2, l2_unavailable) = match l2_gain_check(&evaluation, topo, weights, &v0) {
        Ok(r) => (Some(r), None),
        Err(e @ Error::TailTooLarge { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };

    let mut max_change: f64 = 0.0;
    let mut max_adv: Option<f64> = None;
    for s in &result.states {
        for (net, norm) in s.weight_norms() {
            if net.starts_with("adversary") {
                max_adv = Some(max_adv.unwrap_or(0.0).max(norm));
            }
            max_change = max_change.max(relative_change(&result.norm_series(s.agent, &net), 0.1));
        }
    }
    let tail = tail_sync_error(&result.log, 0.1);
    let settled = max_change < SETTLE_TOLERANCE;
    let h = result.log.horizon();
    let summary = ReproductionSummary {
        case: mode.name().to_string(),
        final_sync_error_per_agent: (0..model.n_agents()).map(|i| result.log.sync_error(h, i)).collect(),
        tail_sync_error: tail,
        max_weight_relative_change: max_change,
        weights_settled: settled,
        max_adversary_norm: max_adv,
        skipped_updates: result.skipped_updates.clone(),
        saddle_gaps,
        l2_slack: l2.as_ref().map(|r| r.iter().map(|a| a.slack).collect()),
        l2_tail_fraction: l2.as_ref().map(|r| r.iter().map(|a| a.tail_fraction).collect()),
        l2_unavailable,
        l2_initial_values: v0,
        attenuation_margins: attenuation(&sc)?.agent_margins(model.n_agents()),
        converged: tail < config.sync_threshold && settled && max_adv.is_none_or(|a| a < ADVERSARY_NORM_LIMIT),
    };
    Ok(LearningOutcome { result, evaluation, summary })
}

fn figure_files(outdir: &Path, outcome: &LearningOutcome) -> Result<()> {
    let log = &outcome.result.log;
    let na = log.n_agents();
    let mut header = vec!["step".to_string()];
    header.extend((1..=log.n).map(|c| format!("leader_x{c}")));
    for i in 1..=na {
        header.extend((1..=log.n).map(|c| format!("agent{i}_x{c}")));
    }
    let rows = (0..=log.horizon())
        .map(|k| {
            let mut r = vec![k.to_string()];
            r.extend(log.leader[k].iter().map(|v| fmt(*v)));
            for x in &log.states[k] {
                r.extend(x.iter().map(|v| fmt(*v)));
            }
            r
        })
        .collect();
    write_rows(&outdir.join("fig_states.csv"), header, rows)?;

    let mut header = vec!["step".to_string()];
    header.extend((1..=na).map(|i| format!("agent{i}")));
    let rows = (0..=log.horizon())
        .map(|k| std::iter::once(k.to_string()).chain((0..na).map(|i| fmt(log.sync_error(k, i)))).collect())
        .collect();
    write_rows(&outdir.join("fig_sync_errors.csv"), header, rows)?;

    let nets: Vec<(usize, String)> = outcome
        .result
        .states
        .iter()
        .flat_map(|s| s.weight_norms().into_iter().map(move |(n, _)| (s.agent, n)))
        .collect();
    let series: Vec<Vec<f64>> = nets.iter().map(|(i, n)| outcome.result.norm_series(*i, n)).collect();
    let mut header = vec!["step".to_string()];
    header.extend(nets.iter().map(|(i, n)| format!("agent{}_{n}", i + 1)));
    let rows = (0..series.first().map_or(0, |s| s.len()))
        .map(|k| std::iter::once(k.to_string()).chain(series.iter().map(|s| fmt(s[k]))).collect())
        .collect();
    write_rows(&outdir.join("fig_weights.csv"), header, rows)?;

    if let Some(gaps) = &outcome.summary.saddle_gaps {
        let header = vec!["agent".to_string(), "gap_u".to_string(), "gap_w".to_string()];
        let rows = gaps.iter().enumerate().map(|(i, g)| vec![(i + 1).to_string(), fmt(g.gap_u), fmt(g.gap_w)]).collect();
        write_rows(&outdir.join("fig_saddle.csv"), header, rows)?;
    }
    Ok(())
}

/// Writes every artefact of a learning run into `outdir`.
pub fn write_learning_outputs(outdir: &Path, config: &ExperimentConfig, outcome: &LearningOutcome) -> Result<()> {
    fs::create_dir_all(outdir)?;
    let sc = config.build(outcome.result.states[0].mode)?;
    write_json(&outdir.join("config.json"), config)?;
    write_trajectory_csv(&outdir.join("trajectory.csv"), &outcome.result.log)?;
    write_trajectory_csv(&outdir.join("evaluation_trajectory.csv"), &outcome.evaluation)?;
    write_weight_history_csv(&outdir.join("weights.csv"), &outcome.result.weight_history)?;
    figure_files(outdir, outcome)?;
    let m = metrics(
        &outcome.evaluation,
        &sc.topology,
        &sc.weights,
        Some(&outcome.summary.l2_initial_values),
        config.sync_threshold,
    );
    write_json(&outdir.join("metrics.json"), &m)?;
    write_json(&outdir.join("summary.json"), &outcome.summary)?;
    Ok(())
}

/// Runs the benchmark `case` end to end and writes its outputs.
pub fn reproduce_paper(case: Case, outdir: &Path, seed: Option<u64>) -> Result<ReproductionSummary> {
    let mut config = preset(case);
    if let Some(s) = seed {
        config.seed = s;
    }
    let outcome = run_learning(&config, case.mode())?;
    write_learning_outputs(outdir, &config, &outcome)?;
    Ok(outcome.summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainsRecord {
    /// 1-based agent id.
    pub agent: usize,
    pub control: Vec<Vec<f64>>,
    pub disturbance: Vec<Vec<f64>>,
    pub value: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub attenuation: AttenuationReport,
    /// Largest `‖x − 1⊗x_0‖ / (‖δ‖ / σ_min(L+G))` over the run; at most 1 when the bound holds.
    pub disagreement_bound_ratio: f64,
    pub path_consistency_error: f64,
    pub deterministic: bool,
}

fn closed_loop(config: &ExperimentConfig, sc: &Scenario, controls: &[Mat]) -> Result<TrajectoryLog> {
    let policies: Vec<AgentPolicy> =
        controls.iter().map(|k| AgentPolicy::control_only(FeedbackLaw::linear(k))).collect();
    let external = config.disturbances(sc.model.n_agents(), sc.model.q());
    simulate(&sc.model, &sc.topology, Some(&sc.weights), &policies, &external, &sc.x_init, &sc.x0, config.horizon, None)
}

/// Structural checks on the configured closed loop.
pub fn verify(config: &ExperimentConfig) -> Result<VerifyReport> {
    let sc = config.validate()?;
    let controls = config.initial_controls(&sc)?;
    let log = closed_loop(config, &sc, &controls)?;
    let n = sc.model.n();
    let mut ratio: f64 = 0.0;
    for k in 0..=log.horizon() {
        let eps = disagreement(&log.states[k], &log.leader[k]).norm();
        let delta: f64 = log.deltas[k].iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
        let bound = sc.topology.disagreement_bound(delta, n)?;
        if eps > 0.0 {
            ratio = ratio.max(eps / bound);
        }
    }
    let iterated = iterate_error_dynamics(&sc.model, &sc.topology, &log)?;
    let path = iterated
        .iter()
        .zip(&log.deltas)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).amax()))
        .fold(0.0, f64::max);
    let again = closed_loop(config, &sc, &controls)?;
    Ok(VerifyReport { attenuation: attenuation(&sc)?, disagreement_bound_ratio: ratio, path_consistency_error: path, deterministic: again == log })
}

fn json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| Error::Io(e.to_string()))
}

/// Runs the configured algorithm, writes its outputs and returns the summary that was written.
pub fn run_experiment(config: &ExperimentConfig, outdir: &Path) -> Result<serde_json::Value> {
    let sc = config.validate()?;
    fs::create_dir_all(outdir)?;
    let summary = match config.algorithm {
        Algorithm::Simulate => {
            write_json(&outdir.join("config.json"), config)?;
            let log = closed_loop(config, &sc, &config.initial_controls(&sc)?)?;
            write_trajectory_csv(&outdir.join("trajectory.csv"), &log)?;
            let m = metrics(&log, &sc.topology, &sc.weights, None, config.sync_threshold);
            write_json(&outdir.join("metrics.json"), &m)?;
            json(&m)?
        }
        Algorithm::PiCoop | Algorithm::PiNoncoop => {
            write_json(&outdir.join("config.json"), config)?;
            let init = config.initial_controls(&sc)?;
            let eval = config.pi_evaluation();
            let res = match config.algorithm {
                Algorithm::PiCoop => run_pi_coop(&sc.model, &sc.topology, &sc.weights, &init, &eval, &config.pi)?,
                _ => run_pi_noncoop(&sc.model, &sc.topology, &sc.weights, &init, &eval, &config.pi)?,
            };
            write_json(&outdir.join("pi_log.json"), &res.log)?;
            let gains: Vec<GainsRecord> = res
                .gains
                .iter()
                .zip(&res.values)
                .map(|(g, p)| GainsRecord {
                    agent: g.agent + 1,
                    control: mat_to_rows(&g.control),
                    disturbance: mat_to_rows(&g.disturbance_gain()),
                    value: mat_to_rows(p),
                })
                .collect();
            write_json(&outdir.join("gains.json"), &gains)?;
            let controls: Vec<Mat> = res.gains.iter().map(|g| g.control.clone()).collect();
            let log = closed_loop(config, &sc, &controls)?;
            write_trajectory_csv(&outdir.join("trajectory.csv"), &log)?;
            let v0: Vec<f64> = res.values.iter().zip(&log.deltas[0]).map(|(p, d)| d.dot(&(p * d))).collect();
            let m = metrics(&log, &sc.topology, &sc.weights, Some(&v0), config.sync_threshold);
            write_json(&outdir.join("metrics.json"), &m)?;
            json(&m)?
        }
        Algorithm::LearnCoop | Algorithm::LearnNoncoop => {
            let outcome = run_learning(config, config.effective_mode())?;
            write_learning_outputs(outdir, config, &outcome)?;
            json(&outcome.summary)?
        }
        Algorithm::Verify => {
            write_json(&outdir.join("config.json"), config)?;
            let report = verify(config)?;
            write_json(&outdir.join("verify.json"), &report)?;
            json(&report)?
        }
    };
    Ok(summary)
}
