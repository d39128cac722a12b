#![allow(dead_code)]

use graphgame::dynamics::{AgentPolicy, FeedbackLaw, FleetModel};
use graphgame::game::{GameMode, GameWeights};
use graphgame::graph::{Edge, GraphTopology};
use graphgame::linalg::{spectral_radius, Mat, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn m1(x: f64) -> Mat {
    Mat::from_element(1, 1, x)
}

pub fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

/// Four followers with agent 4 pinned; the leader-follower benchmark.
pub fn benchmark(mode: GameMode, beta: f64) -> (FleetModel, GraphTopology, GameWeights, Vec<Vector>, Vector) {
    let a = Mat::from_row_slice(2, 2, &[0.995, 0.09983, -0.09983, 0.995]);
    let col = |x: f64, y: f64| Mat::from_column_slice(2, 1, &[x, y]);
    let model = FleetModel::new(
        a,
        vec![col(0.2047, 0.08984), col(0.2147, 0.2895), col(0.2097, 0.1897), col(0.2, 0.1)],
        vec![col(0.21, 0.0984), col(0.32, 0.084), col(0.14, 0.072), col(0.16, 0.024)],
    )
    .unwrap();
    let edges = [
        Edge::new(2, 1, 0.8),
        Edge::new(4, 1, 0.7),
        Edge::new(3, 2, 0.6),
        Edge::new(1, 2, 0.6),
        Edge::new(1, 3, 0.8),
        Edge::new(1, 4, 0.4),
    ];
    let topo = GraphTopology::build(4, &edges, &[4]).unwrap();
    let w = GameWeights::uniform(&topo, mode, Mat::identity(2, 2), m1(1.0), m1(1.0), m1(1.0), m1(1.0), beta).unwrap();
    let xs = vec![v(&[0.8, 1.1]), v(&[0.9, 0.3]), v(&[1.2, 0.8]), v(&[0.9, 0.5])];
    (model, topo, w, xs, v(&[0.4, 0.5]))
}

/// A random fleet built from `seed`: 2–4 agents on a pinned chain plus random
/// extra edges, `n, p, q ∈ {1, 2}`, `ρ(A) ≤ 0.98` and identity weights.
pub struct RandomFleet {
    pub model: FleetModel,
    pub topology: GraphTopology,
    pub weights: GameWeights,
    pub x_init: Vec<Vector>,
    pub x0: Vector,
    pub rng: ChaCha8Rng,
}

pub fn random_fleet(seed: u64, mode: GameMode, beta: f64) -> Option<RandomFleet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = rng.random_range(2..=4);
    let n = rng.random_range(1..=2);
    let p = rng.random_range(1..=2);
    let q = rng.random_range(1..=2);
    let draw = |r: usize, c: usize, rng: &mut ChaCha8Rng| Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let mut a = draw(n, n, &mut rng);
    let rho = spectral_radius(&a);
    if rho > 0.98 {
        a *= 0.98 / rho;
    }
    let b = (0..agents).map(|_| draw(n, p, &mut rng)).collect();
    let e = (0..agents).map(|_| draw(n, q, &mut rng)).collect();
    let model = FleetModel::new(a, b, e).ok()?;
    let mut edges: Vec<Edge> = (2..=agents).map(|i| Edge::new(i - 1, i, rng.random_range(0.1..1.0))).collect();
    for to in 1..=agents {
        for from in 1..=agents {
            if from != to && from + 1 != to && rng.random_bool(0.3) {
                edges.push(Edge::new(from, to, rng.random_range(0.1..1.0)));
            }
        }
    }
    let topology = GraphTopology::build(agents, &edges, &[1]).ok()?;
    let weights = GameWeights::uniform(
        &topology,
        mode,
        Mat::identity(n, n),
        Mat::identity(p, p),
        Mat::identity(q, q),
        Mat::identity(p, p),
        Mat::identity(q, q),
        beta,
    )
    .ok()?;
    let x_init = (0..agents).map(|_| Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).collect();
    let x0 = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    Some(RandomFleet { model, topology, weights, x_init, x0, rng })
}

impl RandomFleet {
    pub fn vector(&mut self, len: usize) -> Vector {
        let rng = &mut self.rng;
        Vector::from_fn(len, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Small random linear control laws.
    pub fn policies(&mut self, scale: f64) -> Vec<AgentPolicy> {
        let (n, p) = (self.model.n(), self.model.p());
        (0..self.model.n_agents())
            .map(|_| {
                let rng = &mut self.rng;
                let k = Mat::from_fn(p, n, |_, _| scale * rng.random_range(-1.0..1.0));
                AgentPolicy::control_only(FeedbackLaw::linear(&k))
            })
            .collect()
    }
}
