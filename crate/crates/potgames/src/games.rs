//! Experiment game families and dataset synthesis.
//!
//! Two construction paths produce [`AffineGameForm`]s:
//!
//! - **Cournot oligopoly** ([`cournot_form`]): `n` producers choose
//!   quantities `xᵢ ≥ 0`; the inverse demand function is `F(x) = a − b·Σxⱼ`
//!   and `θ = (a, b)`. The potential has Hessian `R = b(I + J)` and linear
//!   term `c = μ − a·1`, where the context `μ = (c₁, …, cₙ)` holds the unit
//!   production costs.
//! - **Congestion routing** ([`congestion_form`]): `n` agents route demand
//!   through a directed graph; edge costs are `C = L·θ` with a nonnegative
//!   factor matrix `L`. Variable `(i, e)` sits at index `i·|E| + e`. The
//!   context `μ` has length `n·|V|`: entry `i·|V| + v` is agent `i`'s net
//!   supply at node `v` (`+d` at its source, `−d` at its sink, `0`
//!   elsewhere), so the flow-conservation right-hand side is a selection of
//!   `μ`. One conservation row per weakly connected component (the
//!   largest-index node's) is dropped for each agent: those rows are implied
//!   by the others, and keeping them would break constraint independence.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use petgraph::algo::has_path_connecting;
use petgraph::graph::{DiGraph, NodeIndex};
use petgraph::unionfind::UnionFind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{
    project_theta, AffineGameForm, ContextVector, CtxMatrix, CtxVector, RationalityVector,
};
use crate::qp::{solve_potential, DEFAULT_KKT_TOL};
use crate::{Error, Result};

/// Lower box bound keeping the Cournot demand slope, and with it `R`,
/// positive along the whole training trajectory.
pub const COURNOT_MIN_SLOPE: f64 = 1e-3;
/// Lower bound enforced on every congestion edge cost `(Lθ)ₑ` via the box.
pub const CONGESTION_MIN_EDGE_COST: f64 = 1e-3;

/// One observation: a context and the observed (noisy) equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct Datapoint {
    pub mu: ContextVector,
    pub x_obs: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub game: String,
    pub agents: usize,
    pub vars_per_agent: usize,
    pub theta_dim: usize,
    pub ctx_dim: usize,
    pub sigma: f64,
    pub seed: u64,
}

/// Observed pairs with a train/test split (defaults to 90/10).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub points: Vec<Datapoint>,
    /// Indices of the test split; the rest is the training split.
    pub test_idx: BTreeSet<usize>,
    /// Generating parameters, carried for evaluation only.
    pub theta_true: Option<DVector<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn train_points(&self) -> Vec<&Datapoint> {
        self.points
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.test_idx.contains(i))
            .map(|(_, p)| p)
            .collect()
    }

    pub fn test_points(&self) -> Vec<&Datapoint> {
        self.test_idx.iter().map(|i| &self.points[*i]).collect()
    }
}

/// Cournot instance description: agent count and true `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CournotSpec {
    pub agents: usize,
    /// True rationality parameters `(a, b)` used for data generation.
    pub theta_true: DVector<f64>,
}

impl CournotSpec {
    pub fn new(agents: usize, a: f64, b: f64) -> Self {
        Self {
            agents,
            theta_true: DVector::from_row_slice(&[a, b]),
        }
    }

    /// Draws `(a, b)` as moduli of standard normals, projected into the box.
    pub fn sample(agents: usize, rng: &mut ChaCha8Rng) -> Self {
        let a: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        let b: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        let form = cournot_form(agents);
        let theta = project_theta(&form.rationality(DVector::from_row_slice(&[a, b])));
        Self {
            agents,
            theta_true: theta.theta,
        }
    }

    pub fn form(&self) -> AffineGameForm {
        cournot_form(self.agents)
    }

    /// Cost sampler: each unit cost is the modulus of a standard normal.
    pub fn context_sampler(&self) -> impl FnMut(&mut ChaCha8Rng) -> Result<ContextVector> {
        let n = self.agents;
        move |rng: &mut ChaCha8Rng| {
            let costs = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal).abs());
            Ok(ContextVector::new(costs))
        }
    }
}

/// Builds the Cournot form for `n ≥ 2` agents: `p = 2` with `θ = (a, b)`,
/// `R = b(I + J)`, `c = μ − a·1`, and nonnegativity constraints `x ≥ 0`.
pub fn cournot_form(n: usize) -> AffineGameForm {
    assert!(n >= 2, "Cournot games need at least two agents");
    let iplusj = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 } else { 1.0 });
    let mut c_theta = DMatrix::zeros(n, 2);
    for i in 0..n {
        c_theta[(i, 0)] = -1.0;
    }
    AffineGameForm {
        game: "cournot".into(),
        agents: n,
        vars_per_agent: 1,
        ctx_dim: n,
        r0: CtxMatrix::constant(DMatrix::zeros(n, n)),
        r_theta: vec![
            CtxMatrix::constant(DMatrix::zeros(n, n)),
            CtxMatrix::constant(iplusj),
        ],
        c0: CtxVector {
            base: DVector::zeros(n),
            coeff: Some(DMatrix::identity(n, n)),
        },
        c_theta: CtxMatrix::constant(c_theta),
        a: CtxMatrix::constant(-DMatrix::<f64>::identity(n, n)),
        b: CtxVector::constant(DVector::zeros(n)),
        eq_rows: BTreeSet::new(),
        theta_lower: DVector::from_row_slice(&[f64::NEG_INFINITY, COURNOT_MIN_SLOPE]),
        theta_upper: DVector::from_row_slice(&[f64::INFINITY, f64::INFINITY]),
    }
}

/// One routing task: move `demand` units from `source` to `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Commodity {
    pub source: usize,
    pub target: usize,
    pub demand: f64,
}

/// Congestion instance description.
#[derive(Debug, Clone, PartialEq)]
pub struct CongestionSpec {
    pub nodes: usize,
    /// Directed edges `(u, v)`; parallel edges are allowed.
    pub edges: Vec<(usize, usize)>,
    /// Nonnegative factor matrix, `|E| × p`, relating edges to `θ`.
    pub l_factors: DMatrix<f64>,
    /// Nominal commodities (the context sampler may redraw endpoints).
    pub commodities: Vec<Commodity>,
    pub theta_true: DVector<f64>,
}

impl CongestionSpec {
    pub fn agents(&self) -> usize {
        self.commodities.len()
    }

    pub fn theta_dim(&self) -> usize {
        self.l_factors.ncols()
    }

    fn graph(&self) -> DiGraph<(), ()> {
        let mut g = DiGraph::new();
        let idx: Vec<NodeIndex> = (0..self.nodes).map(|_| g.add_node(())).collect();
        for (u, v) in &self.edges {
            g.add_edge(idx[*u], idx[*v], ());
        }
        g
    }

    /// Ordered node pairs `(s, t)` joined by a directed path.
    pub fn connected_pairs(&self) -> Vec<(usize, usize)> {
        let g = self.graph();
        let mut pairs = Vec::new();
        for s in 0..self.nodes {
            for t in 0..self.nodes {
                if s != t && has_path_connecting(&g, NodeIndex::new(s), NodeIndex::new(t), None) {
                    pairs.push((s, t));
                }
            }
        }
        pairs
    }

    /// Checks that every nominal commodity is routable.
    pub fn validate(&self) -> Result<()> {
        let g = self.graph();
        for (i, c) in self.commodities.iter().enumerate() {
            if c.source >= self.nodes || c.target >= self.nodes || c.source == c.target {
                return Err(Error::InvalidProblem(format!(
                    "commodity {i} endpoints ({}, {}) invalid for {} nodes",
                    c.source, c.target, self.nodes
                )));
            }
            if !has_path_connecting(&g, NodeIndex::new(c.source), NodeIndex::new(c.target), None) {
                return Err(Error::DisconnectedCommodity {
                    agent: i,
                    from: c.source,
                    to: c.target,
                });
            }
        }
        if self.edges.is_empty() {
            return Err(Error::InvalidProblem("graph has no edges".into()));
        }
        Ok(())
    }

    /// Encodes commodities into the node-demand context layout.
    pub fn encode_context(&self, commodities: &[Commodity]) -> ContextVector {
        let mut mu = DVector::zeros(self.agents() * self.nodes);
        for (i, c) in commodities.iter().enumerate() {
            mu[i * self.nodes + c.source] += c.demand;
            mu[i * self.nodes + c.target] -= c.demand;
        }
        ContextVector::new(mu)
    }

    /// Context of the nominal commodities.
    pub fn nominal_context(&self) -> ContextVector {
        self.encode_context(&self.commodities)
    }

    /// Context sampler: per agent, endpoints drawn uniformly among connected
    /// ordered pairs and demand drawn as the modulus of a standard normal.
    pub fn context_sampler(&self) -> Result<impl FnMut(&mut ChaCha8Rng) -> Result<ContextVector>> {
        self.validate()?;
        let pairs = self.connected_pairs();
        if pairs.is_empty() {
            return Err(Error::GraphSampling(
                "no connected ordered node pairs".into(),
            ));
        }
        let agents = self.agents();
        let spec = self.clone();
        Ok(move |rng: &mut ChaCha8Rng| {
            let commodities: Vec<Commodity> = (0..agents)
                .map(|_| {
                    let (source, target) = pairs[rng.gen_range(0..pairs.len())];
                    let demand = rng.sample::<f64, _>(StandardNormal).abs();
                    Commodity {
                        source,
                        target,
                        demand,
                    }
                })
                .collect();
            Ok(spec.encode_context(&commodities))
        })
    }
}

/// Samples a directed Erdős–Rényi graph: every ordered pair `(u, v)`, `u ≠ v`,
/// is an edge independently with probability `p_edge`.
pub fn erdos_renyi(n_nodes: usize, p_edge: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    assert!(n_nodes >= 2, "need at least two nodes");
    assert!(p_edge > 0.0 && p_edge <= 1.0, "p_edge must be in (0, 1]");
    let mut edges = Vec::new();
    for u in 0..n_nodes {
        for v in 0..n_nodes {
            if u != v && rng.gen_bool(p_edge) {
                edges.push((u, v));
            }
        }
    }
    edges
}

fn strongly_connected(nodes: usize, edges: &[(usize, usize)]) -> bool {
    let mut g = DiGraph::<(), ()>::new();
    let idx: Vec<NodeIndex> = (0..nodes).map(|_| g.add_node(())).collect();
    for (u, v) in edges {
        g.add_edge(idx[*u], idx[*v], ());
    }
    petgraph::algo::kosaraju_scc(&g).len() == 1
}

/// Samples a full congestion instance: an Erdős–Rényi graph (resampled until
/// strongly connected, so every sampled commodity is routable), a nonnegative
/// column-normalized factor matrix with `|N(0,1)|` entries, commodities with
/// `|N(0,1)|` demands, and a true `θ` projected into the box.
pub fn sample_congestion_spec(
    nodes: usize,
    p_edge: f64,
    agents: usize,
    theta_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CongestionSpec> {
    const MAX_RESAMPLES: usize = 64;
    let mut edges = None;
    for _ in 0..MAX_RESAMPLES {
        let candidate = erdos_renyi(nodes, p_edge, rng);
        if !candidate.is_empty() && strongly_connected(nodes, &candidate) {
            edges = Some(candidate);
            break;
        }
    }
    let edges = edges.ok_or_else(|| {
        Error::GraphSampling(format!(
            "no strongly connected graph in {MAX_RESAMPLES} samples (nodes {nodes}, p {p_edge})"
        ))
    })?;
    let ne = edges.len();
    let mut l = DMatrix::from_fn(ne, theta_dim, |_, _| {
        rng.sample::<f64, _>(StandardNormal).abs()
    });
    for j in 0..theta_dim {
        let s: f64 = l.column(j).iter().sum();
        if s > 0.0 {
            for i in 0..ne {
                l[(i, j)] /= s;
            }
        }
    }
    let commodities: Vec<Commodity> = (0..agents)
        .map(|_| {
            let source = rng.gen_range(0..nodes);
            let mut target = rng.gen_range(0..nodes);
            while target == source {
                target = rng.gen_range(0..nodes);
            }
            Commodity {
                source,
                target,
                demand: rng.sample::<f64, _>(StandardNormal).abs(),
            }
        })
        .collect();
    let theta_raw = DVector::from_fn(theta_dim, |_, _| rng.sample::<f64, _>(StandardNormal).abs());
    let mut spec = CongestionSpec {
        nodes,
        edges,
        l_factors: l,
        commodities,
        theta_true: theta_raw,
    };
    let form = congestion_form(&spec)?;
    spec.theta_true = project_theta(&form.rationality(spec.theta_true.clone())).theta;
    Ok(spec)
}

/// Builds the congestion form: per-edge Hessian blocks `Cₑ(I + J)` assembled
/// from the columns of `L`, flow-conservation equalities with the dropped-row
/// convention described in the module docs, and `x ≥ 0`.
pub fn congestion_form(spec: &CongestionSpec) -> Result<AffineGameForm> {
    spec.validate()?;
    let n = spec.agents();
    let nv_nodes = spec.nodes;
    let ne = spec.edges.len();
    let p = spec.theta_dim();
    if n == 0 || p == 0 {
        return Err(Error::InvalidProblem(
            "congestion spec needs agents and parameters".into(),
        ));
    }
    if spec.l_factors.nrows() != ne {
        return Err(Error::Dimension {
            field: "l_factors",
            expected: format!("{ne} rows"),
            actual: spec.l_factors.nrows().to_string(),
        });
    }
    if spec.l_factors.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidProblem(
            "factor matrix must be nonnegative".into(),
        ));
    }
    let row_sums: Vec<f64> = (0..ne)
        .map(|e| spec.l_factors.row(e).iter().sum::<f64>())
        .collect();
    let min_row_sum = row_sums.iter().copied().fold(f64::INFINITY, f64::min);
    if min_row_sum <= 1e-12 {
        return Err(Error::InvalidProblem(
            "factor matrix has an all-zero edge row; its cost cannot be kept positive".into(),
        ));
    }

    // One conservation row per weakly connected component is redundant.
    let mut uf = UnionFind::<usize>::new(nv_nodes);
    for (u, v) in &spec.edges {
        uf.union(*u, *v);
    }
    let mut best: std::collections::BTreeMap<usize, usize> = Default::default();
    for v in 0..nv_nodes {
        let root = uf.find(v);
        let e = best.entry(root).or_insert(v);
        if v > *e {
            *e = v;
        }
    }
    let dropped: BTreeSet<usize> = best.values().copied().collect();
    let kept: Vec<usize> = (0..nv_nodes).filter(|v| !dropped.contains(v)).collect();
    let rows_per_agent = kept.len() + ne;
    let nm = n * ne;
    let total_rows = n * rows_per_agent;

    // R_theta[j] = Σₑ L[e, j] · Bₑ with Bₑ[(i,e),(i',e)] = 1 + δ.
    let mut r_theta = Vec::with_capacity(p);
    for j in 0..p {
        let mut rj = DMatrix::zeros(nm, nm);
        for e in 0..ne {
            let w = spec.l_factors[(e, j)];
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                for i2 in 0..n {
                    rj[(i * ne + e, i2 * ne + e)] += if i == i2 { 2.0 * w } else { w };
                }
            }
        }
        r_theta.push(CtxMatrix::constant(rj));
    }

    let ctx_dim = n * nv_nodes;
    let mut a = DMatrix::zeros(total_rows, nm);
    let mut b_mu = DMatrix::zeros(total_rows, ctx_dim);
    let mut eq_rows = BTreeSet::new();
    for i in 0..n {
        let base_row = i * rows_per_agent;
        for (local, v) in kept.iter().enumerate() {
            let row = base_row + local;
            for (e, (u, w)) in spec.edges.iter().enumerate() {
                if u == v {
                    a[(row, i * ne + e)] += 1.0;
                }
                if w == v {
                    a[(row, i * ne + e)] -= 1.0;
                }
            }
            b_mu[(row, i * nv_nodes + v)] = 1.0;
            eq_rows.insert(row);
        }
        for e in 0..ne {
            let row = base_row + kept.len() + e;
            a[(row, i * ne + e)] = -1.0;
        }
    }

    let lower = CONGESTION_MIN_EDGE_COST / min_row_sum;
    let form = AffineGameForm {
        game: "congestion".into(),
        agents: n,
        vars_per_agent: ne,
        ctx_dim,
        r0: CtxMatrix::constant(DMatrix::zeros(nm, nm)),
        r_theta,
        c0: CtxVector::constant(DVector::zeros(nm)),
        c_theta: CtxMatrix::constant(DMatrix::zeros(nm, p)),
        a: CtxMatrix::constant(a),
        b: CtxVector {
            base: DVector::zeros(total_rows),
            coeff: Some(b_mu),
        },
        eq_rows,
        theta_lower: DVector::from_element(p, lower),
        theta_upper: DVector::from_element(p, f64::INFINITY),
    };
    form.validate()?;
    Ok(form)
}

/// Synthesizes a dataset: for each point, draw a context, solve the exact
/// equilibrium at `theta_true`, and add `N(0, σ²I)` noise to the primal
/// observation. Per-point randomness comes from independent streams of the
/// master seed, so regeneration is order-independent. The last `round(K/10)`
/// points form the test split.
pub fn generate_dataset<F>(
    form: &AffineGameForm,
    theta_true: &RationalityVector,
    mut context_sampler: F,
    count: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<ContextVector>,
{
    if count == 0 {
        return Err(Error::EmptyData("requested zero datapoints".into()));
    }
    if sigma < 0.0 {
        return Err(Error::InvalidProblem("sigma must be nonnegative".into()));
    }
    form.validate()?;
    let nm = form.num_vars();
    let mut points = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng_k = ChaCha8Rng::seed_from_u64(seed);
        rng_k.set_stream(k as u64 + 1);
        let mu = context_sampler(&mut rng_k)?;
        let problem = form.assemble(theta_true, &mu)?;
        let sol = solve_potential(&problem, DEFAULT_KKT_TOL).map_err(|e| Error::Training {
            iteration: 0,
            datapoint: k,
            source: Box::new(e),
            dump: Some(crate::fileio::write_problem_dump(&problem)),
        })?;
        let noise = DVector::from_fn(nm, |_, _| sigma * rng_k.sample::<f64, _>(StandardNormal));
        points.push(Datapoint {
            mu,
            x_obs: sol.x + noise,
        });
    }
    let n_test = ((count as f64) * 0.1).round() as usize;
    let test_idx: BTreeSet<usize> = (count - n_test..count).collect();
    Ok(Dataset {
        meta: DatasetMeta {
            game: form.game.clone(),
            agents: form.agents,
            vars_per_agent: form.vars_per_agent,
            theta_dim: form.theta_dim(),
            ctx_dim: form.ctx_dim,
            sigma,
            seed,
        },
        points,
        test_idx,
        theta_true: Some(theta_true.theta.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::best_response_gap;

    #[test]
    fn cournot_hessian_matches_quoted_potential() {
        let form = cournot_form(2);
        let theta = form.rationality(DVector::from_row_slice(&[0.4, 1.0]));
        let mu = ContextVector::new(DVector::zeros(2));
        let p = form.assemble(&theta, &mu).unwrap();
        assert_eq!(p.r, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
    }

    #[test]
    fn cournot_potential_gradient_equals_utility_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let form = cournot_form(n);
        for _ in 0..100 {
            let a: f64 = rng.gen_range(0.0..2.0);
            let b: f64 = rng.gen_range(0.01..2.0);
            let theta = form.rationality(DVector::from_row_slice(&[a, b]));
            let mu = ContextVector::new(DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.5)));
            let x = DVector::from_fn(n, |_, _| rng.gen_range(0.0..2.0));
            let p = form.assemble(&theta, &mu).unwrap();
            let grad = &p.r * &x + &p.c;
            let total: f64 = x.iter().sum();
            for i in 0..n {
                // ∂uᵢ/∂xᵢ = cᵢ − a + b·xᵢ + b·Σⱼxⱼ
                let expected = mu.mu[i] - a + b * x[i] + b * total;
                assert!(
                    (grad[i] - expected).abs() <= 1e-10 * (1.0 + expected.abs()),
                    "agent {i}: {} vs {expected}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn cournot_symmetric_equilibrium_closed_form() {
        let n = 4;
        let (a, b, c) = (2.0, 1.0, 0.5);
        let form = cournot_form(n);
        let theta = form.rationality(DVector::from_row_slice(&[a, b]));
        let mu = ContextVector::new(DVector::from_element(n, c));
        let p = form.assemble(&theta, &mu).unwrap();
        let sol = solve_potential(&p, DEFAULT_KKT_TOL).unwrap();
        let expected = (a - c) / (b * (n as f64 + 1.0));
        for i in 0..n {
            assert!((sol.x[i] - expected).abs() < 1e-8);
        }
        let gaps = best_response_gap(&form, &theta, &mu, &sol.x).unwrap();
        assert!(gaps.amax() < 1e-8);
    }

    fn single_edge_spec() -> CongestionSpec {
        CongestionSpec {
            nodes: 2,
            edges: vec![(0, 1)],
            l_factors: DMatrix::from_element(1, 1, 1.0),
            commodities: vec![Commodity {
                source: 0,
                target: 1,
                demand: 1.0,
            }],
            theta_true: DVector::from_element(1, 1.0),
        }
    }

    #[test]
    fn single_edge_routes_full_demand_regardless_of_theta() {
        let spec = single_edge_spec();
        let form = congestion_form(&spec).unwrap();
        let mu = spec.nominal_context();
        for t in [0.7, 1.0, 3.5] {
            let theta = form.rationality(DVector::from_element(1, t));
            let p = form.assemble(&theta, &mu).unwrap();
            let sol = solve_potential(&p, DEFAULT_KKT_TOL).unwrap();
            assert!((sol.x[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn parallel_edges_split_demand_evenly() {
        let spec = CongestionSpec {
            nodes: 2,
            edges: vec![(0, 1), (0, 1)],
            l_factors: DMatrix::from_element(2, 1, 1.0),
            commodities: vec![Commodity {
                source: 0,
                target: 1,
                demand: 1.0,
            }],
            theta_true: DVector::from_element(1, 1.0),
        };
        let form = congestion_form(&spec).unwrap();
        let theta = form.rationality(spec.theta_true.clone());
        let p = form.assemble(&theta, &spec.nominal_context()).unwrap();
        let sol = solve_potential(&p, DEFAULT_KKT_TOL).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-9);
        assert!((sol.x[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn congestion_potential_gradient_equals_utility_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = sample_congestion_spec(6, 0.4, 3, 2, &mut rng).unwrap();
        let form = congestion_form(&spec).unwrap();
        let ne = spec.edges.len();
        let n = spec.agents();
        let mu = spec.nominal_context();
        for _ in 0..100 {
            let theta_v = DVector::from_fn(2, |_, _| rng.gen_range(0.05..1.5));
            let theta = form.rationality(theta_v.clone());
            let x = DVector::from_fn(n * ne, |_, _| rng.gen_range(0.0..2.0));
            let p = form.assemble(&theta, &mu).unwrap();
            let grad = &p.r * &x + &p.c;
            let costs = &spec.l_factors * &theta_v;
            for i in 0..n {
                for e in 0..ne {
                    let tot: f64 = (0..n).map(|j| x[j * ne + e]).sum();
                    // ∂uᵢ/∂x_{ie} = Cₑ(Σⱼ xⱼₑ + xᵢₑ)
                    let expected = costs[e] * (tot + x[i * ne + e]);
                    let got = grad[i * ne + e];
                    assert!(
                        (got - expected).abs() <= 1e-10 * (1.0 + expected.abs()),
                        "({i},{e}): {got} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn congestion_equilibrium_conserves_flow_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = sample_congestion_spec(8, 0.3, 3, 3, &mut rng).unwrap();
        let form = congestion_form(&spec).unwrap();
        let theta = form.rationality(spec.theta_true.clone());
        let mut sampler = spec.context_sampler().unwrap();
        for s in 0..5u64 {
            let mut rng_s = ChaCha8Rng::seed_from_u64(100 + s);
            let mu = sampler(&mut rng_s).unwrap();
            let p = form.assemble(&theta, &mu).unwrap();
            let sol = solve_potential(&p, DEFAULT_KKT_TOL).unwrap();
            let slack = p.slack(&sol.x);
            for row in &p.eq_rows {
                assert!(slack[*row].abs() <= 1e-9, "row {row}: {}", slack[*row]);
            }
            assert!(sol.x.min() >= -1e-9);
        }
    }

    #[test]
    fn disconnected_commodity_is_rejected() {
        let spec = CongestionSpec {
            nodes: 3,
            edges: vec![(0, 1)],
            l_factors: DMatrix::from_element(1, 1, 1.0),
            commodities: vec![Commodity {
                source: 1,
                target: 2,
                demand: 1.0,
            }],
            theta_true: DVector::from_element(1, 1.0),
        };
        assert!(matches!(
            congestion_form(&spec),
            Err(Error::DisconnectedCommodity {
                agent: 0,
                from: 1,
                to: 2
            })
        ));
    }

    #[test]
    fn complete_graph_when_p_edge_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edges = erdos_renyi(4, 1.0, &mut rng);
        assert_eq!(edges.len(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edges = erdos_renyi(2, 1.0, &mut rng);
        assert_eq!(edges, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn erdos_renyi_edge_count_matches_binomial_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 10_000;
        let (n, p) = (8, 0.3);
        let pairs = (n * (n - 1)) as f64;
        let mut total = 0usize;
        for _ in 0..trials {
            total += erdos_renyi(n, p, &mut rng).len();
        }
        let mean = total as f64 / trials as f64;
        let expected = pairs * p;
        let sd_of_mean = (pairs * p * (1.0 - p)).sqrt() / (trials as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * sd_of_mean,
            "mean {mean}, expected {expected} ± {}",
            3.0 * sd_of_mean
        );
    }

    #[test]
    fn noiseless_dataset_contains_exact_equilibria() {
        let spec = CournotSpec::new(3, 1.2, 0.9);
        let form = spec.form();
        let theta = form.rationality(spec.theta_true.clone());
        let ds = generate_dataset(&form, &theta, spec.context_sampler(), 10, 0.0, 42).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.test_idx.len(), 1);
        for point in &ds.points {
            let gaps = best_response_gap(&form, &theta, &point.mu, &point.x_obs).unwrap();
            assert!(gaps.amax() <= 1e-6);
        }
    }

    #[test]
    fn ninety_ten_split_and_determinism() {
        let spec = CournotSpec::new(2, 1.0, 1.0);
        let form = spec.form();
        let theta = form.rationality(spec.theta_true.clone());
        let ds1 = generate_dataset(&form, &theta, spec.context_sampler(), 100, 0.1, 7).unwrap();
        let ds2 = generate_dataset(&form, &theta, spec.context_sampler(), 100, 0.1, 7).unwrap();
        assert_eq!(ds1.test_idx.len(), 10);
        assert_eq!(ds1.train_points().len(), 90);
        assert_eq!(ds1, ds2);
        let ds3 = generate_dataset(&form, &theta, spec.context_sampler(), 100, 0.1, 8).unwrap();
        assert_ne!(ds1, ds3);
    }

    #[test]
    fn noise_second_moment_matches_sigma() {
        let spec = CournotSpec::new(2, 1.5, 1.0);
        let form = spec.form();
        let theta = form.rationality(spec.theta_true.clone());
        let sigma = 0.1;
        let trials = 10_000;
        let ds =
            generate_dataset(&form, &theta, spec.context_sampler(), trials, sigma, 21).unwrap();
        // Re-solve each context to recover the exact equilibrium.
        let mut total = 0.0;
        for point in &ds.points {
            let p = form.assemble(&theta, &point.mu).unwrap();
            let sol = solve_potential(&p, DEFAULT_KKT_TOL).unwrap();
            total += (&point.x_obs - &sol.x).norm_squared();
        }
        let nm = form.num_vars() as f64;
        let mean = total / trials as f64;
        let expected = sigma * sigma * nm;
        // Var(‖ε‖²) = 2σ⁴·nm.
        let sd_of_mean = (2.0 * sigma.powi(4) * nm).sqrt() / (trials as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * sd_of_mean,
            "mean {mean}, expected {expected} ± {}",
            3.0 * sd_of_mean
        );
    }
}
