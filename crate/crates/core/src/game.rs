//! Linear-quadratic game specifications, linear feedback policies and the
//! distributed quadratic mean-field cost family.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MatrixSeries, ScalarSeries, TimeGrid};

/// Absolute tolerance on entries for the symmetry rule.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Per-agent quadratic costs of an LQ game (value uses the ½ convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCost {
    /// n_x × n_x state cost.
    pub q: MatrixSeries,
    /// n_a × n_a control cost over the joint action.
    pub r: MatrixSeries,
    /// n_x × n_x terminal cost.
    pub g: DMatrix<f64>,
}

/// Which feedback gains an agent may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClass {
    /// `a_i = K_i(t) x` with `K_i` acting on the full state.
    #[default]
    Full,
    /// Agent `i` feeds back on its own state block only; `state_blocks[i]`
    /// is the dimension of that block.
    Distributed { state_blocks: Vec<usize> },
}

/// Coefficients of an N-agent LQ game
/// `dX = (A X + B K X) dt + sigma dW`,
/// `V_i = ½ E[∫ Xᵀ Q_i X + (K X)ᵀ R_i (K X) ds + X_Tᵀ G_i X_T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqGameSpec {
    pub grid: TimeGrid,
    /// Control dimensions k_1..k_N.
    pub control_dims: Vec<usize>,
    pub a: MatrixSeries,
    pub b: MatrixSeries,
    pub sigma: DMatrix<f64>,
    pub agents: Vec<AgentCost>,
    #[serde(default)]
    pub policy_class: PolicyClass,
}

/// One broken invariant found by [`LqGameSpec::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub node: Option<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(m) => write!(f, "{} {} at node {}", self.field, self.rule, m),
            None => write!(f, "{} {}", self.field, self.rule),
        }
    }
}

fn violation(field: impl Into<String>, node: Option<usize>, rule: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        node,
        rule: rule.into(),
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let mut worst = 0.0_f64;
    for r in 0..m.nrows() {
        for c in (r + 1)..m.ncols() {
            worst = worst.max((m[(r, c)] - m[(c, r)]).abs());
        }
    }
    worst
}

fn finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

impl LqGameSpec {
    pub fn n_agents(&self) -> usize {
        self.control_dims.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape().0
    }

    pub fn control_dim(&self) -> usize {
        self.control_dims.iter().sum()
    }

    pub fn noise_dim(&self) -> usize {
        self.sigma.ncols()
    }

    /// Rows of the joint action belonging to agent `i`.
    pub fn control_range(&self, i: usize) -> Range<usize> {
        let start: usize = self.control_dims[..i].iter().sum();
        start..start + self.control_dims[i]
    }

    /// State columns agent `i` is allowed to feed back on.
    pub fn feedback_range(&self, i: usize) -> Range<usize> {
        match &self.policy_class {
            PolicyClass::Full => 0..self.state_dim(),
            PolicyClass::Distributed { state_blocks } => {
                let start: usize = state_blocks[..i].iter().sum();
                start..start + state_blocks[i]
            }
        }
    }

    /// Column block `B_i` at node `m`.
    pub fn b_block(&self, i: usize, m: usize) -> DMatrix<f64> {
        let r = self.control_range(i);
        self.b.node(m).columns(r.start, r.len()).into_owned()
    }

    pub fn sigma_sigma_t(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }

    /// Whether every agent has the same costs (a team game).
    pub fn is_team(&self) -> bool {
        self.agents.windows(2).all(|w| w[0] == w[1])
    }

    /// List every broken invariant. Never fails.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let nodes = self.grid.len();
        let n_agents = self.n_agents();
        let (ax, ay) = self.a.shape();
        if ax != ay {
            out.push(violation("A", None, "not square"));
        }
        let nx = ax;
        let na = self.control_dim();
        if n_agents == 0 {
            out.push(violation("control_dims", None, "must name at least one agent"));
        }
        if self.control_dims.contains(&0) {
            out.push(violation("control_dims", None, "zero control dimension"));
        }
        if self.agents.len() != n_agents {
            out.push(violation(
                "agents",
                None,
                format!("count {} does not match control_dims {}", self.agents.len(), n_agents),
            ));
        }
        for (name, s) in [("A", &self.a), ("B", &self.b)] {
            if !s.fits(nodes) {
                out.push(violation(name, None, "sample count is neither 1 nor M+1"));
            }
        }
        let (bx, ba) = self.b.shape();
        if bx != nx {
            out.push(violation("B", None, "row count differs from state dimension"));
        }
        if ba != na {
            out.push(violation("B", None, "block partition mismatch"));
        }
        if self.sigma.nrows() != nx {
            out.push(violation("sigma", None, "row count differs from state dimension"));
        }
        if !finite(&self.sigma) {
            out.push(violation("sigma", None, "not finite"));
        }
        for (name, s) in [("A", &self.a), ("B", &self.b)] {
            for (m, sample) in s.samples().iter().enumerate() {
                if !finite(sample) {
                    out.push(violation(name, Some(m), "not finite"));
                }
            }
        }
        for (i, c) in self.agents.iter().enumerate() {
            let label = i + 1;
            for (name, s, dim) in [("Q", &c.q, nx), ("R", &c.r, na)] {
                let field = format!("{name}[{label}]");
                if !s.fits(nodes) {
                    out.push(violation(&field, None, "sample count is neither 1 nor M+1"));
                }
                if s.shape() != (dim, dim) {
                    out.push(violation(
                        &field,
                        None,
                        if name == "R" {
                            "block partition mismatch"
                        } else {
                            "shape mismatch"
                        },
                    ));
                    continue;
                }
                for (m, sample) in s.samples().iter().enumerate() {
                    if !finite(sample) {
                        out.push(violation(&field, Some(m), "not finite"));
                    } else if asymmetry(sample) > SYMMETRY_TOL {
                        out.push(violation(&field, Some(m), "not symmetric"));
                    }
                }
            }
            let field = format!("G[{label}]");
            if c.g.shape() != (nx, nx) {
                out.push(violation(&field, None, "shape mismatch"));
            } else if !finite(&c.g) {
                out.push(violation(&field, None, "not finite"));
            } else if asymmetry(&c.g) > SYMMETRY_TOL {
                out.push(violation(&field, None, "not symmetric"));
            }
        }
        if let PolicyClass::Distributed { state_blocks } = &self.policy_class {
            if state_blocks.len() != n_agents || state_blocks.iter().sum::<usize>() != nx {
                out.push(violation(
                    "policy_class",
                    None,
                    "distributed state blocks do not partition the state",
                ));
            }
        }
        out
    }

    /// The same game on the grid with every step halved, coefficients
    /// interpolated piecewise-linearly.
    pub fn refined(&self) -> Self {
        Self {
            grid: self.grid.refined(),
            a: self.a.refined(),
            b: self.b.refined(),
            agents: self
                .agents
                .iter()
                .map(|c| AgentCost {
                    q: c.q.refined(),
                    r: c.r.refined(),
                    g: c.g.clone(),
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Validate and turn violations into an error.
    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(v.iter().map(|v| v.to_string()).collect()))
        }
    }
}

/// Free-function form of [`LqGameSpec::validate`].
pub fn validate_spec(spec: &LqGameSpec) -> Vec<Violation> {
    spec.validate()
}

/// Per-agent linear feedback gains `K_i(t)` (k_i × n_x), interpolated
/// piecewise-linearly between grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyProfile {
    pub gains: Vec<MatrixSeries>,
}

impl PolicyProfile {
    pub fn new(gains: Vec<MatrixSeries>) -> Self {
        Self { gains }
    }

    pub fn zeros(spec: &LqGameSpec) -> Self {
        Self {
            gains: spec
                .control_dims
                .iter()
                .map(|&k| MatrixSeries::zeros(k, spec.state_dim()))
                .collect(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.gains.len()
    }

    pub fn refined(&self) -> Self {
        Self::new(self.gains.iter().map(MatrixSeries::refined).collect())
    }

    /// Check agent count, shapes, sample counts, finiteness and the policy
    /// class mask.
    pub fn check_against(&self, spec: &LqGameSpec) -> Result<()> {
        if self.gains.len() != spec.n_agents() {
            return Err(Error::Dimension(format!(
                "profile has {} agents, game has {}",
                self.gains.len(),
                spec.n_agents()
            )));
        }
        for (i, g) in self.gains.iter().enumerate() {
            check_direction(spec, i, g)?;
        }
        Ok(())
    }

    /// Stacked joint gain `K` (n_a × n_x) at node `m`.
    pub fn joint_node(&self, m: usize) -> DMatrix<f64> {
        stack(self.gains.iter().map(|g| g.node(m).clone()))
    }

    /// Stacked joint gain halfway between nodes `m` and `m + 1`.
    pub fn joint_mid(&self, m: usize) -> DMatrix<f64> {
        stack(self.gains.iter().map(|g| g.mid(m)))
    }

    /// `K_i(t)` by piecewise-linear interpolation.
    pub fn evaluate(&self, grid: &TimeGrid, i: usize, t: f64) -> Result<DMatrix<f64>> {
        self.gains[i].at(grid, t)
    }

    /// Replace agent `i`'s gain.
    pub fn with_agent(&self, i: usize, gain: MatrixSeries) -> Self {
        let mut out = self.clone();
        out.gains[i] = gain;
        out
    }

    /// `self + s * (other - self)`, node-wise.
    pub fn lerp(&self, other: &Self, s: f64, nodes: usize) -> Self {
        Self {
            gains: self
                .gains
                .iter()
                .zip(&other.gains)
                .map(|(a, b)| a.zip_with(b, nodes, |x, y| x + (y - x) * s))
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self, nodes: usize) -> Self {
        Self {
            gains: self
                .gains
                .iter()
                .zip(&other.gains)
                .map(|(a, b)| a.zip_with(b, nodes, |x, y| x - y))
                .collect(),
        }
    }

    /// Largest absolute gain entry over all agents and nodes.
    pub fn sup_norm(&self) -> f64 {
        self.gains.iter().fold(0.0, |a, g| a.max(g.sup_norm()))
    }

    /// Random profile smooth in time; see [`random_smooth_direction`].
    pub fn random_smooth<R: Rng + ?Sized>(spec: &LqGameSpec, rng: &mut R, scale: f64) -> Self {
        Self {
            gains: (0..spec.n_agents())
                .map(|i| random_smooth_direction(spec, i, rng, scale))
                .collect(),
        }
    }

    /// Random profile with i.i.d. `N(0, scale²)` entries at every node,
    /// respecting the policy class.
    pub fn random<R: Rng + ?Sized>(spec: &LqGameSpec, rng: &mut R, scale: f64) -> Self {
        Self {
            gains: (0..spec.n_agents())
                .map(|i| random_direction(spec, i, rng, scale))
                .collect(),
        }
    }
}

fn stack(blocks: impl Iterator<Item = DMatrix<f64>>) -> DMatrix<f64> {
    let blocks: Vec<_> = blocks.collect();
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in &blocks {
        out.view_mut((r, 0), b.shape()).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Check a single-agent gain series (a policy or a perturbation direction).
pub fn check_direction(spec: &LqGameSpec, i: usize, g: &MatrixSeries) -> Result<()> {
    let want = (spec.control_dims[i], spec.state_dim());
    if g.shape() != want {
        return Err(Error::Dimension(format!(
            "gain of agent {} has shape {:?}, expected {:?}",
            i + 1,
            g.shape(),
            want
        )));
    }
    if !g.fits(spec.grid.len()) {
        return Err(Error::Dimension(format!(
            "gain of agent {} has {} samples for a grid of {} nodes",
            i + 1,
            g.len(),
            spec.grid.len()
        )));
    }
    if !g.all_finite() {
        return Err(Error::InvalidArgument(format!(
            "gain of agent {} is not finite",
            i + 1
        )));
    }
    let allowed = spec.feedback_range(i);
    for s in g.samples() {
        for c in 0..s.ncols() {
            if !allowed.contains(&c) && s.column(c).iter().any(|v| *v != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gain of agent {} feeds back on state column {c} outside its policy class",
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

/// Random per-node Gaussian gain for agent `i`, zero outside the columns the
/// policy class allows.
pub fn random_direction<R: Rng + ?Sized>(
    spec: &LqGameSpec,
    i: usize,
    rng: &mut R,
    scale: f64,
) -> MatrixSeries {
    let (k, nx) = (spec.control_dims[i], spec.state_dim());
    let allowed = spec.feedback_range(i);
    let samples = (0..spec.grid.len())
        .map(|_| {
            DMatrix::from_fn(k, nx, |_, c| {
                if allowed.contains(&c) {
                    scale * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            })
        })
        .collect();
    MatrixSeries::from_samples(samples).expect("non-empty grid")
}

/// Random gain smooth in time, `C0 + C1 cos(πτ) + C2 sin(πτ)` with
/// `τ = (t − t0)/(T − t0)` and i.i.d. `N(0, scale²)` entries in each `Ck`,
/// zero outside the allowed columns.
pub fn random_smooth_direction<R: Rng + ?Sized>(
    spec: &LqGameSpec,
    i: usize,
    rng: &mut R,
    scale: f64,
) -> MatrixSeries {
    let (k, nx) = (spec.control_dims[i], spec.state_dim());
    let allowed = spec.feedback_range(i);
    let mut coef = || {
        DMatrix::from_fn(k, nx, |_, c| {
            if allowed.contains(&c) {
                scale * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        })
    };
    let (c0, c1, c2) = (coef(), coef(), coef());
    let g = spec.grid;
    MatrixSeries::sample(&g, |t| {
        let tau = std::f64::consts::PI * (t - g.t0()) / (g.horizon() - g.t0());
        &c0 + &c1 * tau.cos() + &c2 * tau.sin()
    })
    .expect("non-empty grid")
}

/// Random time-constant gain with i.i.d. `N(0, scale²)` entries in the
/// allowed columns.
pub fn random_constant_direction<R: Rng + ?Sized>(
    spec: &LqGameSpec,
    i: usize,
    rng: &mut R,
    scale: f64,
) -> MatrixSeries {
    let allowed = spec.feedback_range(i);
    MatrixSeries::constant(DMatrix::from_fn(spec.control_dims[i], spec.state_dim(), |_, c| {
        if allowed.contains(&c) {
            scale * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    }))
}

/// Hat-function direction: entry `(p, q)` equal to one at node `m` and
/// zero at every other node.
pub fn hat_direction(spec: &LqGameSpec, i: usize, m: usize, p: usize, q: usize) -> MatrixSeries {
    let (k, nx) = (spec.control_dims[i], spec.state_dim());
    let samples = (0..spec.grid.len())
        .map(|n| {
            let mut s = DMatrix::zeros(k, nx);
            if n == m {
                s[(p, q)] = 1.0;
            }
            s
        })
        .collect();
    MatrixSeries::from_samples(samples).expect("non-empty grid")
}

// --- distributed quadratic mean-field costs --------------------------------

/// Per-agent own costs of the distributed quadratic family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributedAgentCost {
    pub q: MatrixSeries,
    pub r: MatrixSeries,
    pub g: DMatrix<f64>,
}

/// Costs
/// `f_i = x_iᵀQ_i x_i + (x_i − γ x̄_{−i})ᵀ Q̄ (x_i − γ x̄_{−i}) + a_iᵀR_i a_i + (a_i − κ ā_{−i})ᵀ R̄ (a_i − κ ā_{−i})`,
/// `g_i = x_iᵀG_i x_i + (x_i − η x̄_{−i})ᵀ Ḡ (x_i − η x̄_{−i})`,
/// where bars over `x`, `a` are averages over the other agents. Unlike
/// [`LqGameSpec`] these costs carry no ½ factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributedQuadraticSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub agents: Vec<DistributedAgentCost>,
    pub q_bar: MatrixSeries,
    pub r_bar: MatrixSeries,
    pub g_bar: DMatrix<f64>,
    pub gamma: ScalarSeries,
    pub kappa: ScalarSeries,
    pub eta: f64,
}

/// Linear dynamics `dX_i = (A_i X_i + B_i a_i) dt + sigma_i dW^i` of one
/// agent in a distributed game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDynamics {
    pub a: MatrixSeries,
    pub b: MatrixSeries,
    pub sigma: DMatrix<f64>,
}

impl DistributedQuadraticSpec {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn check(&self, nodes: usize) -> Result<()> {
        let (n, k) = (self.state_dim, self.control_dim);
        if self.agents.len() < 2 {
            return Err(Error::Dimension(
                "distributed game needs at least two agents".into(),
            ));
        }
        let mut bad = Vec::new();
        for (i, c) in self.agents.iter().enumerate() {
            if c.q.shape() != (n, n) || c.r.shape() != (k, k) || c.g.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "agent {} costs do not match n={n}, k={k}",
                    i + 1
                )));
            }
            for (name, s) in [("Q", &c.q), ("R", &c.r)] {
                if !s.fits(nodes) {
                    bad.push(format!("{name}[{}] sample count", i + 1));
                }
                if s.samples().iter().any(|m| asymmetry(m) > SYMMETRY_TOL) {
                    bad.push(format!("{name}[{}] not symmetric", i + 1));
                }
            }
            if asymmetry(&c.g) > SYMMETRY_TOL {
                bad.push(format!("G[{}] not symmetric", i + 1));
            }
        }
        if self.q_bar.shape() != (n, n) || self.r_bar.shape() != (k, k) || self.g_bar.shape() != (n, n) {
            return Err(Error::Dimension("shared cost matrices have wrong shape".into()));
        }
        for (name, s) in [("Q_bar", &self.q_bar), ("R_bar", &self.r_bar)] {
            if !s.fits(nodes) {
                bad.push(format!("{name} sample count"));
            }
            if s.samples().iter().any(|m| asymmetry(m) > SYMMETRY_TOL) {
                bad.push(format!("{name} not symmetric"));
            }
        }
        if asymmetry(&self.g_bar) > SYMMETRY_TOL {
            bad.push("G_bar not symmetric".into());
        }
        if !self.gamma.fits(nodes) || !self.kappa.fits(nodes) {
            bad.push("gamma/kappa sample count".into());
        }
        if !self.eta.is_finite() {
            bad.push("eta not finite".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(bad))
        }
    }
}

/// Joint matrix `M` with `zᵀ M z` equal to
/// `z_iᵀ own z_i + (z_i − c z̄_{−i})ᵀ bar (z_i − c z̄_{−i})` for `z` stacked
/// from `n_agents` blocks of size `bar.nrows()`.
pub(crate) fn mean_field_expansion(
    n_agents: usize,
    i: usize,
    own: &DMatrix<f64>,
    bar: &DMatrix<f64>,
    c: f64,
) -> DMatrix<f64> {
    let d = bar.nrows();
    let w = c / (n_agents - 1) as f64;
    let mut out = DMatrix::zeros(n_agents * d, n_agents * d);
    for r in 0..n_agents {
        for s in 0..n_agents {
            let block = match (r == i, s == i) {
                (true, true) => own + bar,
                (true, false) | (false, true) => bar * (-w),
                (false, false) => bar * (w * w),
            };
            out.view_mut((r * d, s * d), (d, d)).copy_from(&block);
        }
    }
    out
}

/// Per-agent joint quadratic forms of the distributed costs, in the cost
/// convention of [`DistributedQuadraticSpec`] (no ½): returns
/// `(Q_i, R_i, G_i)` with `xᵀQ_i x + aᵀR_i a = f_i` and `xᵀG_i x = g_i`.
pub fn expand_distributed_costs(
    d: &DistributedQuadraticSpec,
    nodes: usize,
) -> Result<Vec<(MatrixSeries, MatrixSeries, DMatrix<f64>)>> {
    d.check(nodes)?;
    let n_agents = d.n_agents();
    let per_node = |own: &MatrixSeries, bar: &MatrixSeries, c: &ScalarSeries, i: usize| {
        if own.is_constant() && bar.is_constant() && c.is_constant() {
            MatrixSeries::constant(mean_field_expansion(n_agents, i, own.node(0), bar.node(0), c.node(0)))
        } else {
            MatrixSeries::from_samples(
                (0..nodes)
                    .map(|m| mean_field_expansion(n_agents, i, own.node(m), bar.node(m), c.node(m)))
                    .collect(),
            )
            .expect("non-empty grid")
        }
    };
    Ok(d.agents
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                per_node(&c.q, &d.q_bar, &d.gamma, i),
                per_node(&c.r, &d.r_bar, &d.kappa, i),
                mean_field_expansion(n_agents, i, &c.g, &d.g_bar, d.eta),
            )
        })
        .collect())
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

fn block_diag_series(series: &[&MatrixSeries], nodes: usize) -> MatrixSeries {
    if series.iter().all(|s| s.is_constant()) {
        MatrixSeries::constant(block_diag(
            &series.iter().map(|s| s.node(0).clone()).collect::<Vec<_>>(),
        ))
    } else {
        MatrixSeries::from_samples(
            (0..nodes)
                .map(|m| block_diag(&series.iter().map(|s| s.node(m).clone()).collect::<Vec<_>>()))
                .collect(),
        )
        .expect("non-empty grid")
    }
}

/// Build the joint LQ game of a distributed quadratic game: block-diagonal
/// dynamics and per-agent joint costs. Joint costs are twice the expansion
/// of [`expand_distributed_costs`], so that the LQ values (½ convention)
/// equal the distributed values `E[∫ f_i + g_i]`. The result uses the
/// distributed policy class.
pub fn lift_distributed(
    d: &DistributedQuadraticSpec,
    dynamics: &[AgentDynamics],
    grid: TimeGrid,
) -> Result<LqGameSpec> {
    let nodes = grid.len();
    let (n, k) = (d.state_dim, d.control_dim);
    if dynamics.len() != d.n_agents() {
        return Err(Error::Dimension(format!(
            "{} dynamics blocks for {} agents",
            dynamics.len(),
            d.n_agents()
        )));
    }
    for (i, dy) in dynamics.iter().enumerate() {
        if dy.a.shape() != (n, n) || dy.b.shape() != (n, k) || dy.sigma.nrows() != n {
            return Err(Error::Dimension(format!(
                "agent {} dynamics do not match n={n}, k={k} (A {:?}, B {:?}, sigma {:?})",
                i + 1,
                dy.a.shape(),
                dy.b.shape(),
                dy.sigma.shape()
            )));
        }
        if !dy.a.fits(nodes) || !dy.b.fits(nodes) {
            return Err(Error::Dimension(format!(
                "agent {} dynamics sample count does not fit the grid",
                i + 1
            )));
        }
    }
    let costs = expand_distributed_costs(d, nodes)?;
    let a = block_diag_series(&dynamics.iter().map(|x| &x.a).collect::<Vec<_>>(), nodes);
    let b = block_diag_series(&dynamics.iter().map(|x| &x.b).collect::<Vec<_>>(), nodes);
    let sigma = block_diag(&dynamics.iter().map(|x| x.sigma.clone()).collect::<Vec<_>>());
    let agents = costs
        .into_iter()
        .map(|(q, r, g)| AgentCost {
            q: q.scaled(2.0),
            r: r.scaled(2.0),
            g: g * 2.0,
        })
        .collect();
    let spec = LqGameSpec {
        grid,
        control_dims: vec![k; d.n_agents()],
        a,
        b,
        sigma,
        agents,
        policy_class: PolicyClass::Distributed {
            state_blocks: vec![n; d.n_agents()],
        },
    };
    spec.check()?;
    Ok(spec)
}
