//! Symmetric-Jacobian test, potential construction and evaluation.
//!
//! A game is a Markov potential game when the mixed second derivatives
//! `Λ_i^{i,j}(K'_i, K''_j)` and `Λ_j^{j,i}(K''_j, K'_i)` agree at every node
//! for every pair of directions. By bilinearity it is enough to probe a
//! spanning set; random Gaussian probes are used, plus the full hat-function
//! basis when the pair basis is small.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    hat_direction, random_direction, AgentCost, DistributedQuadraticSpec, LqGameSpec,
    PolicyProfile,
};
use crate::general::{At, CostModel, Layout};
use crate::grid::{MatrixSeries, TimeGrid};
use crate::ode::{solve_psi_with_cost, solve_system, Direction, InitialState, SensitivityRequest};
use crate::seed;

/// Relative tolerance of the symmetry test, applied to `1 + ‖Λ‖_∞`.
pub const SYMMETRY_REL_TOL: f64 = 1e-7;

/// Pair bases with at most this many direction pairs are swept fully.
pub const BASIS_SWEEP_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "MPG")]
    Mpg,
    #[serde(rename = "CLPG-at-(t,x)")]
    ClpgAt,
    #[serde(rename = "not-potential")]
    NotPotential,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mpg => "MPG",
            Self::ClpgAt => "CLPG-at-(t,x)",
            Self::NotPotential => "not-potential",
        })
    }
}

/// Discrepancies of one unordered agent pair `(i, j)`, `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub i: usize,
    pub j: usize,
    /// Per node, max over probes of `‖Λ_i^{i,j} − Λ_j^{j,i}‖_∞`.
    pub matrix_gap: Vec<f64>,
    /// Per node, max over probes of `|λ_i^{i,j} − λ_j^{j,i}|`.
    pub scalar_gap: Vec<f64>,
    /// `1 + max(‖Λ‖_∞, |λ|)` over probes, nodes and both agents.
    pub scale: f64,
    /// Gap of the value forms at the supplied point, if any.
    pub point_gap: Option<f64>,
    pub random_probes: usize,
    pub basis_sweep: bool,
}

impl PairReport {
    pub fn max_gap(&self) -> f64 {
        self.matrix_gap
            .iter()
            .chain(&self.scalar_gap)
            .fold(0.0_f64, |a, v| a.max(*v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub verdict: Verdict,
    pub rel_tol: f64,
    pub probes: usize,
    pub seed: u64,
    pub point: Option<(f64, DVector<f64>)>,
    pub pairs: Vec<PairReport>,
}

impl SymmetryReport {
    /// Largest node-wise discrepancy over all pairs.
    pub fn max_discrepancy(&self) -> f64 {
        self.pairs.iter().fold(0.0, |a, p| a.max(p.max_gap()))
    }

    pub fn pair(&self, i: usize, j: usize) -> Option<&PairReport> {
        let (lo, hi) = (i.min(j), i.max(j));
        self.pairs.iter().find(|p| p.i == lo && p.j == hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryOptions {
    pub probes: usize,
    pub seed: u64,
    pub rel_tol: f64,
    /// `(t, x)` for the closed-loop variant of the test.
    pub point: Option<(f64, DVector<f64>)>,
}

impl Default for SymmetryOptions {
    fn default() -> Self {
        Self {
            probes: 8,
            seed: 0,
            rel_tol: SYMMETRY_REL_TOL,
            point: None,
        }
    }
}

fn basis(spec: &LqGameSpec, i: usize) -> Vec<MatrixSeries> {
    let mut out = Vec::new();
    for m in 0..spec.grid.len() {
        for p in 0..spec.control_dims[i] {
            for q in spec.feedback_range(i) {
                out.push(hat_direction(spec, i, m, p, q));
            }
        }
    }
    out
}

fn basis_size(spec: &LqGameSpec, i: usize) -> usize {
    spec.grid.len() * spec.control_dims[i] * spec.feedback_range(i).len()
}

/// `Λ` forms of agent `me` for pairs `(a, b)` of its own directions `mine`
/// against the other agent's directions `theirs`.
fn lambdas(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    me: usize,
    other: usize,
    mine: &[MatrixSeries],
    theirs: &[MatrixSeries],
    pairs: &[(usize, usize)],
) -> Result<Vec<crate::ode::QuadraticForm>> {
    let mut dirs: Vec<Direction> = mine.iter().map(|g| Direction { agent: me, gain: g }).collect();
    dirs.extend(theirs.iter().map(|g| Direction { agent: other, gain: g }));
    let n = mine.len();
    let pairs: Vec<_> = pairs.iter().map(|&(a, b)| (a, n + b)).collect();
    Ok(solve_system(spec, k, &spec.agents[me], &SensitivityRequest::new(dirs, pairs))?.lambda)
}

/// Symmetry discrepancies of one agent pair; the result does not depend on
/// the order of `i` and `j`.
pub fn check_pair(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    i: usize,
    j: usize,
    opts: &SymmetryOptions,
) -> Result<PairReport> {
    let (i, j) = (i.min(j), i.max(j));
    let n = spec.n_agents();
    if j >= n || i == j {
        return Err(Error::InvalidArgument(format!(
            "pair ({}, {}) is not a pair of distinct agents",
            i + 1,
            j + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, "symmetry", (i * n + j) as u64));
    let mut di: Vec<MatrixSeries> = Vec::new();
    let mut dj: Vec<MatrixSeries> = Vec::new();
    for _ in 0..opts.probes {
        di.push(random_direction(spec, i, &mut rng, 1.0));
        dj.push(random_direction(spec, j, &mut rng, 1.0));
    }
    let mut pairs: Vec<(usize, usize)> = (0..opts.probes).map(|p| (p, p)).collect();
    let sweep = basis_size(spec, i) * basis_size(spec, j) <= BASIS_SWEEP_LIMIT;
    if sweep {
        let (bi, bj) = (basis(spec, i), basis(spec, j));
        let (oi, oj) = (di.len(), dj.len());
        for a in 0..bi.len() {
            for b in 0..bj.len() {
                pairs.push((oi + a, oj + b));
            }
        }
        di.extend(bi);
        dj.extend(bj);
    }
    let li = lambdas(spec, k, i, j, &di, &dj, &pairs)?;
    let swapped: Vec<_> = pairs.iter().map(|&(a, b)| (b, a)).collect();
    let lj = lambdas(spec, k, j, i, &dj, &di, &swapped)?;

    let nodes = spec.grid.len();
    let mut matrix_gap = vec![0.0_f64; nodes];
    let mut scalar_gap = vec![0.0_f64; nodes];
    let mut scale = 0.0_f64;
    let mut point_gap = opts.point.as_ref().map(|_| 0.0_f64);
    for (a, b) in li.iter().zip(&lj) {
        for m in 0..nodes {
            let (ma, mb) = (a.matrix.node(m), b.matrix.node(m));
            matrix_gap[m] = matrix_gap[m].max((ma - mb).amax());
            let (sa, sb) = (a.scalar.node(m), b.scalar.node(m));
            scalar_gap[m] = scalar_gap[m].max((sa - sb).abs());
            scale = scale.max(ma.amax()).max(mb.amax()).max(sa.abs()).max(sb.abs());
        }
        if let (Some(g), Some((t, x))) = (point_gap.as_mut(), opts.point.as_ref()) {
            *g = g.max((a.eval(*t, x)? - b.eval(*t, x)?).abs());
        }
    }
    Ok(PairReport {
        i,
        j,
        matrix_gap,
        scalar_gap,
        scale: 1.0 + scale,
        point_gap,
        random_probes: opts.probes,
        basis_sweep: sweep,
    })
}

/// Symmetric-Jacobian test over all agent pairs.
pub fn check_symmetry(spec: &LqGameSpec, k: &PolicyProfile, opts: &SymmetryOptions) -> Result<SymmetryReport> {
    spec.check()?;
    k.check_against(spec)?;
    if let Some((t, x)) = &opts.point {
        spec.grid.locate(*t)?;
        if x.len() != spec.state_dim() {
            return Err(Error::Dimension("symmetry point has wrong state dimension".into()));
        }
    }
    let n = spec.n_agents();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(check_pair(spec, k, i, j, opts)?);
        }
    }
    let tol = |p: &PairReport| opts.rel_tol * p.scale;
    let verdict = if pairs.iter().all(|p| p.max_gap() <= tol(p)) {
        Verdict::Mpg
    } else if pairs.iter().all(|p| p.point_gap.is_some_and(|g| g <= tol(p))) {
        Verdict::ClpgAt
    } else {
        Verdict::NotPotential
    };
    Ok(SymmetryReport {
        verdict,
        rel_tol: opts.rel_tol,
        probes: opts.probes,
        seed: opts.seed,
        point: opts.point.clone(),
        pairs,
    })
}

// --- quadrature ---------------------------------------------------------------

/// Gauss–Legendre rule on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for k in 0..n.div_ceil(2) {
            // Newton iteration on P_n from the Chebyshev-like initial guess.
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // map [-1, 1] to [0, 1]
            nodes[k] = 0.5 * (1.0 - x);
            nodes[n - 1 - k] = 0.5 * (1.0 + x);
            weights[k] = 0.5 * w;
            weights[n - 1 - k] = 0.5 * w;
        }
        Ok(Self { nodes, weights })
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let mut acc = 0.0;
        for (r, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(*r)?;
        }
        Ok(acc)
    }
}

/// `(P_n(x), P_n'(x))`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

/// Default number of quadrature nodes for the line integral.
pub const DEFAULT_N_QUAD: usize = 16;

// --- potential functions --------------------------------------------------------

/// A potential of an LQ game, evaluated as a function of the policy profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialFunction {
    /// `Φ(K) = ∫₀¹ Σ_j δV_j/δK_j(z + r(K − z); K_j − z_j) dr`.
    LineIntegral {
        base: PolicyProfile,
        rule: GaussLegendre,
        /// False when built despite a not-potential verdict.
        certified: bool,
    },
    /// `Φ(K) = E[∫ XᵀQ̃X + (KX)ᵀR̃(KX) ds + X_TᵀG̃X_T]` (no ½).
    Quadratic {
        q: MatrixSeries,
        r: MatrixSeries,
        g: DMatrix<f64>,
    },
    /// Team game: every agent's value is a potential.
    Team { agent: usize },
}

impl PotentialFunction {
    pub fn is_certified(&self) -> bool {
        !matches!(self, Self::LineIntegral { certified: false, .. })
    }

    pub fn evaluate(&self, spec: &LqGameSpec, k: &PolicyProfile, init: &InitialState) -> Result<f64> {
        match self {
            Self::Team { agent } => {
                let v = solve_psi_with_cost(spec, k, &spec.agents[*agent])?;
                v.expect(init)
            }
            Self::Quadratic { q, r, g } => {
                // The engine values carry a ½; double the costs to match.
                let cost = AgentCost {
                    q: q.scaled(2.0),
                    r: r.scaled(2.0),
                    g: g * 2.0,
                };
                solve_psi_with_cost(spec, k, &cost)?.expect(init)
            }
            Self::LineIntegral { base, rule, .. } => {
                k.check_against(spec)?;
                base.check_against(spec)?;
                let nodes = spec.grid.len();
                let delta = k.sub(base, nodes);
                rule.integrate(|r| {
                    let p = base.lerp(k, r, nodes);
                    let mut acc = 0.0;
                    for j in 0..spec.n_agents() {
                        let req = SensitivityRequest::new(
                            vec![Direction {
                                agent: j,
                                gain: &delta.gains[j],
                            }],
                            vec![],
                        );
                        let sol = solve_system(spec, &p, &spec.agents[j], &req)?;
                        acc += sol.theta[0].expect(init)?;
                    }
                    Ok(acc)
                })
            }
        }
    }
}

/// Line-integral potential with base profile `base`. Refuses when the
/// symmetry verdict is not-potential unless `allow_unverified` is set, in
/// which case the result is marked uncertified.
pub fn build_line_integral_potential(
    report: &SymmetryReport,
    base: PolicyProfile,
    n_quad: usize,
    allow_unverified: bool,
) -> Result<PotentialFunction> {
    let certified = report.verdict != Verdict::NotPotential;
    if !certified && !allow_unverified {
        return Err(Error::NotPotential(format!(
            "symmetry test failed (max discrepancy {:e})",
            report.max_discrepancy()
        )));
    }
    Ok(PotentialFunction::LineIntegral {
        base,
        rule: GaussLegendre::new(n_quad)?,
        certified,
    })
}

/// Block matrix with diagonal blocks `own_i + bar` and off-diagonal blocks
/// `−c·bar/(N−1)`.
pub fn potential_block_matrix(owns: &[&DMatrix<f64>], bar: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let n = owns.len();
    let d = bar.nrows();
    let off = bar * (-c / (n - 1) as f64);
    let mut out = DMatrix::zeros(n * d, n * d);
    for (r, own) in owns.iter().enumerate() {
        for s in 0..n {
            let block = if r == s { *own + bar } else { off.clone() };
            out.view_mut((r * d, s * d), (d, d)).copy_from(&block);
        }
    }
    out
}

/// Joint cost matrices `(Q̃, R̃, G̃)` of the distributed quadratic potential.
pub fn build_distributed_potential(d: &DistributedQuadraticSpec, nodes: usize) -> Result<PotentialFunction> {
    d.check(nodes)?;
    let series = |owns: Vec<&MatrixSeries>, bar: &MatrixSeries, c: &crate::grid::ScalarSeries| {
        let constant = owns.iter().all(|s| s.is_constant()) && bar.is_constant() && c.is_constant();
        let at = |m: usize| {
            potential_block_matrix(&owns.iter().map(|s| s.node(m)).collect::<Vec<_>>(), bar.node(m), c.node(m))
        };
        if constant {
            MatrixSeries::constant(at(0))
        } else {
            MatrixSeries::from_samples((0..nodes).map(at).collect()).expect("non-empty grid")
        }
    };
    let q = series(d.agents.iter().map(|a| &a.q).collect(), &d.q_bar, &d.gamma);
    let r = series(d.agents.iter().map(|a| &a.r).collect(), &d.r_bar, &d.kappa);
    let g = potential_block_matrix(&d.agents.iter().map(|a| &a.g).collect::<Vec<_>>(), &d.g_bar, d.eta);
    Ok(PotentialFunction::Quadratic { q, r, g })
}

// --- general distributed costs ------------------------------------------------------

/// Potential pair `(F, G)` of a distributed game with general costs, as
/// gradient line integrals from an anchor `(x̂, â)`:
/// `F(t, x, a) = ∫₀¹ Σ_i ∂_{(x_i, a_i)} f_i(t, ẑ + r(z − ẑ)) · (z_i − ẑ_i) dr`,
/// `G(x) = ∫₀¹ Σ_i ∂_{x_i} g_i(x̂ + r(x − x̂)) · (x_i − x̂_i) dr`.
pub struct DistributedFg<'a> {
    costs: &'a dyn CostModel,
    state_blocks: Vec<usize>,
    anchor_x: DVector<f64>,
    anchor_a: DVector<f64>,
    rule: GaussLegendre,
}

/// Tolerance of the cross-Hessian symmetry precondition.
pub const HESSIAN_TOL: f64 = 1e-6;

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut o = vec![0];
    for s in sizes {
        o.push(o.last().unwrap() + s);
    }
    o
}

impl DistributedFg<'_> {
    fn x_range(&self, i: usize) -> std::ops::Range<usize> {
        let o = offsets(&self.state_blocks);
        o[i]..o[i + 1]
    }

    fn layout(&self) -> &Layout {
        self.costs.layout()
    }

    pub fn running(&self, at: At, x: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
        let (dx, da) = (x - &self.anchor_x, a - &self.anchor_a);
        self.rule.integrate(|r| {
            let (px, pa) = (&self.anchor_x + &dx * r, &self.anchor_a + &da * r);
            let mut acc = 0.0;
            for i in 0..self.layout().n_agents() {
                let (gx, ga) = self.costs.running_cost_grad(i, at, &px, &pa);
                let (xr, ar) = (self.x_range(i), self.layout().control_range(i));
                acc += gx.rows(xr.start, xr.len()).dot(&dx.rows(xr.start, xr.len()));
                acc += ga.rows(ar.start, ar.len()).dot(&da.rows(ar.start, ar.len()));
            }
            Ok(acc)
        })
    }

    pub fn terminal(&self, x: &DVector<f64>) -> Result<f64> {
        let dx = x - &self.anchor_x;
        self.rule.integrate(|r| {
            let px = &self.anchor_x + &dx * r;
            let mut acc = 0.0;
            for i in 0..self.layout().n_agents() {
                let g = self.costs.terminal_cost_grad(i, &px);
                let xr = self.x_range(i);
                acc += g.rows(xr.start, xr.len()).dot(&dx.rows(xr.start, xr.len()));
            }
            Ok(acc)
        })
    }

    /// `U_{f_i} = f_i − F`, independent of `(x_i, a_i)` for a potential.
    pub fn running_residual(&self, i: usize, at: At, x: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
        Ok(self.costs.running_cost(i, at, x, a) - self.running(at, x, a)?)
    }

    /// `U_{g_i} = g_i − G`.
    pub fn terminal_residual(&self, i: usize, x: &DVector<f64>) -> Result<f64> {
        Ok(self.costs.terminal_cost(i, x) - self.terminal(x)?)
    }
}

/// Build `(F, G)` after checking that cross Hessians agree,
/// `∂²f_i/∂z_i∂z_j = ∂²f_j/∂z_i∂z_j` (and likewise for `g`), at `probes`
/// random points.
#[allow(clippy::too_many_arguments)]
pub fn build_general_distributed_fg<'a>(
    costs: &'a dyn CostModel,
    state_blocks: &[usize],
    grid: &TimeGrid,
    anchor: (DVector<f64>, DVector<f64>),
    n_quad: usize,
    probes: usize,
    seed: u64,
) -> Result<DistributedFg<'a>> {
    let l = costs.layout();
    let n = l.n_agents();
    if state_blocks.len() != n || state_blocks.iter().sum::<usize>() != l.state_dim {
        return Err(Error::Dimension(format!(
            "state blocks {state_blocks:?} do not partition the state of dimension {}",
            l.state_dim
        )));
    }
    if anchor.0.len() != l.state_dim || anchor.1.len() != l.control_dim() {
        return Err(Error::Dimension("anchor has wrong dimensions".into()));
    }
    let nx = l.state_dim;
    let xo = offsets(state_blocks);
    // Indices of agent i's (x_i, a_i) inside the (x, a) Hessian.
    let z_idx = |i: usize| -> Vec<usize> {
        (xo[i]..xo[i + 1]).chain(l.control_range(i).map(|c| nx + c)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "hessian", 0));
    use rand::Rng;
    use rand_distr::StandardNormal;
    for _ in 0..probes {
        let at = At::node(grid, rng.random_range(0..grid.len()));
        let x = DVector::from_fn(nx, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = DVector::from_fn(l.control_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let h: Vec<DMatrix<f64>> = (0..n).map(|i| costs.running_cost_hess(i, at, &x, &a)).collect();
        let hg: Vec<DMatrix<f64>> = (0..n).map(|i| costs.terminal_cost_hess(i, &x)).collect();
        for i in 0..n {
            for j in i + 1..n {
                let (zi, zj) = (z_idx(i), z_idx(j));
                let mut gap = 0.0_f64;
                let mut scale = 1.0_f64;
                for &p in &zi {
                    for &q in &zj {
                        gap = gap.max((h[i][(p, q)] - h[j][(p, q)]).abs());
                        scale = scale.max(h[i][(p, q)].abs()).max(h[j][(p, q)].abs());
                    }
                }
                for p in xo[i]..xo[i + 1] {
                    for q in xo[j]..xo[j + 1] {
                        gap = gap.max((hg[i][(p, q)] - hg[j][(p, q)]).abs());
                        scale = scale.max(hg[i][(p, q)].abs()).max(hg[j][(p, q)].abs());
                    }
                }
                if gap > HESSIAN_TOL * scale {
                    return Err(Error::HessianAsymmetry {
                        i: i + 1,
                        j: j + 1,
                        point: x.iter().chain(a.iter()).copied().collect(),
                        gap,
                    });
                }
            }
        }
    }
    Ok(DistributedFg {
        costs,
        state_blocks: state_blocks.to_vec(),
        anchor_x: anchor.0,
        anchor_a: anchor.1,
        rule: GaussLegendre::new(n_quad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in [1, 2, 5, 16] {
            let rule = GaussLegendre::new(n).unwrap();
            assert!((rule.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for deg in 0..2 * n {
                let got = rule.integrate(|r| Ok(r.powi(deg as i32))).unwrap();
                assert!((got - 1.0 / (deg as f64 + 1.0)).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
        assert!(GaussLegendre::new(0).is_err());
    }

    #[test]
    fn block_matrix_matches_displayed_structure() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let q = potential_block_matrix(&[&one, &one], &one, 1.0);
        assert_eq!(q, nalgebra::dmatrix![2.0, -1.0; -1.0, 2.0]);
        let zero = DMatrix::zeros(1, 1);
        let r = potential_block_matrix(&[&zero, &zero, &zero], &one, 2.0);
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(r[(a, b)], if a == b { 1.0 } else { -1.0 });
            }
        }
    }

    #[test]
    fn verdict_serialises_with_display_names() {
        assert_eq!(serde_json::to_string(&Verdict::ClpgAt).unwrap(), "\"CLPG-at-(t,x)\"");
        assert_eq!(Verdict::NotPotential.to_string(), "not-potential");
    }
}
