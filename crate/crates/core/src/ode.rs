//! Backward matrix ODEs of the LQ value function and its linear derivatives,
//! and the forward second-moment equation of the closed-loop state.
//!
//! With `L = A + B K` the value matrix solves
//! `Ψ' + LᵀΨ + ΨL + Q_i + KᵀR_iK = 0`, `Ψ(T) = G_i`. The first-derivative
//! matrix `Θ` (direction `K'_h` of agent `h`) and second-derivative matrix
//! `Λ` (directions `K'_h`, `K''_ℓ`) solve the differentiated equations with
//! zero terminal data. Scalar companions solve `s' + ½ tr(σσᵀ S) = 0`.
//!
//! All matrices of one request are integrated together with classical RK4
//! on the grid: every stage of `Θ` uses the same stage of `Ψ`, so the
//! discrete `Θ`, `Λ` are exact derivatives of the discrete `Ψ` with respect
//! to the gains.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AgentCost, LqGameSpec, PolicyProfile};
use crate::grid::{MatrixSeries, ScalarSeries, TimeGrid};

/// Quadratic function `½ xᵀ S(t) x + s(t)` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticForm {
    pub grid: TimeGrid,
    pub matrix: MatrixSeries,
    pub scalar: ScalarSeries,
}

/// Value ansatz `(Ψ_i, ψ_i)`.
pub type QuadraticValue = QuadraticForm;

impl QuadraticForm {
    /// `½ xᵀ S(t) x + s(t)` with piecewise-linear interpolation in `t`.
    pub fn eval(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        let s = self.matrix.at(&self.grid, t)?;
        if x.len() != s.nrows() {
            return Err(Error::Dimension(format!(
                "state has length {}, form expects {}",
                x.len(),
                s.nrows()
            )));
        }
        Ok(0.5 * x.dot(&(&s * x)) + self.scalar.at(&self.grid, t)?)
    }

    /// `E[½ XᵀS(t)X] + s(t)` for `E[XXᵀ] = moment`, at node `m`.
    pub fn expectation_at_node(&self, m: usize, moment: &DMatrix<f64>) -> f64 {
        0.5 * (self.matrix.node(m) * moment).trace() + self.scalar.node(m)
    }

    /// Trajectory as CSV: `t`, row-major matrix entries, scalar.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (r, c) = self.matrix.shape();
        let mut header = vec!["t".to_string()];
        for i in 0..r {
            for j in 0..c {
                header.push(format!("m{}{}", i + 1, j + 1));
            }
        }
        header.push("s".into());
        writeln!(w, "{}", header.join(","))?;
        for m in 0..self.grid.len() {
            let mut row = vec![format!("{:.17e}", self.grid.node(m))];
            let s = self.matrix.node(m);
            for i in 0..r {
                for j in 0..c {
                    row.push(format!("{:.17e}", s[(i, j)]));
                }
            }
            row.push(format!("{:.17e}", self.scalar.node(m)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Initial condition of an objective: a point `x0`, or a random state with
/// second moment `E[X Xᵀ] = m0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    Point { t0: f64, x0: DVector<f64> },
    Moment { t0: f64, m0: DMatrix<f64> },
}

impl InitialState {
    pub fn t0(&self) -> f64 {
        match self {
            Self::Point { t0, .. } | Self::Moment { t0, .. } => *t0,
        }
    }

    /// `E[X(t0) X(t0)ᵀ]`.
    pub fn moment(&self) -> DMatrix<f64> {
        match self {
            Self::Point { x0, .. } => x0 * x0.transpose(),
            Self::Moment { m0, .. } => m0.clone(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Point { x0, .. } => x0.len(),
            Self::Moment { m0, .. } => m0.nrows(),
        }
    }
}

impl QuadraticForm {
    /// Expectation of the form under an initial condition.
    pub fn expect(&self, init: &InitialState) -> Result<f64> {
        match init {
            InitialState::Point { t0, x0 } => self.eval(*t0, x0),
            InitialState::Moment { t0, m0 } => {
                let s = self.matrix.at(&self.grid, *t0)?;
                if m0.shape() != s.shape() {
                    return Err(Error::Dimension("initial moment shape".into()));
                }
                Ok(0.5 * (&s * m0).trace() + self.scalar.at(&self.grid, *t0)?)
            }
        }
    }
}

/// Evaluate a quadratic form at `(t, x)`.
pub fn eval_quadratic(q: &QuadraticForm, t: f64, x: &DVector<f64>) -> Result<f64> {
    q.eval(t, x)
}

/// First and second linear derivatives of one agent's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBundle {
    /// `Θ_i^h` for the first direction.
    pub theta: QuadraticForm,
    /// `Θ_i^ℓ` for the second direction.
    pub theta_second: QuadraticForm,
    /// `Λ_i^{h,ℓ}`.
    pub lambda: QuadraticForm,
}

/// A direction `K'_h` for agent `h`.
#[derive(Debug, Clone, Copy)]
pub struct Direction<'a> {
    pub agent: usize,
    pub gain: &'a MatrixSeries,
}

/// Batch of derivatives of one cost functional along shared directions.
#[derive(Debug, Clone, Default)]
pub struct SensitivityRequest<'a> {
    pub directions: Vec<Direction<'a>>,
    /// Pairs `(a, b)` of indices into `directions` for second derivatives;
    /// `a` is the `K'_h` slot and `b` the `K''_ℓ` slot.
    pub pairs: Vec<(usize, usize)>,
    /// Multiplies the `Θ` source terms. 1.0 except in fault-injection tests.
    pub theta_source_scale: f64,
}

impl<'a> SensitivityRequest<'a> {
    pub fn new(directions: Vec<Direction<'a>>, pairs: Vec<(usize, usize)>) -> Self {
        Self {
            directions,
            pairs,
            theta_source_scale: 1.0,
        }
    }
}

/// Output of [`solve_system`].
#[derive(Debug, Clone)]
pub struct SystemSolution {
    pub psi: QuadraticForm,
    pub theta: Vec<QuadraticForm>,
    pub lambda: Vec<QuadraticForm>,
}

#[derive(Clone, Copy)]
enum Stage {
    Node(usize),
    Mid(usize),
}

fn at(s: &MatrixSeries, st: Stage) -> DMatrix<f64> {
    match st {
        Stage::Node(m) => s.node(m).clone(),
        Stage::Mid(m) => s.mid(m),
    }
}

fn sym(x: DMatrix<f64>) -> DMatrix<f64> {
    let t = x.transpose();
    x + t
}

fn symmetrize(x: &mut DMatrix<f64>) {
    let t = x.transpose();
    *x += t;
    *x *= 0.5;
}

struct StageData {
    l: DMatrix<f64>,
    /// Source of the value equation, `Q + KᵀRK`.
    value_source: DMatrix<f64>,
    /// `B_h K'_h` per direction.
    bkp: Vec<DMatrix<f64>>,
    /// `Kᵀ (R)_h K'_h` per direction.
    krk: Vec<DMatrix<f64>>,
    /// `(K'')ᵀ (R)_{ℓh} K'` per pair.
    pair_rr: Vec<DMatrix<f64>>,
}

struct System<'a> {
    spec: &'a LqGameSpec,
    policy: &'a PolicyProfile,
    cost: &'a AgentCost,
    req: &'a SensitivityRequest<'a>,
}

impl System<'_> {
    fn stage(&self, st: Stage) -> StageData {
        let spec = self.spec;
        let (k, a, b, q, r) = match st {
            Stage::Node(m) => (
                self.policy.joint_node(m),
                spec.a.node(m).clone(),
                spec.b.node(m).clone(),
                self.cost.q.node(m).clone(),
                self.cost.r.node(m).clone(),
            ),
            Stage::Mid(m) => (
                self.policy.joint_mid(m),
                spec.a.mid(m),
                spec.b.mid(m),
                self.cost.q.mid(m),
                self.cost.r.mid(m),
            ),
        };
        let l = &a + &b * &k;
        let rk = &r * &k;
        let value_source = &q + k.transpose() * &rk;
        let dirs: Vec<DMatrix<f64>> = self.req.directions.iter().map(|d| at(d.gain, st)).collect();
        let mut bkp = Vec::with_capacity(dirs.len());
        let mut krk = Vec::with_capacity(dirs.len());
        for (d, kp) in self.req.directions.iter().zip(&dirs) {
            let cr = spec.control_range(d.agent);
            bkp.push(b.columns(cr.start, cr.len()) * kp);
            // Kᵀ (R)_h K'_h = (R K)ᵀ restricted to agent h's columns.
            krk.push(rk.rows(cr.start, cr.len()).transpose() * kp);
        }
        let pair_rr = self
            .req
            .pairs
            .iter()
            .map(|&(ia, ib)| {
                let (h, l_) = (self.req.directions[ia].agent, self.req.directions[ib].agent);
                let (rh, rl) = (spec.control_range(h), spec.control_range(l_));
                let r_lh = r.view((rl.start, rh.start), (rl.len(), rh.len()));
                dirs[ib].transpose() * r_lh * &dirs[ia]
            })
            .collect();
        StageData {
            l,
            value_source,
            bkp,
            krk,
            pair_rr,
        }
    }

    /// Time derivative of the stacked state `[Ψ, Θ..., Λ...]`.
    fn rate(&self, d: &StageData, y: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let nd = self.req.directions.len();
        let lt = d.l.transpose();
        let lyap = |s: &DMatrix<f64>| &lt * s + s * &d.l;
        let mut out = Vec::with_capacity(y.len());
        let psi = &y[0];
        out.push(-(lyap(psi) + &d.value_source));
        for f in 0..nd {
            let src = sym(psi * &d.bkp[f] + &d.krk[f]) * self.req.theta_source_scale;
            out.push(-(lyap(&y[1 + f]) + src));
        }
        for (p, &(ia, ib)) in self.req.pairs.iter().enumerate() {
            let lam = &y[1 + nd + p];
            let src = sym(&y[1 + ia] * &d.bkp[ib] + &y[1 + ib] * &d.bkp[ia] + &d.pair_rr[p]);
            out.push(-(lyap(lam) + src));
        }
        out
    }
}

fn axpy(y: &[DMatrix<f64>], h: f64, k: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    y.iter().zip(k).map(|(a, b)| a + b * h).collect()
}

/// Integrate the value equation for `cost` together with every requested
/// first and second derivative.
pub fn solve_system(
    spec: &LqGameSpec,
    policy: &PolicyProfile,
    cost: &AgentCost,
    req: &SensitivityRequest<'_>,
) -> Result<SystemSolution> {
    spec.check()?;
    policy.check_against(spec)?;
    for d in &req.directions {
        if d.agent >= spec.n_agents() {
            return Err(Error::InvalidArgument(format!("no agent {}", d.agent + 1)));
        }
        crate::game::check_direction(spec, d.agent, d.gain)?;
    }
    if req
        .pairs
        .iter()
        .any(|&(a, b)| a >= req.directions.len() || b >= req.directions.len())
    {
        return Err(Error::InvalidArgument("pair refers to a missing direction".into()));
    }
    if cost.q.shape() != (spec.state_dim(), spec.state_dim())
        || cost.r.shape() != (spec.control_dim(), spec.control_dim())
        || cost.g.shape() != (spec.state_dim(), spec.state_dim())
    {
        return Err(Error::Dimension("cost matrices do not match the game".into()));
    }

    let grid = spec.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let nx = spec.state_dim();
    let nd = req.directions.len();
    let width = 1 + nd + req.pairs.len();
    let sys = System {
        spec,
        policy,
        cost,
        req,
    };

    let mut y: Vec<DMatrix<f64>> = Vec::with_capacity(width);
    y.push(cost.g.clone());
    y.extend((1..width).map(|_| DMatrix::zeros(nx, nx)));

    let mut traj: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); steps + 1];
    traj[steps] = y.clone();
    let h = -dt;
    let mut upper = sys.stage(Stage::Node(steps));
    for m in (0..steps).rev() {
        let mid = sys.stage(Stage::Mid(m));
        let lower = sys.stage(Stage::Node(m));
        let k1 = sys.rate(&upper, &y);
        let k2 = sys.rate(&mid, &axpy(&y, 0.5 * h, &k1));
        let k3 = sys.rate(&mid, &axpy(&y, 0.5 * h, &k2));
        let k4 = sys.rate(&lower, &axpy(&y, h, &k3));
        for c in 0..width {
            let inc = (&k1[c] + &k2[c] * 2.0 + &k3[c] * 2.0 + &k4[c]) * (h / 6.0);
            y[c] += inc;
            symmetrize(&mut y[c]);
            if !y[c].iter().all(|v| v.is_finite()) {
                let what = match c {
                    0 => "value matrix".to_string(),
                    c if c <= nd => format!("first-derivative matrix {}", c - 1),
                    c => format!("second-derivative matrix {}", c - 1 - nd),
                };
                return Err(Error::Divergence { what, node: m });
            }
        }
        traj[m] = y.clone();
        upper = lower;
    }

    let ss = spec.sigma_sigma_t();
    let form = |c: usize| -> QuadraticForm {
        let mats: Vec<DMatrix<f64>> = traj.iter().map(|row| row[c].clone()).collect();
        let mut scal = vec![0.0; steps + 1];
        for m in (0..steps).rev() {
            let tr = (&ss * &mats[m]).trace() + (&ss * &mats[m + 1]).trace();
            scal[m] = scal[m + 1] + 0.25 * dt * tr;
        }
        QuadraticForm {
            grid,
            matrix: MatrixSeries::from_samples(mats).expect("non-empty"),
            scalar: ScalarSeries::from_samples(scal).expect("non-empty"),
        }
    };
    Ok(SystemSolution {
        psi: form(0),
        theta: (0..nd).map(|f| form(1 + f)).collect(),
        lambda: (0..req.pairs.len()).map(|p| form(1 + nd + p)).collect(),
    })
}

fn agent_cost(spec: &LqGameSpec, i: usize) -> Result<&AgentCost> {
    spec.agents
        .get(i)
        .ok_or_else(|| Error::InvalidArgument(format!("no agent {}", i + 1)))
}

/// Value ansatz `(Ψ_i, ψ_i)` of agent `i` under profile `k`.
pub fn solve_psi(spec: &LqGameSpec, k: &PolicyProfile, i: usize) -> Result<QuadraticValue> {
    let req = SensitivityRequest::new(vec![], vec![]);
    Ok(solve_system(spec, k, agent_cost(spec, i)?, &req)?.psi)
}

/// Value ansatz for an arbitrary cost in the ½ convention.
pub fn solve_psi_with_cost(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    cost: &AgentCost,
) -> Result<QuadraticValue> {
    let req = SensitivityRequest::new(vec![], vec![]);
    Ok(solve_system(spec, k, cost, &req)?.psi)
}

/// First linear derivative `(Θ_i^h, θ_i^h)` of agent `i`'s value along
/// direction `kp` of agent `h`.
pub fn solve_theta(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    i: usize,
    h: usize,
    kp: &MatrixSeries,
) -> Result<QuadraticForm> {
    let req = SensitivityRequest::new(vec![Direction { agent: h, gain: kp }], vec![]);
    Ok(solve_system(spec, k, agent_cost(spec, i)?, &req)?.theta.remove(0))
}

/// Second linear derivative `(Λ_i^{h,ℓ}, λ_i^{h,ℓ})` along `kp` (agent `h`)
/// and `kpp` (agent `l`).
pub fn solve_lambda(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    i: usize,
    h: usize,
    l: usize,
    kp: &MatrixSeries,
    kpp: &MatrixSeries,
) -> Result<SensitivityBundle> {
    let req = SensitivityRequest::new(
        vec![Direction { agent: h, gain: kp }, Direction { agent: l, gain: kpp }],
        vec![(0, 1)],
    );
    let mut sol = solve_system(spec, k, agent_cost(spec, i)?, &req)?;
    let theta_second = sol.theta.pop().expect("two directions");
    Ok(SensitivityBundle {
        theta: sol.theta.pop().expect("two directions"),
        theta_second,
        lambda: sol.lambda.pop().expect("one pair"),
    })
}

/// Closed-loop second moment `E[X_s X_sᵀ]` from node `start` onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondMoment {
    pub grid: TimeGrid,
    pub start: usize,
    /// Samples for nodes `start..=steps`.
    pub moments: Vec<DMatrix<f64>>,
}

impl SecondMoment {
    pub fn at_node(&self, m: usize) -> &DMatrix<f64> {
        &self.moments[m - self.start]
    }
}

/// PSD tolerance on eigenvalues of the second moment.
pub const PSD_TOL: f64 = -1e-10;

/// Forward Lyapunov equation `M' = LM + MLᵀ + σσᵀ`, `M(t0) = m0`, where
/// `t0` must be a grid node.
pub fn solve_second_moment_from(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    t0: f64,
    m0: &DMatrix<f64>,
) -> Result<SecondMoment> {
    spec.check()?;
    k.check_against(spec)?;
    let grid = spec.grid;
    let start = grid.node_index(t0).ok_or_else(|| {
        Error::InvalidArgument(format!("initial time {t0} is not a grid node"))
    })?;
    let nx = spec.state_dim();
    if m0.shape() != (nx, nx) {
        return Err(Error::Dimension("initial moment shape".into()));
    }
    let ss = spec.sigma_sigma_t();
    let l_at = |st: Stage| match st {
        Stage::Node(m) => spec.a.node(m) + spec.b.node(m) * k.joint_node(m),
        Stage::Mid(m) => spec.a.mid(m) + spec.b.mid(m) * k.joint_mid(m),
    };
    let rate = |l: &DMatrix<f64>, x: &DMatrix<f64>| l * x + x * l.transpose() + &ss;
    let dt = grid.dt();
    let mut y = m0.clone();
    let mut out = vec![y.clone()];
    let mut lower = l_at(Stage::Node(start));
    for m in start..grid.steps() {
        let mid = l_at(Stage::Mid(m));
        let upper = l_at(Stage::Node(m + 1));
        let k1 = rate(&lower, &y);
        let k2 = rate(&mid, &(&y + &k1 * (0.5 * dt)));
        let k3 = rate(&mid, &(&y + &k2 * (0.5 * dt)));
        let k4 = rate(&upper, &(&y + &k3 * dt));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        symmetrize(&mut y);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                what: "second moment".into(),
                node: m + 1,
            });
        }
        let min_eig = y.clone().symmetric_eigenvalues().min();
        let scale = 1.0 + y.amax();
        if min_eig < PSD_TOL * scale {
            return Err(Error::NotPsd {
                node: m + 1,
                min_eigenvalue: min_eig,
            });
        }
        out.push(y.clone());
        lower = upper;
    }
    Ok(SecondMoment {
        grid,
        start,
        moments: out,
    })
}

/// Second moment started from the point mass at `x0`.
pub fn solve_second_moment(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    t0: f64,
    x0: &DVector<f64>,
) -> Result<SecondMoment> {
    solve_second_moment_from(spec, k, t0, &(x0 * x0.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{AgentCost, PolicyClass};
    use nalgebra::{dmatrix, dvector};

    fn scalar_spec(a: f64, b: f64, sigma: f64, q: f64, r: f64, g: f64, steps: usize) -> LqGameSpec {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        LqGameSpec {
            grid: TimeGrid::new(0.0, 1.0, steps).unwrap(),
            control_dims: vec![1],
            a: MatrixSeries::constant(one(a)),
            b: MatrixSeries::constant(one(b)),
            sigma: one(sigma),
            agents: vec![AgentCost {
                q: MatrixSeries::constant(one(q)),
                r: MatrixSeries::constant(one(r)),
                g: one(g),
            }],
            policy_class: PolicyClass::Full,
        }
    }

    #[test]
    fn pure_running_cost_gives_linear_psi() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let spec = LqGameSpec {
            grid,
            control_dims: vec![1],
            a: MatrixSeries::zeros(2, 2),
            b: MatrixSeries::zeros(2, 1),
            sigma: DMatrix::zeros(2, 1),
            agents: vec![AgentCost {
                q: MatrixSeries::constant(DMatrix::identity(2, 2)),
                r: MatrixSeries::zeros(1, 1),
                g: DMatrix::zeros(2, 2),
            }],
            policy_class: PolicyClass::Full,
        };
        let v = solve_psi(&spec, &PolicyProfile::zeros(&spec), 0).unwrap();
        for m in 0..=20 {
            let t = grid.node(m);
            let want = DMatrix::identity(2, 2) * (1.0 - t);
            assert!((v.matrix.node(m) - want).amax() < 1e-14);
        }
    }

    #[test]
    fn zero_costs_give_zero_value() {
        let spec = scalar_spec(0.3, 1.0, 1.0, 0.0, 0.0, 0.0, 10);
        let v = solve_psi(&spec, &PolicyProfile::zeros(&spec), 0).unwrap();
        assert_eq!(v.matrix.sup_norm(), 0.0);
        assert!(v.scalar.samples().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn scalar_companion_integrates_noise_trace() {
        // Ψ(t) = 1 − t, σ = 1 ⇒ ψ(0) = ½∫₀¹(1 − s) ds = 0.25.
        let spec = scalar_spec(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 50);
        let v = solve_psi(&spec, &PolicyProfile::zeros(&spec), 0).unwrap();
        assert!((v.scalar.node(0) - 0.25).abs() < 1e-14);
        assert!((v.eval(0.0, &dvector![0.0]).unwrap() - 0.25).abs() < 1e-14);
    }

    #[test]
    fn terminal_values_are_exact() {
        let spec = scalar_spec(0.7, -0.4, 0.5, 1.3, 0.9, 2.5, 10);
        let k = PolicyProfile::new(vec![MatrixSeries::constant(dmatrix![0.2])]);
        let kp = MatrixSeries::constant(dmatrix![1.0]);
        let b = solve_lambda(&spec, &k, 0, 0, 0, &kp, &kp).unwrap();
        let v = solve_psi(&spec, &k, 0).unwrap();
        assert_eq!(*v.matrix.node(10), dmatrix![2.5]);
        assert_eq!(v.scalar.node(10), 0.0);
        assert_eq!(b.theta.matrix.node(10)[0], 0.0);
        assert_eq!(b.lambda.matrix.node(10)[0], 0.0);
    }

    #[test]
    fn theta_hand_integration() {
        // A=0, B=1, K=0, Q=R=0, G=1, K'=1 ⇒ Ψ ≡ 1, Θ(t) = 2(1 − t).
        let spec = scalar_spec(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 40);
        let k = PolicyProfile::zeros(&spec);
        let th = solve_theta(&spec, &k, 0, 0, &MatrixSeries::constant(dmatrix![1.0])).unwrap();
        for m in 0..=40 {
            let t = spec.grid.node(m);
            assert!((th.matrix.node(m)[0] - 2.0 * (1.0 - t)).abs() < 1e-13);
        }
        assert!((th.eval(0.0, &dvector![1.0]).unwrap() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn zero_direction_gives_zero_derivatives() {
        let spec = scalar_spec(0.4, 1.0, 0.3, 1.0, 1.0, 1.0, 10);
        let k = PolicyProfile::new(vec![MatrixSeries::constant(dmatrix![-0.5])]);
        let z = MatrixSeries::zeros(1, 1);
        let kp = MatrixSeries::constant(dmatrix![1.0]);
        let th = solve_theta(&spec, &k, 0, 0, &z).unwrap();
        assert_eq!(th.matrix.sup_norm(), 0.0);
        let b = solve_lambda(&spec, &k, 0, 0, 0, &z, &kp).unwrap();
        assert_eq!(b.lambda.matrix.sup_norm(), 0.0);
        assert!(b.lambda.scalar.samples().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let spec = scalar_spec(1e200, 0.0, 0.0, 1.0, 0.0, 1.0, 10);
        let err = solve_psi(&spec, &PolicyProfile::zeros(&spec), 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn eval_outside_grid_is_range_error() {
        let spec = scalar_spec(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 10);
        let v = solve_psi(&spec, &PolicyProfile::zeros(&spec), 0).unwrap();
        assert!(matches!(v.eval(1.5, &dvector![1.0]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn quadratic_eval_substitution() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let q = QuadraticForm {
            grid,
            matrix: MatrixSeries::constant(dmatrix![2.0]),
            scalar: ScalarSeries::constant(0.0),
        };
        assert_eq!(q.eval(0.0, &dvector![1.0]).unwrap(), 1.0);
    }

    #[test]
    fn second_moment_trivial_cases() {
        let spec = scalar_spec(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 10);
        let k = PolicyProfile::zeros(&spec);
        let m = solve_second_moment(&spec, &k, 0.0, &dvector![2.0]).unwrap();
        assert!(m.moments.iter().all(|x| x[0] == 4.0));

        let spec = scalar_spec(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 10);
        let m = solve_second_moment(&spec, &k, 0.0, &dvector![0.0]).unwrap();
        for n in 0..=10 {
            assert!((m.at_node(n)[0] - spec.grid.node(n)).abs() < 1e-14);
        }
        assert!(solve_second_moment(&spec, &k, 0.05, &dvector![0.0]).is_err());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let spec = scalar_spec(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 4);
        let v = solve_psi(&spec, &PolicyProfile::zeros(&spec), 0).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,m11,s");
        assert_eq!(text.lines().count(), 6);
    }
}
