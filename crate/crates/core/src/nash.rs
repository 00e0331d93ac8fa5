//! Nash equilibria of potential games by minimising the potential over
//! feedback gains, and equilibrium verification by unilateral deviations.
//!
//! The gradient of the potential with respect to agent `i`'s node gains is
//! the gradient of `V_i` (the defining identity of a potential), which has
//! the density `D_i(s) = [B_iᵀΨ_i + (R_i)_{i·} K] M(s)` against the hat
//! functions, `M` being the closed-loop second moment.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    hat_direction, random_direction, random_smooth_direction, LqGameSpec, PolicyClass,
    PolicyProfile,
};
use crate::grid::MatrixSeries;
use crate::ode::{
    solve_psi, solve_system, Direction, InitialState, SensitivityRequest,
};
use crate::potential::PotentialFunction;
use crate::seed;

/// `∂Φ/∂K_i(t_m)` for every agent and node, shaped like a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    pub gains: Vec<MatrixSeries>,
}

impl GradientField {
    /// Directional derivative along `dir`: sum of entrywise products over
    /// agents and nodes.
    pub fn dot(&self, dir: &PolicyProfile) -> f64 {
        let mut acc = 0.0;
        for (g, d) in self.gains.iter().zip(&dir.gains) {
            for m in 0..g.len() {
                acc += g.node(m).dot(d.node(m));
            }
        }
        acc
    }

    pub fn sup_norm(&self) -> f64 {
        self.gains.iter().fold(0.0, |a, g| a.max(g.sup_norm()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientBackend {
    /// One `Θ` solve per hat direction.
    Basis,
    /// Reverse sweep through the value scheme, one pass per agent.
    Fast,
}

fn start_node(spec: &LqGameSpec, init: &InitialState) -> Result<usize> {
    let t0 = init.t0();
    match spec.grid.node_index(t0) {
        Some(m) if m < spec.grid.steps() => Ok(m),
        _ => Err(Error::InvalidArgument(format!(
            "initial time {t0} must be a grid node before the horizon"
        ))),
    }
}

/// Gradient of the potential (equivalently of each agent's own value) with
/// respect to the node gains, under the objective `init`.
pub fn potential_gradient(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    init: &InitialState,
    backend: GradientBackend,
) -> Result<GradientField> {
    spec.check()?;
    k.check_against(spec)?;
    if init.state_dim() != spec.state_dim() {
        return Err(Error::Dimension("initial state has wrong dimension".into()));
    }
    let start = start_node(spec, init)?;
    match backend {
        GradientBackend::Basis => basis_gradient(spec, k, init),
        GradientBackend::Fast => fast_gradient(spec, k, init, start),
    }
}

fn basis_gradient(spec: &LqGameSpec, k: &PolicyProfile, init: &InitialState) -> Result<GradientField> {
    let nodes = spec.grid.len();
    let gains = (0..spec.n_agents())
        .into_par_iter()
        .map(|i| {
            let (ki, cols) = (spec.control_dims[i], spec.feedback_range(i));
            let mut idx = Vec::new();
            let mut hats = Vec::new();
            for m in 0..nodes {
                for p in 0..ki {
                    for q in cols.clone() {
                        idx.push((m, p, q));
                        hats.push(hat_direction(spec, i, m, p, q));
                    }
                }
            }
            let dirs = hats.iter().map(|g| Direction { agent: i, gain: g }).collect();
            let sol = solve_system(spec, k, &spec.agents[i], &SensitivityRequest::new(dirs, vec![]))?;
            let mut out = vec![DMatrix::zeros(ki, spec.state_dim()); nodes];
            for (&(m, p, q), th) in idx.iter().zip(&sol.theta) {
                out[m][(p, q)] = th.expect(init)?;
            }
            Ok(MatrixSeries::from_samples(out).expect("non-empty grid"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientField { gains })
}

/// Joint gain, B, R, closed loop L = A + BK and W = Q + KᵀRK at one stage.
type Stage = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// Exact gradient of the discretised value by reverse-mode sweep through
/// the RK4 steps of the value equation. The adjoint variable is the
/// discrete counterpart of the second moment `M(s)`, propagated forward
/// from `½·M(t0)`, and the per-stage parameter adjoints give the density
/// `D_i(s)` on each hat function.
fn fast_gradient(spec: &LqGameSpec, k: &PolicyProfile, init: &InitialState, start: usize) -> Result<GradientField> {
    let grid = spec.grid;
    let (nodes, steps, dt) = (grid.len(), grid.steps(), grid.dt());
    let h = -dt;
    let ss = spec.sigma_sigma_t();
    let m0 = init.moment() * 0.5;

    let gains = (0..spec.n_agents())
        .into_par_iter()
        .map(|i| {
            let psi = solve_psi(spec, k, i)?;
            let c = &spec.agents[i];
            // (K, B, R, L, W = Q + KᵀRK) at a stage.
            let stage = |kk: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>| {
                let l = &a + &b * &kk;
                let w = q + kk.transpose() * &r * &kk;
                (kk, b, r, l, w)
            };
            let node = |m: usize| {
                stage(
                    k.joint_node(m),
                    spec.a.node(m).clone(),
                    spec.b.node(m).clone(),
                    c.q.node(m).clone(),
                    c.r.node(m).clone(),
                )
            };
            let mid = |m: usize| stage(k.joint_mid(m), spec.a.mid(m), spec.b.mid(m), c.q.mid(m), c.r.mid(m));
            let rate = |l: &DMatrix<f64>, w: &DMatrix<f64>, p: &DMatrix<f64>| -(l.transpose() * p + p * l + w);
            // Adjoint of P ↦ −(LᵀP + PL): X ↦ −(LX + XLᵀ).
            let back = |l: &DMatrix<f64>, x: &DMatrix<f64>| -(l * x + x * l.transpose());
            // Joint-gain adjoint from stage adjoints: L̄ = −2PX, W̄ = −X.
            let gain_bar = |st: &Stage,
                            p: &DMatrix<f64>,
                            x: &DMatrix<f64>| {
                let (kk, b, r, _, _) = st;
                let lbar = p * x * -2.0;
                b.transpose() * lbar - r * kk * x * 2.0
            };

            let weight = |n: usize| if n == start || n == steps { 0.25 * dt } else { 0.5 * dt };
            let mut joint = vec![DMatrix::zeros(spec.control_dim(), spec.state_dim()); nodes];
            let mut adj = &m0 + &ss * weight(start);
            let mut lower = node(start);
            for m in start..steps {
                let (upper, middle) = (node(m + 1), mid(m));
                let p1 = psi.matrix.node(m + 1);
                let k1 = rate(&upper.3, &upper.4, p1);
                let p2 = p1 + &k1 * (0.5 * h);
                let k2 = rate(&middle.3, &middle.4, &p2);
                let p3 = p1 + &k2 * (0.5 * h);
                let k3 = rate(&middle.3, &middle.4, &p3);
                let p4 = p1 + &k3 * h;

                let k4b = &adj * (h / 6.0);
                let mut k3b = &adj * (h / 3.0);
                let mut k2b = &adj * (h / 3.0);
                let mut k1b = &adj * (h / 6.0);
                let mut pb = adj.clone();
                let p4b = back(&lower.3, &k4b);
                joint[m] += gain_bar(&lower, &p4, &k4b);
                pb += &p4b;
                k3b += &p4b * h;
                let p3b = back(&middle.3, &k3b);
                let g3 = gain_bar(&middle, &p3, &k3b);
                pb += &p3b;
                k2b += &p3b * (0.5 * h);
                let p2b = back(&middle.3, &k2b);
                let g2 = gain_bar(&middle, &p2, &k2b);
                pb += &p2b;
                k1b += &p2b * (0.5 * h);
                pb += back(&upper.3, &k1b);
                let g1 = gain_bar(&upper, p1, &k1b);
                let gm = (g2 + g3) * 0.5;
                joint[m] += &gm;
                joint[m + 1] += g1 + gm;

                adj = pb + &ss * weight(m + 1);
                // The step symmetrises its output; keep the adjoint symmetric.
                let t = adj.transpose();
                adj = (&adj + t) * 0.5;
                lower = upper;
            }
            let rows = spec.control_range(i);
            let allowed = spec.feedback_range(i);
            let out = joint
                .into_iter()
                .map(|g| {
                    let mut g = g.rows(rows.start, rows.len()).into_owned();
                    for q in 0..g.ncols() {
                        if !allowed.contains(&q) {
                            g.column_mut(q).fill(0.0);
                        }
                    }
                    g
                })
                .collect();
            Ok(MatrixSeries::from_samples(out).expect("non-empty grid"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientField { gains })
}

// --- descent -----------------------------------------------------------------------

/// A stalled line search counts as converged when the predicted decrease
/// of the largest trial step is below this multiple of `1 + |Φ|`.
pub const ROUNDOFF_FLOOR: f64 = 1e3 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashOptions {
    pub max_iter: usize,
    /// Stop when the sup-norm of the gradient density is below this.
    pub tol: f64,
    pub initial_step: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    pub backend: GradientBackend,
    pub verify: VerifyOptions,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            tol: 1e-8,
            initial_step: 1.0,
            armijo: 1e-4,
            max_halvings: 40,
            backend: GradientBackend::Fast,
            verify: VerifyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub potential: f64,
    pub grad_norm: f64,
    pub step: f64,
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut w: W) -> Result<()> {
    writeln!(w, "iteration,potential,grad_norm,step")?;
    for r in trace {
        writeln!(w, "{},{:.17e},{:.17e},{:.17e}", r.iteration, r.potential, r.grad_norm, r.step)?;
    }
    Ok(())
}

/// Gradient divided by the trapezoid weights: the `L²(dt)` gradient
/// density, whose size does not depend on the grid.
fn density(spec: &LqGameSpec, g: &GradientField) -> PolicyProfile {
    let grid = spec.grid;
    PolicyProfile::new(
        g.gains
            .iter()
            .map(|s| {
                MatrixSeries::from_samples(
                    (0..grid.len()).map(|m| s.node(m) / grid.trapezoid_weight(m)).collect(),
                )
                .expect("non-empty grid")
            })
            .collect(),
    )
}

fn axpy(spec: &LqGameSpec, k: &PolicyProfile, s: f64, d: &PolicyProfile) -> PolicyProfile {
    let nodes = spec.grid.len();
    PolicyProfile::new(
        k.gains
            .iter()
            .zip(&d.gains)
            .map(|(a, b)| a.zip_with(b, nodes, |x, y| x + y * s))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub certificate: NashCertificate,
    pub potential: f64,
    pub trace: Vec<TraceRow>,
}

/// Gradient descent on the potential with Armijo backtracking, followed by
/// [`verify_nash`]. The result is a first-order stationary point.
pub fn solve_nash(
    spec: &LqGameSpec,
    potential: &PotentialFunction,
    k0: &PolicyProfile,
    init: &InitialState,
    opts: &NashOptions,
) -> Result<SolveOutcome> {
    k0.check_against(spec)?;
    let mut k = k0.clone();
    let mut phi = potential.evaluate(spec, &k, init)?;
    let mut trace = Vec::new();
    let mut step = opts.initial_step;
    let mut iterations = 0;
    let mut grad_norm;
    let mut at_floor = false;
    'descent: loop {
        let g = potential_gradient(spec, &k, init, opts.backend)?;
        let dens = density(spec, &g);
        grad_norm = dens.sup_norm();
        trace.push(TraceRow {
            iteration: iterations,
            potential: phi,
            grad_norm,
            step: if iterations == 0 { 0.0 } else { step },
        });
        if grad_norm <= opts.tol || iterations >= opts.max_iter {
            break;
        }
        // Descent direction −density; slope ⟨g, −density⟩ < 0.
        let slope = -g.dot(&dens);
        let mut s = (2.0 * step).min(opts.initial_step.max(step));
        let s0 = s;
        let mut halvings = 0;
        loop {
            let trial = axpy(spec, &k, -s, &dens);
            let val = potential.evaluate(spec, &trial, init);
            if let Ok(v) = val {
                if v <= phi + opts.armijo * s * slope && v < phi {
                    k = trial;
                    phi = v;
                    step = s;
                    break;
                }
            }
            halvings += 1;
            if halvings > opts.max_halvings {
                // Predicted decrease below what Φ can resolve: converged as
                // far as the arithmetic allows.
                if -slope * s0 <= ROUNDOFF_FLOOR * (1.0 + phi.abs()) {
                    at_floor = true;
                    break 'descent;
                }
                return Err(Error::LineSearchStall {
                    iteration: iterations,
                    halvings: opts.max_halvings,
                    potential: phi,
                    grad_norm,
                });
            }
            s *= 0.5;
        }
        iterations += 1;
    }
    let mut certificate = verify_nash(spec, &k, init, &opts.verify)?;
    certificate.iterations = Some(iterations);
    certificate.final_grad_norm = Some(grad_norm);
    if at_floor {
        certificate.notes.push(format!(
            "stopped at gradient norm {grad_norm:e}: further descent is below the round-off of the potential"
        ));
    } else if grad_norm > opts.tol {
        certificate
            .notes
            .push(format!("stopped at max_iter={} before reaching tol", opts.max_iter));
    }
    Ok(SolveOutcome {
        certificate,
        potential: phi,
        trace,
    })
}

// --- verification ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub probes: usize,
    pub radii: Vec<f64>,
    pub seed: u64,
    /// Certified when every improvement is at least `−tol`.
    pub tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            probes: 50,
            radii: vec![1e-2, 1e-1, 1.0],
            seed: 0,
            tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGap {
    pub agent: usize,
    pub value: f64,
    /// Smallest `V_i(K'_i, K_−i) − V_i(K)` over random deviations.
    pub worst_improvement: f64,
    /// Same for the exact best response, when computed.
    pub best_response_improvement: Option<f64>,
    pub probes: usize,
}

impl AgentGap {
    pub fn worst(&self) -> f64 {
        self.best_response_improvement
            .map_or(self.worst_improvement, |b| b.min(self.worst_improvement))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashCertificate {
    pub profile: PolicyProfile,
    pub agents: Vec<AgentGap>,
    pub tol: f64,
    pub certified: bool,
    pub iterations: Option<usize>,
    pub final_grad_norm: Option<f64>,
    pub notes: Vec<String>,
}

impl NashCertificate {
    pub fn worst_improvement(&self) -> f64 {
        self.agents.iter().fold(f64::INFINITY, |a, g| a.min(g.worst()))
    }
}

fn value(spec: &LqGameSpec, k: &PolicyProfile, i: usize, init: &InitialState) -> Result<f64> {
    solve_psi(spec, k, i)?.expect(init)
}

/// Probe unilateral deviations of every agent and, for the full policy
/// class, compare against the exact best response.
pub fn verify_nash(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    init: &InitialState,
    opts: &VerifyOptions,
) -> Result<NashCertificate> {
    spec.check()?;
    k.check_against(spec)?;
    let mut notes = Vec::new();
    let mut agents = Vec::new();
    for i in 0..spec.n_agents() {
        let v = value(spec, k, i, init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, "deviation", i as u64));
        let mut devs = Vec::new();
        for &rad in &opts.radii {
            for p in 0..opts.probes {
                // Alternate rough and smooth deviations.
                let d = if p % 2 == 0 {
                    random_direction(spec, i, &mut rng, 1.0)
                } else {
                    random_smooth_direction(spec, i, &mut rng, 1.0)
                };
                let n = d.sup_norm();
                if n > 0.0 {
                    devs.push(d.scaled(rad / n));
                }
            }
        }
        let nodes = spec.grid.len();
        let worst = devs
            .par_iter()
            .map(|d| {
                let g = k.gains[i].zip_with(d, nodes, |a, b| a + b);
                value(spec, &k.with_agent(i, g), i, init).map(|w| w - v)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let best = match &spec.policy_class {
            PolicyClass::Full => match best_response(spec, k, i) {
                Ok(br) => Some(value(spec, &k.with_agent(i, br), i, init)? - v),
                Err(e) => {
                    notes.push(format!("agent {}: best-response check skipped ({e})", i + 1));
                    None
                }
            },
            PolicyClass::Distributed { .. } => {
                if i == 0 {
                    notes.push(
                        "best-response check skipped: not an LQR problem under the distributed policy class"
                            .into(),
                    );
                }
                None
            }
        };
        agents.push(AgentGap {
            agent: i,
            value: v,
            worst_improvement: if devs.is_empty() { 0.0 } else { worst },
            best_response_improvement: best,
            probes: devs.len(),
        });
    }
    let certified = agents.iter().all(|g| g.worst() >= -opts.tol);
    notes.push("first-order stationarity with deviation probing; no global optimality certificate".into());
    Ok(NashCertificate {
        profile: k.clone(),
        agents,
        tol: opts.tol,
        certified,
        iterations: None,
        final_grad_norm: None,
        notes,
    })
}

/// Agent `i`'s best response to the others' gains: the LQR problem with
/// drift `A + Σ_{j≠i} B_j K_j`, state cost `Q_i + K_−iᵀ R_{−i,−i} K_−i`,
/// cross term `R_{i,−i} K_−i` and control cost `R_{ii}`.
pub fn best_response(spec: &LqGameSpec, k: &PolicyProfile, i: usize) -> Result<MatrixSeries> {
    let grid = spec.grid;
    let nodes = grid.len();
    let own = spec.control_range(i);
    let c = &spec.agents[i];
    // Coefficients of the reduced problem at a stage, from interpolated data.
    let coeffs = |a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, q: &DMatrix<f64>, kj: &DMatrix<f64>| {
        let bi = b.columns(own.start, own.len()).into_owned();
        let mut k_other = kj.clone();
        for rr in own.clone() {
            k_other.row_mut(rr).fill(0.0);
        }
        let a_hat = a + b * &k_other;
        let r_ii = r.view((own.start, own.start), (own.len(), own.len())).into_owned();
        let r_i_all = r.rows(own.start, own.len()).into_owned();
        let s_hat = &r_i_all * &k_other;
        let q_hat = q + k_other.transpose() * r * &k_other;
        (a_hat, bi, r_ii, s_hat, q_hat)
    };
    let stage = |m: usize, mid: bool| {
        if mid {
            coeffs(&spec.a.mid(m), &spec.b.mid(m), &c.r.mid(m), &c.q.mid(m), &k.joint_mid(m))
        } else {
            coeffs(spec.a.node(m), spec.b.node(m), c.r.node(m), c.q.node(m), &k.joint_node(m))
        }
    };
    let inv = |r: &DMatrix<f64>, m: usize| -> Result<DMatrix<f64>> {
        let ch = r.clone().cholesky().ok_or_else(|| {
            Error::InvalidArgument(format!("effective control cost of agent {} not positive definite at node {m}", i + 1))
        })?;
        Ok(ch.inverse())
    };
    type Stage = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);
    let rhs = |st: &Stage, rinv: &DMatrix<f64>, p: &DMatrix<f64>| {
        let (a_hat, bi, _, s_hat, q_hat) = st;
        let gain = bi.transpose() * p + s_hat;
        // Ṗ = −(ÂᵀP + PÂ + Q̂ − (PB_i + Ŝᵀ) R̂⁻¹ (B_iᵀP + Ŝ))
        -(a_hat.transpose() * p + p * a_hat + q_hat - gain.transpose() * rinv * &gain)
    };
    let dt = grid.dt();
    let mut p = c.g.clone();
    let mut ps = vec![DMatrix::zeros(0, 0); nodes];
    ps[nodes - 1] = p.clone();
    let mut upper = stage(nodes - 1, false);
    let mut upper_inv = inv(&upper.2, nodes - 1)?;
    for m in (0..nodes - 1).rev() {
        let mid = stage(m, true);
        let mid_inv = inv(&mid.2, m)?;
        let lower = stage(m, false);
        let lower_inv = inv(&lower.2, m)?;
        let h = -dt;
        let k1 = rhs(&upper, &upper_inv, &p);
        let k2 = rhs(&mid, &mid_inv, &(&p + &k1 * (0.5 * h)));
        let k3 = rhs(&mid, &mid_inv, &(&p + &k2 * (0.5 * h)));
        let k4 = rhs(&lower, &lower_inv, &(&p + &k3 * h));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        p = (&p + p.transpose()) * 0.5;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                what: format!("best-response Riccati of agent {}", i + 1),
                node: m,
            });
        }
        ps[m] = p.clone();
        upper = lower;
        upper_inv = lower_inv;
    }
    let gains = (0..nodes)
        .map(|m| {
            let (_, bi, r_ii, s_hat, _) = stage(m, false);
            let rinv = inv(&r_ii, m)?;
            Ok(-(rinv * (bi.transpose() * &ps[m] + s_hat)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatrixSeries::from_samples(gains).expect("non-empty grid"))
}
