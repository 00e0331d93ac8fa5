//! Code-level description of general controlled diffusions, costs and
//! feedback policies, used by the Monte Carlo engine and by the
//! distributed potential builder.
//!
//! Second derivatives are exchanged as bilinear forms: `drift_d2(at, x, a,
//! u, v)` returns `Σ ∂²B/∂z∂z' u v` over `z = (x, a)`, which avoids rank-3
//! tensors in the interface.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::game::LqGameSpec;
use crate::grid::{MatrixSeries, TimeGrid};

/// A grid node and its time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct At {
    pub node: usize,
    pub t: f64,
}

impl At {
    pub fn node(grid: &TimeGrid, m: usize) -> Self {
        Self {
            node: m,
            t: grid.node(m),
        }
    }
}

/// A tangent vector `(δx, δa)`.
pub type Tangent<'a> = (&'a DVector<f64>, &'a DVector<f64>);

/// Agent state and action layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub state_dim: usize,
    pub control_dims: Vec<usize>,
}

impl Layout {
    pub fn n_agents(&self) -> usize {
        self.control_dims.len()
    }

    pub fn control_dim(&self) -> usize {
        self.control_dims.iter().sum()
    }

    pub fn control_range(&self, i: usize) -> Range<usize> {
        let s: usize = self.control_dims[..i].iter().sum();
        s..s + self.control_dims[i]
    }
}

/// Running costs `f_i(t, x, a)` and terminal costs `g_i(x)` with their
/// gradients and Hessians. Hessians of `f_i` are ordered `(x, a)`.
pub trait CostModel: Sync {
    fn layout(&self) -> &Layout;
    fn running_cost(&self, i: usize, at: At, x: &DVector<f64>, a: &DVector<f64>) -> f64;
    fn running_cost_grad(
        &self,
        i: usize,
        at: At,
        x: &DVector<f64>,
        a: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>);
    fn running_cost_hess(&self, i: usize, at: At, x: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64>;
    fn terminal_cost(&self, i: usize, x: &DVector<f64>) -> f64;
    fn terminal_cost_grad(&self, i: usize, x: &DVector<f64>) -> DVector<f64>;
    fn terminal_cost_hess(&self, i: usize, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Controlled diffusion `dX = B(t, X, a) dt + Σ(t, X, a) dW` plus costs.
pub trait GeneralCoefficients: CostModel {
    fn noise_dim(&self) -> usize;
    fn drift(&self, at: At, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64>;
    /// `∂_x B · δx + ∂_a B · δa`.
    fn drift_d1(&self, at: At, x: &DVector<f64>, a: &DVector<f64>, u: Tangent<'_>) -> DVector<f64>;
    /// Second derivative of `B` in `(x, a)` applied to `(u, v)`.
    fn drift_d2(
        &self,
        at: At,
        x: &DVector<f64>,
        a: &DVector<f64>,
        u: Tangent<'_>,
        v: Tangent<'_>,
    ) -> DVector<f64>;
    fn diffusion(&self, at: At, x: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64>;
    fn diffusion_d1(&self, at: At, x: &DVector<f64>, a: &DVector<f64>, u: Tangent<'_>) -> DMatrix<f64>;
    fn diffusion_d2(
        &self,
        at: At,
        x: &DVector<f64>,
        a: &DVector<f64>,
        u: Tangent<'_>,
        v: Tangent<'_>,
    ) -> DMatrix<f64>;
}

/// Joint feedback policy `φ(t, x) ∈ R^{n_a}`.
pub trait FeedbackPolicy: Sync {
    fn action(&self, at: At, x: &DVector<f64>) -> DVector<f64>;
    /// `∂_x φ`, n_a × n_x.
    fn jacobian(&self, at: At, x: &DVector<f64>) -> DMatrix<f64>;
    /// `∂_xx φ [u, v]`.
    fn second(&self, at: At, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
}

/// Perturbation `φ'_h(t, x) ∈ R^{k_h}` of one agent's policy.
pub trait PolicyDirection: Sync {
    fn agent(&self) -> usize;
    fn value(&self, at: At, x: &DVector<f64>) -> DVector<f64>;
    /// `∂_x φ'_h`, k_h × n_x.
    fn jacobian(&self, at: At, x: &DVector<f64>) -> DMatrix<f64>;
}

// --- LQ adapters -------------------------------------------------------------

/// An [`LqGameSpec`] seen through the general interface.
pub struct LqCoefficients<'a> {
    spec: &'a LqGameSpec,
    layout: Layout,
}

impl<'a> LqCoefficients<'a> {
    pub fn new(spec: &'a LqGameSpec) -> Self {
        Self {
            spec,
            layout: Layout {
                state_dim: spec.state_dim(),
                control_dims: spec.control_dims.clone(),
            },
        }
    }
}

impl CostModel for LqCoefficients<'_> {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn running_cost(&self, i: usize, at: At, x: &DVector<f64>, a: &DVector<f64>) -> f64 {
        let c = &self.spec.agents[i];
        0.5 * (x.dot(&(c.q.node(at.node) * x)) + a.dot(&(c.r.node(at.node) * a)))
    }

    fn running_cost_grad(
        &self,
        i: usize,
        at: At,
        x: &DVector<f64>,
        a: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let c = &self.spec.agents[i];
        (c.q.node(at.node) * x, c.r.node(at.node) * a)
    }

    fn running_cost_hess(&self, i: usize, at: At, _x: &DVector<f64>, _a: &DVector<f64>) -> DMatrix<f64> {
        let c = &self.spec.agents[i];
        let (nx, na) = (self.layout.state_dim, self.layout.control_dim());
        let mut h = DMatrix::zeros(nx + na, nx + na);
        h.view_mut((0, 0), (nx, nx)).copy_from(c.q.node(at.node));
        h.view_mut((nx, nx), (na, na)).copy_from(c.r.node(at.node));
        h
    }

    fn terminal_cost(&self, i: usize, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.spec.agents[i].g * x))
    }

    fn terminal_cost_grad(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.spec.agents[i].g * x
    }

    fn terminal_cost_hess(&self, i: usize, _x: &DVector<f64>) -> DMatrix<f64> {
        self.spec.agents[i].g.clone()
    }
}

impl GeneralCoefficients for LqCoefficients<'_> {
    fn noise_dim(&self) -> usize {
        self.spec.noise_dim()
    }

    fn drift(&self, at: At, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        self.spec.a.node(at.node) * x + self.spec.b.node(at.node) * a
    }

    fn drift_d1(&self, at: At, _x: &DVector<f64>, _a: &DVector<f64>, u: Tangent<'_>) -> DVector<f64> {
        self.spec.a.node(at.node) * u.0 + self.spec.b.node(at.node) * u.1
    }

    fn drift_d2(
        &self,
        _at: At,
        _x: &DVector<f64>,
        _a: &DVector<f64>,
        _u: Tangent<'_>,
        _v: Tangent<'_>,
    ) -> DVector<f64> {
        DVector::zeros(self.layout.state_dim)
    }

    fn diffusion(&self, _at: At, _x: &DVector<f64>, _a: &DVector<f64>) -> DMatrix<f64> {
        self.spec.sigma.clone()
    }

    fn diffusion_d1(&self, _at: At, _x: &DVector<f64>, _a: &DVector<f64>, _u: Tangent<'_>) -> DMatrix<f64> {
        DMatrix::zeros(self.layout.state_dim, self.spec.noise_dim())
    }

    fn diffusion_d2(
        &self,
        _at: At,
        _x: &DVector<f64>,
        _a: &DVector<f64>,
        _u: Tangent<'_>,
        _v: Tangent<'_>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(self.layout.state_dim, self.spec.noise_dim())
    }
}

/// Joint linear policy `φ(t, x) = K(t) x` read at grid nodes.
pub struct LinearPolicy<'a> {
    pub profile: &'a crate::game::PolicyProfile,
}

impl FeedbackPolicy for LinearPolicy<'_> {
    fn action(&self, at: At, x: &DVector<f64>) -> DVector<f64> {
        self.profile.joint_node(at.node) * x
    }

    fn jacobian(&self, at: At, _x: &DVector<f64>) -> DMatrix<f64> {
        self.profile.joint_node(at.node)
    }

    fn second(&self, at: At, _x: &DVector<f64>, _u: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.profile.joint_node(at.node).nrows())
    }
}

/// Linear direction `φ'_h(t, x) = K'_h(t) x`.
pub struct LinearDirection<'a> {
    pub agent: usize,
    pub gain: &'a MatrixSeries,
}

impl PolicyDirection for LinearDirection<'_> {
    fn agent(&self) -> usize {
        self.agent
    }

    fn value(&self, at: At, x: &DVector<f64>) -> DVector<f64> {
        self.gain.node(at.node) * x
    }

    fn jacobian(&self, at: At, _x: &DVector<f64>) -> DMatrix<f64> {
        self.gain.node(at.node).clone()
    }
}

// --- finite-difference self-test -------------------------------------------

/// Maximum relative error tolerated by [`self_test`].
pub const SELF_TEST_TOL: f64 = 1e-4;

const FD_STEP: f64 = 1e-5;

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = analytic.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    analytic
        .iter()
        .zip(fd)
        .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()))
        / scale
}

fn gauss_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn check(name: &str, analytic: &[f64], fd: &[f64]) -> Result<()> {
    let e = rel_err(analytic, fd);
    if e > SELF_TEST_TOL || !e.is_finite() {
        Err(Error::DerivativeSelfTest {
            callback: name.to_string(),
            rel_err: e,
        })
    } else {
        Ok(())
    }
}

/// Compare every derivative callback against central finite differences at
/// `points` random `(t, x, a)` points on `grid`.
pub fn self_test<C: GeneralCoefficients + ?Sized, R: Rng + ?Sized>(
    coeffs: &C,
    grid: &TimeGrid,
    points: usize,
    rng: &mut R,
) -> Result<()> {
    let l = coeffs.layout();
    let (nx, na) = (l.state_dim, l.control_dim());
    let e = FD_STEP;
    for _ in 0..points {
        let at = At::node(grid, rng.random_range(0..=grid.steps()));
        let x = gauss_vec(rng, nx);
        let a = gauss_vec(rng, na);
        let (ux, ua) = (gauss_vec(rng, nx), gauss_vec(rng, na));
        let (vx, va) = (gauss_vec(rng, nx), gauss_vec(rng, na));
        let shift = |s: f64| (&x + &ux * s, &a + &ua * s);
        let (xp, ap) = shift(e);
        let (xm, am) = shift(-e);

        let fd = (coeffs.drift(at, &xp, &ap) - coeffs.drift(at, &xm, &am)) / (2.0 * e);
        check("drift_d1", coeffs.drift_d1(at, &x, &a, (&ux, &ua)).as_slice(), fd.as_slice())?;
        let fd = (coeffs.drift_d1(at, &xp, &ap, (&vx, &va)) - coeffs.drift_d1(at, &xm, &am, (&vx, &va)))
            / (2.0 * e);
        check(
            "drift_d2",
            coeffs.drift_d2(at, &x, &a, (&ux, &ua), (&vx, &va)).as_slice(),
            fd.as_slice(),
        )?;

        let fd = (coeffs.diffusion(at, &xp, &ap) - coeffs.diffusion(at, &xm, &am)) / (2.0 * e);
        check(
            "diffusion_d1",
            coeffs.diffusion_d1(at, &x, &a, (&ux, &ua)).as_slice(),
            fd.as_slice(),
        )?;
        let fd = (coeffs.diffusion_d1(at, &xp, &ap, (&vx, &va))
            - coeffs.diffusion_d1(at, &xm, &am, (&vx, &va)))
            / (2.0 * e);
        check(
            "diffusion_d2",
            coeffs.diffusion_d2(at, &x, &a, (&ux, &ua), (&vx, &va)).as_slice(),
            fd.as_slice(),
        )?;

        cost_self_test(coeffs, at, &x, &a, (&ux, &ua))?;
    }
    Ok(())
}

/// Gradient and Hessian callbacks of a [`CostModel`] against central
/// differences along the tangent `u` at one point.
pub fn cost_self_test<C: CostModel + ?Sized>(
    costs: &C,
    at: At,
    x: &DVector<f64>,
    a: &DVector<f64>,
    u: Tangent<'_>,
) -> Result<()> {
    let e = FD_STEP;
    let (xp, ap) = (x + u.0 * e, a + u.1 * e);
    let (xm, am) = (x - u.0 * e, a - u.1 * e);
    let uz = DVector::from_iterator(u.0.len() + u.1.len(), u.0.iter().chain(u.1.iter()).copied());
    for i in 0..costs.layout().n_agents() {
        let (gx, ga) = costs.running_cost_grad(i, at, x, a);
        let fd = (costs.running_cost(i, at, &xp, &ap) - costs.running_cost(i, at, &xm, &am)) / (2.0 * e);
        check("running_cost_grad", &[gx.dot(u.0) + ga.dot(u.1)], &[fd])?;
        let (px, pa) = costs.running_cost_grad(i, at, &xp, &ap);
        let (mx, ma) = costs.running_cost_grad(i, at, &xm, &am);
        let fd: Vec<f64> = (px - mx)
            .iter()
            .chain((pa - ma).iter())
            .map(|v| v / (2.0 * e))
            .collect();
        let h = costs.running_cost_hess(i, at, x, a) * &uz;
        check("running_cost_hess", h.as_slice(), &fd)?;

        let g = costs.terminal_cost_grad(i, x);
        let fd = (costs.terminal_cost(i, &xp) - costs.terminal_cost(i, &xm)) / (2.0 * e);
        check("terminal_cost_grad", &[g.dot(u.0)], &[fd])?;
        let fd = (costs.terminal_cost_grad(i, &xp) - costs.terminal_cost_grad(i, &xm)) / (2.0 * e);
        let h = costs.terminal_cost_hess(i, x) * u.0;
        check("terminal_cost_hess", h.as_slice(), fd.as_slice())?;
    }
    Ok(())
}
