//! Shared fixtures for integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use potentia::game::{AgentCost, LqGameSpec, PolicyClass};
use potentia::{MatrixSeries, TimeGrid};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gauss<R: Rng>(rng: &mut R, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random symmetric positive definite matrix.
pub fn spd<R: Rng>(rng: &mut R, n: usize, floor: f64) -> DMatrix<f64> {
    let m = gauss(rng, n, n, 1.0);
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random N-agent LQ game with constant coefficients.
pub fn random_spec<R: Rng>(rng: &mut R, nx: usize, dims: &[usize], steps: usize) -> LqGameSpec {
    let na: usize = dims.iter().sum();
    LqGameSpec {
        grid: TimeGrid::new(0.0, 1.0, steps).unwrap(),
        control_dims: dims.to_vec(),
        a: MatrixSeries::constant(gauss(rng, nx, nx, 0.5)),
        b: MatrixSeries::constant(gauss(rng, nx, na, 1.0)),
        sigma: gauss(rng, nx, nx, 0.4),
        agents: dims
            .iter()
            .map(|_| AgentCost {
                q: MatrixSeries::constant(spd(rng, nx, 0.1)),
                r: MatrixSeries::constant(spd(rng, na, 0.2)),
                g: spd(rng, nx, 0.1),
            })
            .collect(),
        policy_class: PolicyClass::Full,
    }
}

pub fn scalar_handcheck() -> LqGameSpec {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    LqGameSpec {
        grid: TimeGrid::new(0.0, 1.0, 100).unwrap(),
        control_dims: vec![1],
        a: MatrixSeries::constant(one(0.0)),
        b: MatrixSeries::constant(one(1.0)),
        sigma: one(0.0),
        agents: vec![AgentCost {
            q: MatrixSeries::constant(one(0.0)),
            r: MatrixSeries::constant(one(0.0)),
            g: one(1.0),
        }],
        policy_class: PolicyClass::Full,
    }
}

/// Moderately scaled random 2-agent game (n_x = 2, k_i = 1, T = 1,
/// M = 200) with a smooth random policy and start state, for the
/// ODE/Monte Carlo equivalence experiment.
pub fn equivalence_case(seed: u64) -> (LqGameSpec, potentia::PolicyProfile, DVector<f64>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = LqGameSpec {
        grid: TimeGrid::new(0.0, 1.0, 200).unwrap(),
        control_dims: vec![1, 1],
        a: MatrixSeries::constant(gauss(&mut rng, 2, 2, 0.3)),
        b: MatrixSeries::constant(gauss(&mut rng, 2, 2, 0.5)),
        sigma: gauss(&mut rng, 2, 2, 0.3),
        agents: (0..2)
            .map(|_| AgentCost {
                q: MatrixSeries::constant(spd(&mut rng, 2, 0.1)),
                r: MatrixSeries::constant(spd(&mut rng, 2, 0.2)),
                g: spd(&mut rng, 2, 0.1),
            })
            .collect(),
        policy_class: PolicyClass::Full,
    };
    let k = potentia::PolicyProfile::random_smooth(&spec, &mut rng, 0.3);
    let x0 = random_vec(&mut rng, 2);
    (spec, k, x0)
}

/// LQR gain `−R⁻¹BᵀP(t)` at the grid nodes, with
/// `−P' = AᵀP + PA − PBR⁻¹BᵀP + Q`, `P(T) = G`, integrated by RK4 with
/// `sub` substeps per grid interval. Constant coefficients only.
pub fn riccati_gain(
    grid: &TimeGrid,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    g: &DMatrix<f64>,
    sub: usize,
) -> Vec<DMatrix<f64>> {
    let rinv = r.clone().try_inverse().unwrap();
    let s = b * &rinv * b.transpose();
    let rhs = |p: &DMatrix<f64>| -(a.transpose() * p + p * a - p * &s * p + q);
    let h = -grid.dt() / sub as f64;
    let mut p = g.clone();
    let mut out = vec![DMatrix::zeros(b.ncols(), a.nrows()); grid.len()];
    let gain = |p: &DMatrix<f64>| -(&rinv * b.transpose() * p);
    out[grid.steps()] = gain(&p);
    for m in (0..grid.steps()).rev() {
        for _ in 0..sub {
            let k1 = rhs(&p);
            let k2 = rhs(&(&p + &k1 * (h / 2.0)));
            let k3 = rhs(&(&p + &k2 * (h / 2.0)));
            let k4 = rhs(&(&p + &k3 * h));
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        out[m] = gain(&p);
    }
    out
}
