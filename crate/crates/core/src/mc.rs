//! Monte Carlo estimation of values and their first and second linear
//! derivatives along policy perturbations.
//!
//! State, sensitivity and second-sensitivity processes are advanced by
//! Euler–Maruyama on the grid and share one set of Brownian increments per
//! path. Path `p` draws from its own ChaCha stream keyed by the seed, so
//! results do not depend on how paths are scheduled across threads.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{check_direction, LqGameSpec, PolicyProfile};
use crate::general::{At, FeedbackPolicy, GeneralCoefficients, PolicyDirection};
use crate::grid::TimeGrid;
use crate::ode::Direction;

mod batch;

/// Fraction of non-finite paths above which estimation fails.
pub const MAX_FLAGGED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Pair path `2q` with path `2q + 1` driven by negated increments.
    #[serde(default)]
    pub antithetic: bool,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            antithetic: false,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_paths must be at least 2, got {}",
                self.n_paths
            )));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "antithetic sampling needs an even n_paths, got {}",
                self.n_paths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Paths that entered the estimate.
    pub n_paths: usize,
    pub seed: u64,
}

impl DerivativeEstimate {
    /// Whether `target` lies within `k` standard errors (plus `abs_tol`).
    pub fn covers(&self, target: f64, k: f64, abs_tol: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr + abs_tol
    }
}

/// One simulated path: node samples from the start node to the horizon.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub index: usize,
    start: usize,
    nodes: usize,
    nx: usize,
    na: usize,
    nw: usize,
    n_dir: usize,
    n_pair: usize,
    times: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    alpha: Vec<f64>,
    dalpha: Vec<f64>,
    d2alpha: Vec<f64>,
    dw: Vec<f64>,
}

/// Block `k` (read) and block `k + 1` (write) of a flat buffer of
/// `n`-blocks.
fn step_blocks(buf: &mut [f64], k: usize, n: usize) -> (&[f64], &mut [f64]) {
    let (lo, hi) = buf.split_at_mut((k + 1) * n);
    (&lo[k * n..], &mut hi[..n])
}

impl PathBundle {
    #[allow(clippy::too_many_arguments)]
    fn new(index: usize, grid: &TimeGrid, start: usize, nx: usize, na: usize, nw: usize, n_dir: usize, n_pair: usize) -> Self {
        let nodes = grid.len() - start;
        Self {
            index,
            start,
            nodes,
            nx,
            na,
            nw,
            n_dir,
            n_pair,
            times: (start..grid.len()).map(|m| grid.node(m)).collect(),
            x: vec![0.0; nodes * nx],
            y: vec![0.0; n_dir * nodes * nx],
            z: vec![0.0; n_pair * nodes * nx],
            alpha: vec![0.0; nodes * na],
            dalpha: vec![0.0; n_dir * nodes * na],
            d2alpha: vec![0.0; n_pair * nodes * na],
            dw: vec![0.0; (nodes - 1) * nw],
        }
    }

    /// Grid index of the first sample.
    pub fn start_node(&self) -> usize {
        self.start
    }

    /// Number of samples (start node through the horizon).
    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.x[k * self.nx..(k + 1) * self.nx]
    }

    pub fn y(&self, d: usize, k: usize) -> &[f64] {
        let o = (d * self.nodes + k) * self.nx;
        &self.y[o..o + self.nx]
    }

    pub fn z(&self, p: usize, k: usize) -> &[f64] {
        let o = (p * self.nodes + k) * self.nx;
        &self.z[o..o + self.nx]
    }

    pub fn alpha(&self, k: usize) -> &[f64] {
        &self.alpha[k * self.na..(k + 1) * self.na]
    }

    /// `δα` along direction `d`.
    pub fn dalpha(&self, d: usize, k: usize) -> &[f64] {
        let o = (d * self.nodes + k) * self.na;
        &self.dalpha[o..o + self.na]
    }

    /// `δ²α` along pair `p`.
    pub fn d2alpha(&self, p: usize, k: usize) -> &[f64] {
        let o = (p * self.nodes + k) * self.na;
        &self.d2alpha[o..o + self.na]
    }

    /// Increment over `[t_k, t_{k+1}]`.
    pub fn dw(&self, k: usize) -> &[f64] {
        &self.dw[k * self.nw..(k + 1) * self.nw]
    }

    fn all_finite(&self) -> bool {
        [&self.x, &self.y, &self.z, &self.alpha, &self.dalpha, &self.d2alpha]
            .iter()
            .all(|v| v.iter().all(|s| s.is_finite()))
    }

    fn set_alpha(&mut self, k: usize, v: &[f64]) {
        self.alpha[k * self.na..(k + 1) * self.na].copy_from_slice(v);
    }

    fn set_dalpha(&mut self, d: usize, k: usize, v: &[f64]) {
        let o = (d * self.nodes + k) * self.na;
        self.dalpha[o..o + self.na].copy_from_slice(v);
    }

    fn set_d2alpha(&mut self, p: usize, k: usize, v: &[f64]) {
        let o = (p * self.nodes + k) * self.na;
        self.d2alpha[o..o + self.na].copy_from_slice(v);
    }
}

/// Which quantities to estimate. Indices refer to the model's directions
/// and direction pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Query {
    /// Agents whose value is estimated.
    pub values: Vec<usize>,
    /// `(agent, direction)`.
    pub first: Vec<(usize, usize)>,
    /// `(agent, pair)`.
    pub second: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimates {
    pub values: Vec<DerivativeEstimate>,
    pub first: Vec<DerivativeEstimate>,
    pub second: Vec<DerivativeEstimate>,
    /// Paths excluded because a sample was non-finite.
    pub flagged: usize,
}

/// Per-path integrand values for a [`Query`], in query order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Integrands {
    values: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Integrands {
    fn all_finite(&self) -> bool {
        self.values
            .iter()
            .chain(&self.first)
            .chain(&self.second)
            .all(|v| v.is_finite())
    }
}

/// A model that can simulate coupled paths and evaluate per-path
/// integrands. Implemented by [`LqModel`] and [`GeneralModel`].
pub trait PathModel: Sync {
    fn grid(&self) -> &TimeGrid;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn n_agents(&self) -> usize;
    fn n_directions(&self) -> usize;
    fn n_pairs(&self) -> usize;
    /// Fill `path` given `x0` and the increments already stored in it.
    fn integrate(&self, path: &mut PathBundle, x0: &[f64]);
    fn value_integrand(&self, path: &PathBundle, i: usize) -> f64;
    fn first_integrand(&self, path: &PathBundle, i: usize, d: usize) -> f64;
    fn second_integrand(&self, path: &PathBundle, i: usize, p: usize) -> f64;

    /// Every queried integrand of one path.
    fn integrands(&self, path: &PathBundle, query: &Query) -> Integrands {
        Integrands {
            values: query.values.iter().map(|&i| self.value_integrand(path, i)).collect(),
            first: query
                .first
                .iter()
                .map(|&(i, d)| self.first_integrand(path, i, d))
                .collect(),
            second: query
                .second
                .iter()
                .map(|&(i, q)| self.second_integrand(path, i, q))
                .collect(),
        }
    }

    /// Integrands of `count` paths from node `start`, path `b` driven by
    /// `dw[b·n..(b + 1)·n]` with `n = (nodes − 1)·noise_dim`; `None` marks a
    /// path with a non-finite sample.
    fn integrands_batch(&self, start: usize, x0: &[f64], dw: &[f64], count: usize, query: &Query) -> Vec<Option<Integrands>> {
        let n = dw.len() / count.max(1);
        (0..count)
            .map(|b| {
                let mut path = self.new_path(b, start);
                path.dw.copy_from_slice(&dw[b * n..(b + 1) * n]);
                self.integrate(&mut path, x0);
                sample_path(self, &path, query)
            })
            .collect()
    }

    #[doc(hidden)]
    fn new_path(&self, index: usize, start: usize) -> PathBundle {
        PathBundle::new(
            index,
            self.grid(),
            start,
            self.state_dim(),
            self.control_dim(),
            self.noise_dim(),
            self.n_directions(),
            self.n_pairs(),
        )
    }
}

// --- dense helpers on slices -------------------------------------------------

/// `out += A x` for column-major `a` with `rows` rows.
#[inline(always)]
fn mv(out: &mut [f64], a: &[f64], rows: usize, x: &[f64]) {
    for (j, &xj) in x.iter().enumerate() {
        for (o, &aij) in out.iter_mut().zip(&a[j * rows..(j + 1) * rows]) {
            *o += aij * xj;
        }
    }
}

/// `uᵀ A v`.
fn bilin(a: &DMatrix<f64>, u: &[f64], v: &[f64]) -> f64 {
    let r = a.nrows();
    let mut acc = 0.0;
    for (j, vj) in v.iter().enumerate() {
        let col = &a.as_slice()[j * r..(j + 1) * r];
        let mut s = 0.0;
        for (ui, aij) in u.iter().zip(col) {
            s += ui * aij;
        }
        acc += s * vj;
    }
    acc
}

/// `½(uᵀAv + vᵀAu)`, exactly symmetric in `(u, v)`.
fn sym_bilin(a: &DMatrix<f64>, u: &[f64], v: &[f64]) -> f64 {
    0.5 * (bilin(a, u, v) + bilin(a, v, u))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in u.iter().zip(v) {
        s += a * b;
    }
    s
}

// --- LQ model ----------------------------------------------------------------

struct LqDir {
    range: std::ops::Range<usize>,
    gain: Vec<DMatrix<f64>>,
    /// `B_h K'_h` per node.
    bk: Vec<DMatrix<f64>>,
}

/// LQ game with linear policies; uses the explicit quadratic integrands.
pub struct LqModel<'a> {
    spec: &'a LqGameSpec,
    k: Vec<DMatrix<f64>>,
    l: Vec<DMatrix<f64>>,
    dirs: Vec<LqDir>,
    pairs: Vec<(usize, usize)>,
}

impl<'a> LqModel<'a> {
    pub fn new(
        spec: &'a LqGameSpec,
        policy: &PolicyProfile,
        directions: &[Direction<'_>],
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        spec.check()?;
        policy.check_against(spec)?;
        check_pairs(pairs, directions.len())?;
        let nodes = spec.grid.len();
        let k: Vec<_> = (0..nodes).map(|m| policy.joint_node(m)).collect();
        let l = (0..nodes)
            .map(|m| spec.a.node(m) + spec.b.node(m) * &k[m])
            .collect();
        let dirs = directions
            .iter()
            .map(|d| {
                if d.agent >= spec.n_agents() {
                    return Err(Error::InvalidArgument(format!("no agent {}", d.agent + 1)));
                }
                check_direction(spec, d.agent, d.gain)?;
                let gain: Vec<_> = (0..nodes).map(|m| d.gain.node(m).clone()).collect();
                let bk = (0..nodes)
                    .map(|m| spec.b_block(d.agent, m) * &gain[m])
                    .collect();
                Ok(LqDir {
                    range: spec.control_range(d.agent),
                    gain,
                    bk,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            k,
            l,
            dirs,
            pairs: pairs.to_vec(),
        })
    }
}

fn check_pairs(pairs: &[(usize, usize)], n_dir: usize) -> Result<()> {
    if let Some(p) = pairs.iter().find(|(a, b)| *a >= n_dir || *b >= n_dir) {
        return Err(Error::InvalidArgument(format!(
            "pair {p:?} refers to a missing direction ({n_dir} given)"
        )));
    }
    Ok(())
}

fn zero(v: &mut [f64]) {
    v.iter_mut().for_each(|s| *s = 0.0);
}

impl PathModel for LqModel<'_> {
    fn grid(&self) -> &TimeGrid {
        &self.spec.grid
    }
    fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.spec.control_dim()
    }
    fn noise_dim(&self) -> usize {
        self.spec.noise_dim()
    }
    fn n_agents(&self) -> usize {
        self.spec.n_agents()
    }
    fn n_directions(&self) -> usize {
        self.dirs.len()
    }
    fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    fn integrate(&self, path: &mut PathBundle, x0: &[f64]) {
        let dt = self.spec.grid.dt();
        let (nx, na, nw, nodes, start) = (path.nx, path.na, path.nw, path.nodes, path.start);
        let PathBundle {
            x,
            y,
            z,
            alpha,
            dalpha,
            d2alpha,
            dw,
            ..
        } = path;
        x[..nx].copy_from_slice(x0);
        let sigma = self.spec.sigma.as_slice();
        let mut su = vec![0.0; nx];
        let mut sv = vec![0.0; nx];
        let mut au = vec![0.0; na];
        let mut av = vec![0.0; na];
        // Offsets of node k for direction d / pair p.
        let ox = |k: usize| k * nx;
        let oy = |d: usize, k: usize| (d * nodes + k) * nx;
        let oa = |d: usize, k: usize| (d * nodes + k) * na;
        for k in 0..nodes {
            let m = start + k;
            let km = self.k[m].as_slice();
            let xk = &x[ox(k)..ox(k) + nx];

            mv(&mut alpha[k * na..(k + 1) * na], km, na, xk);
            for (d, dir) in self.dirs.iter().enumerate() {
                let out = &mut dalpha[oa(d, k)..oa(d, k) + na];
                mv(out, km, na, &y[oy(d, k)..oy(d, k) + nx]);
                let g = &dir.gain[m];
                mv(&mut out[dir.range.clone()], g.as_slice(), g.nrows(), xk);
            }
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                let (da, db) = (&self.dirs[a], &self.dirs[b]);
                au.fill(0.0);
                av.fill(0.0);
                let (ga, gb) = (&da.gain[m], &db.gain[m]);
                mv(&mut au[db.range.clone()], gb.as_slice(), gb.nrows(), &y[oy(a, k)..oy(a, k) + nx]);
                mv(&mut av[da.range.clone()], ga.as_slice(), ga.nrows(), &y[oy(b, k)..oy(b, k) + nx]);
                let out = &mut d2alpha[oa(p, k)..oa(p, k) + na];
                for j in 0..na {
                    out[j] = au[j] + av[j];
                }
                mv(out, km, na, &z[oy(p, k)..oy(p, k) + nx]);
            }
            if k + 1 == nodes {
                break;
            }

            let lm = self.l[m].as_slice();
            let (cur, next) = step_blocks(x, k, nx);
            su.fill(0.0);
            mv(&mut su, lm, nx, cur);
            sv.fill(0.0);
            mv(&mut sv, sigma, nx, &dw[k * nw..(k + 1) * nw]);
            for j in 0..nx {
                next[j] = cur[j] + (dt * su[j] + sv[j]);
            }
            let xk = &x[ox(k)..ox(k) + nx];
            for (d, dir) in self.dirs.iter().enumerate() {
                su.fill(0.0);
                let (cur, next) = step_blocks(y, d * nodes + k, nx);
                mv(&mut su, lm, nx, cur);
                mv(&mut su, dir.bk[m].as_slice(), nx, xk);
                for j in 0..nx {
                    next[j] = cur[j] + dt * su[j];
                }
            }
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                su.fill(0.0);
                sv.fill(0.0);
                mv(&mut su, self.dirs[b].bk[m].as_slice(), nx, &y[oy(a, k)..oy(a, k) + nx]);
                mv(&mut sv, self.dirs[a].bk[m].as_slice(), nx, &y[oy(b, k)..oy(b, k) + nx]);
                let (cur, next) = step_blocks(z, p * nodes + k, nx);
                for j in 0..nx {
                    next[j] = su[j] + sv[j];
                }
                // `next` holds the pair source; add L z and step.
                mv(next, lm, nx, cur);
                for j in 0..nx {
                    next[j] = cur[j] + dt * next[j];
                }
            }
        }
    }

    fn value_integrand(&self, path: &PathBundle, i: usize) -> f64 {
        self.fused(path, &[i], &[], &[]).values[0]
    }

    fn first_integrand(&self, path: &PathBundle, i: usize, d: usize) -> f64 {
        self.fused(path, &[], &[(i, d)], &[]).first[0]
    }

    fn second_integrand(&self, path: &PathBundle, i: usize, p: usize) -> f64 {
        self.fused(path, &[], &[], &[(i, p)]).second[0]
    }

    fn integrands(&self, path: &PathBundle, query: &Query) -> Integrands {
        self.fused(path, &query.values, &query.first, &query.second)
    }

    fn integrands_batch(&self, start: usize, x0: &[f64], dw: &[f64], count: usize, query: &Query) -> Vec<Option<Integrands>> {
        batch::lq_integrands(self, start, x0, dw, count, query)
    }
}

impl LqModel<'_> {
    /// Integrands of `½(XᵀQX + αᵀRα)` and its derivatives, sharing the
    /// products `Q X`, `R α`, `Q Y_d`, `R δα_d` of each agent per node.
    /// Symmetric forms are evaluated as `½(u·Av + v·Au)` so swapping the
    /// two directions of a pair gives bit-identical results.
    fn fused(&self, path: &PathBundle, values: &[usize], first: &[(usize, usize)], second: &[(usize, usize)]) -> Integrands {
        let (nx, na, nd) = (path.nx, path.na, path.n_dir);
        let mut out = Integrands {
            values: vec![0.0; values.len()],
            first: vec![0.0; first.len()],
            second: vec![0.0; second.len()],
        };
        let mut agents: Vec<usize> = values
            .iter()
            .chain(first.iter().map(|(i, _)| i))
            .chain(second.iter().map(|(i, _)| i))
            .copied()
            .collect();
        agents.sort_unstable();
        agents.dedup();
        let need_dirs = !second.is_empty();
        let (mut qx, mut ra) = (vec![0.0; nx], vec![0.0; na]);
        let (mut qy, mut rda) = (vec![0.0; nd * nx], vec![0.0; nd * na]);
        let last = path.nodes - 1;
        for &i in &agents {
            let c = &self.spec.agents[i];
            for k in 0..path.nodes {
                let m = path.start + k;
                let (q, r) = (c.q.node(m), c.r.node(m));
                let w = weight(&self.spec.grid, path, k);
                zero(&mut qx);
                mv(&mut qx, q.as_slice(), q.nrows(), path.x(k));
                zero(&mut ra);
                mv(&mut ra, r.as_slice(), r.nrows(), path.alpha(k));
                if need_dirs {
                    zero(&mut qy);
                    zero(&mut rda);
                    for d in 0..nd {
                        mv(&mut qy[d * nx..(d + 1) * nx], q.as_slice(), q.nrows(), path.y(d, k));
                        mv(&mut rda[d * na..(d + 1) * na], r.as_slice(), r.nrows(), path.dalpha(d, k));
                    }
                }
                for (o, &j) in out.values.iter_mut().zip(values) {
                    if j == i {
                        *o += w * 0.5 * (dot(&qx, path.x(k)) + dot(&ra, path.alpha(k)));
                    }
                }
                for (o, &(j, d)) in out.first.iter_mut().zip(first) {
                    if j == i {
                        *o += w * (dot(&qx, path.y(d, k)) + dot(&ra, path.dalpha(d, k)));
                    }
                }
                for (o, &(j, p)) in out.second.iter_mut().zip(second) {
                    if j == i {
                        let (a, b) = self.pairs[p];
                        let sq = 0.5 * (dot(&qy[a * nx..(a + 1) * nx], path.y(b, k)) + dot(&qy[b * nx..(b + 1) * nx], path.y(a, k)));
                        let sr = 0.5
                            * (dot(&rda[a * na..(a + 1) * na], path.dalpha(b, k))
                                + dot(&rda[b * na..(b + 1) * na], path.dalpha(a, k)));
                        *o += w * (sq + sr + dot(&qx, path.z(p, k)) + dot(&ra, path.d2alpha(p, k)));
                    }
                }
            }
            // Terminal cost.
            let xt = path.x(last);
            zero(&mut qx);
            mv(&mut qx, c.g.as_slice(), c.g.nrows(), xt);
            for (o, &j) in out.values.iter_mut().zip(values) {
                if j == i {
                    *o += 0.5 * dot(&qx, xt);
                }
            }
            for (o, &(j, d)) in out.first.iter_mut().zip(first) {
                if j == i {
                    *o += dot(&qx, path.y(d, last));
                }
            }
            for (o, &(j, p)) in out.second.iter_mut().zip(second) {
                if j == i {
                    let (a, b) = self.pairs[p];
                    let (ya, yb) = (path.y(a, last), path.y(b, last));
                    let mut ga = vec![0.0; nx];
                    let mut gb = vec![0.0; nx];
                    mv(&mut ga, c.g.as_slice(), c.g.nrows(), ya);
                    mv(&mut gb, c.g.as_slice(), c.g.nrows(), yb);
                    *o += 0.5 * (dot(&ga, yb) + dot(&gb, ya)) + dot(&qx, path.z(p, last));
                }
            }
        }
        out
    }
}

/// Trapezoid weight of sample `k` on the sub-grid starting at the path's
/// start node.
fn weight(grid: &TimeGrid, path: &PathBundle, k: usize) -> f64 {
    if k == 0 || k + 1 == path.nodes {
        0.5 * grid.dt()
    } else {
        grid.dt()
    }
}

// --- general model -------------------------------------------------------------

/// General coefficients with a nonlinear feedback policy.
pub struct GeneralModel<'a> {
    coeffs: &'a dyn GeneralCoefficients,
    grid: TimeGrid,
    policy: &'a dyn FeedbackPolicy,
    dirs: Vec<&'a dyn PolicyDirection>,
    pairs: Vec<(usize, usize)>,
}

impl<'a> GeneralModel<'a> {
    pub fn new(
        coeffs: &'a dyn GeneralCoefficients,
        grid: TimeGrid,
        policy: &'a dyn FeedbackPolicy,
        directions: Vec<&'a dyn PolicyDirection>,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        check_pairs(pairs, directions.len())?;
        let n = coeffs.layout().n_agents();
        if let Some(d) = directions.iter().find(|d| d.agent() >= n) {
            return Err(Error::InvalidArgument(format!("no agent {}", d.agent() + 1)));
        }
        Ok(Self {
            coeffs,
            grid,
            policy,
            dirs: directions,
            pairs: pairs.to_vec(),
        })
    }

    fn at(&self, path: &PathBundle, k: usize) -> At {
        At::node(&self.grid, path.start + k)
    }

    fn vec(s: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(s)
    }

    /// `δα_d = ∂_xφ Y_d + E_h φ'_d(X)`.
    fn dalpha(&self, at: At, x: &DVector<f64>, jac: &DMatrix<f64>, y: &DVector<f64>, d: usize) -> DVector<f64> {
        let dir = self.dirs[d];
        let mut out = jac * y;
        let r = self.coeffs.layout().control_range(dir.agent());
        let mut blk = out.rows_mut(r.start, r.len());
        blk += dir.value(at, x);
        out
    }

    /// `δ²α_p = ∂_xxφ[Y_b, Y_a] + ∂_xφ Z + (E_ℓ ∂_xφ''_b Y_a + E_h ∂_xφ'_a Y_b)`.
    #[allow(clippy::too_many_arguments)]
    fn d2alpha(&self, at: At, x: &DVector<f64>, jac: &DMatrix<f64>, ya: &DVector<f64>, yb: &DVector<f64>, z: &DVector<f64>, p: usize) -> DVector<f64> {
        let (a, b) = self.pairs[p];
        let na = self.coeffs.layout().control_dim();
        let (da, db) = (self.dirs[a], self.dirs[b]);
        let mut u = DVector::zeros(na);
        let rb = self.coeffs.layout().control_range(db.agent());
        u.rows_mut(rb.start, rb.len()).copy_from(&(db.jacobian(at, x) * ya));
        let mut v = DVector::zeros(na);
        let ra = self.coeffs.layout().control_range(da.agent());
        v.rows_mut(ra.start, ra.len()).copy_from(&(da.jacobian(at, x) * yb));
        let hess = (self.policy.second(at, x, yb, ya) + self.policy.second(at, x, ya, yb)) * 0.5;
        hess + jac * z + (u + v)
    }
}

impl PathModel for GeneralModel<'_> {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn state_dim(&self) -> usize {
        self.coeffs.layout().state_dim
    }
    fn control_dim(&self) -> usize {
        self.coeffs.layout().control_dim()
    }
    fn noise_dim(&self) -> usize {
        self.coeffs.noise_dim()
    }
    fn n_agents(&self) -> usize {
        self.coeffs.layout().n_agents()
    }
    fn n_directions(&self) -> usize {
        self.dirs.len()
    }
    fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    fn integrate(&self, path: &mut PathBundle, x0: &[f64]) {
        let dt = self.grid.dt();
        let c = self.coeffs;
        let (nx, nodes) = (path.nx, path.nodes);
        path.x[..nx].copy_from_slice(x0);
        for k in 0..nodes {
            let at = self.at(path, k);
            let x = Self::vec(path.x(k));
            let a = self.policy.action(at, &x);
            path.set_alpha(k, a.as_slice());
            let jac = self.policy.jacobian(at, &x);
            let ys: Vec<DVector<f64>> = (0..self.dirs.len()).map(|d| Self::vec(path.y(d, k))).collect();
            let das: Vec<DVector<f64>> = (0..self.dirs.len())
                .map(|d| self.dalpha(at, &x, &jac, &ys[d], d))
                .collect();
            let zs: Vec<DVector<f64>> = (0..self.pairs.len()).map(|p| Self::vec(path.z(p, k))).collect();
            let d2s: Vec<DVector<f64>> = self
                .pairs
                .iter()
                .enumerate()
                .map(|(p, &(ia, ib))| self.d2alpha(at, &x, &jac, &ys[ia], &ys[ib], &zs[p], p))
                .collect();
            for (d, v) in das.iter().enumerate() {
                path.set_dalpha(d, k, v.as_slice());
            }
            for (p, v) in d2s.iter().enumerate() {
                path.set_d2alpha(p, k, v.as_slice());
            }
            if k + 1 == nodes {
                break;
            }
            let dw = Self::vec(path.dw(k));
            let next = &x + c.drift(at, &x, &a) * dt + c.diffusion(at, &x, &a) * &dw;
            step_blocks(&mut path.x, k, nx).1.copy_from_slice(next.as_slice());
            for d in 0..self.dirs.len() {
                let u = (&ys[d], &das[d]);
                let next = &ys[d] + c.drift_d1(at, &x, &a, u) * dt + c.diffusion_d1(at, &x, &a, u) * &dw;
                step_blocks(&mut path.y, d * nodes + k, nx).1.copy_from_slice(next.as_slice());
            }
            for (p, &(ia, ib)) in self.pairs.iter().enumerate() {
                let (u, v) = ((&ys[ia], &das[ia]), (&ys[ib], &das[ib]));
                let b2 = (c.drift_d2(at, &x, &a, u, v) + c.drift_d2(at, &x, &a, v, u)) * 0.5;
                let s2 = (c.diffusion_d2(at, &x, &a, u, v) + c.diffusion_d2(at, &x, &a, v, u)) * 0.5;
                let zt = (&zs[p], &d2s[p]);
                let drift = c.drift_d1(at, &x, &a, zt) + b2;
                let diff = c.diffusion_d1(at, &x, &a, zt) + s2;
                let next = &zs[p] + drift * dt + diff * &dw;
                step_blocks(&mut path.z, p * nodes + k, nx).1.copy_from_slice(next.as_slice());
            }
        }
    }

    fn value_integrand(&self, path: &PathBundle, i: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..path.nodes {
            let at = self.at(path, k);
            let f = self
                .coeffs
                .running_cost(i, at, &Self::vec(path.x(k)), &Self::vec(path.alpha(k)));
            acc += weight(&self.grid, path, k) * f;
        }
        acc + self.coeffs.terminal_cost(i, &Self::vec(path.x(path.nodes - 1)))
    }

    fn first_integrand(&self, path: &PathBundle, i: usize, d: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..path.nodes {
            let at = self.at(path, k);
            let (x, a) = (Self::vec(path.x(k)), Self::vec(path.alpha(k)));
            let (gx, ga) = self.coeffs.running_cost_grad(i, at, &x, &a);
            acc += weight(&self.grid, path, k) * (dot(gx.as_slice(), path.y(d, k)) + dot(ga.as_slice(), path.dalpha(d, k)));
        }
        let last = path.nodes - 1;
        let g = self.coeffs.terminal_cost_grad(i, &Self::vec(path.x(last)));
        acc + dot(g.as_slice(), path.y(d, last))
    }

    fn second_integrand(&self, path: &PathBundle, i: usize, p: usize) -> f64 {
        let (ia, ib) = self.pairs[p];
        let mut acc = 0.0;
        for k in 0..path.nodes {
            let at = self.at(path, k);
            let (x, a) = (Self::vec(path.x(k)), Self::vec(path.alpha(k)));
            let h = self.coeffs.running_cost_hess(i, at, &x, &a);
            let ua: Vec<f64> = path.y(ia, k).iter().chain(path.dalpha(ia, k)).copied().collect();
            let ub: Vec<f64> = path.y(ib, k).iter().chain(path.dalpha(ib, k)).copied().collect();
            let (gx, ga) = self.coeffs.running_cost_grad(i, at, &x, &a);
            let f = sym_bilin(&h, &ub, &ua) + dot(gx.as_slice(), path.z(p, k)) + dot(ga.as_slice(), path.d2alpha(p, k));
            acc += weight(&self.grid, path, k) * f;
        }
        let last = path.nodes - 1;
        let xt = Self::vec(path.x(last));
        let gh = self.coeffs.terminal_cost_hess(i, &xt);
        let g = self.coeffs.terminal_cost_grad(i, &xt);
        acc + sym_bilin(&gh, path.y(ib, last), path.y(ia, last)) + dot(g.as_slice(), path.z(p, last))
    }
}

// --- driver -----------------------------------------------------------------------

fn start_node(grid: &TimeGrid, t0: f64) -> Result<usize> {
    match grid.node_index(t0) {
        Some(m) if m < grid.steps() => Ok(m),
        _ => Err(Error::InvalidArgument(format!(
            "start time {t0} must be a grid node before the horizon"
        ))),
    }
}

/// Brownian increments of path `p` from node `start`.
fn draw_increments(grid: &TimeGrid, start: usize, nw: usize, cfg: &McConfig, p: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), (grid.len() - 1 - start) * nw);
    let (stream, sign) = if cfg.antithetic {
        ((p / 2) as u64, if p.is_multiple_of(2) { 1.0 } else { -1.0 })
    } else {
        (p as u64, 1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let sd = grid.dt().sqrt() * sign;
    for w in out.iter_mut() {
        *w = sd * rng.sample::<f64, _>(StandardNormal);
    }
}

fn simulate_one<M: PathModel + ?Sized>(model: &M, start: usize, x0: &[f64], cfg: &McConfig, p: usize) -> PathBundle {
    let mut path = model.new_path(p, start);
    draw_increments(model.grid(), start, model.noise_dim(), cfg, p, &mut path.dw);
    model.integrate(&mut path, x0);
    path
}

/// Paths simulated together by [`PathModel::integrands_batch`].
const BATCH: usize = 64;

/// Increments of paths `first..first + count`, path-major.
fn draw_batch(grid: &TimeGrid, start: usize, nw: usize, cfg: &McConfig, first: usize, count: usize) -> Vec<f64> {
    let n = (grid.len() - 1 - start) * nw;
    let mut dw = vec![0.0; n * count];
    for (b, chunk) in dw.chunks_mut(n.max(1)).take(count).enumerate() {
        draw_increments(grid, start, nw, cfg, first + b, &mut chunk[..n]);
    }
    dw
}

fn batches(n_paths: usize) -> impl IndexedParallelIterator<Item = (usize, usize)> {
    (0..n_paths.div_ceil(BATCH))
        .into_par_iter()
        .map(move |c| (c * BATCH, BATCH.min(n_paths - c * BATCH)))
}

/// Simulate the first `count` paths sequentially.
pub fn simulate_paths<'m, M: PathModel + ?Sized>(
    model: &'m M,
    t0: f64,
    x0: &DVector<f64>,
    cfg: &McConfig,
    count: usize,
) -> Result<impl Iterator<Item = PathBundle> + 'm> {
    let start = start_node(model.grid(), t0)?;
    check_x0(model, x0)?;
    let x0 = x0.as_slice().to_vec();
    let cfg = *cfg;
    Ok((0..count).map(move |p| simulate_one(model, start, &x0, &cfg, p)))
}

fn check_x0<M: PathModel + ?Sized>(model: &M, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "x0 has length {}, state dimension is {}",
            x0.len(),
            model.state_dim()
        )));
    }
    Ok(())
}

fn check_query<M: PathModel + ?Sized>(model: &M, q: &Query) -> Result<()> {
    let n = model.n_agents();
    let bad_agent = q
        .values
        .iter()
        .chain(q.first.iter().map(|(i, _)| i))
        .chain(q.second.iter().map(|(i, _)| i))
        .any(|&i| i >= n);
    if bad_agent {
        return Err(Error::InvalidArgument("query names a missing agent".into()));
    }
    if q.first.iter().any(|&(_, d)| d >= model.n_directions())
        || q.second.iter().any(|&(_, p)| p >= model.n_pairs())
    {
        return Err(Error::InvalidArgument("query names a missing direction or pair".into()));
    }
    Ok(())
}

/// Fixed-order pairwise sum.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

fn summarize(samples: &[f64], seed: u64, n_paths: usize) -> DerivativeEstimate {
    let n = samples.len();
    if samples.iter().all(|s| *s == samples[0]) {
        return DerivativeEstimate {
            value: samples[0],
            stderr: 0.0,
            n_paths,
            seed,
        };
    }
    let mean = pairwise_sum(samples) / n as f64;
    let dev: Vec<f64> = samples.iter().map(|s| (s - mean) * (s - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    DerivativeEstimate {
        value: mean,
        stderr: (var / n as f64).sqrt(),
        n_paths,
        seed,
    }
}

fn sample_path<M: PathModel + ?Sized>(model: &M, path: &PathBundle, query: &Query) -> Option<Integrands> {
    if !path.all_finite() {
        return None;
    }
    let s = model.integrands(path, query);
    s.all_finite().then_some(s)
}

/// Simulate `cfg.n_paths` paths in parallel and estimate the queried
/// quantities. Results are bit-identical for a given seed whatever the
/// thread count.
pub fn estimate<M: PathModel + ?Sized>(
    model: &M,
    t0: f64,
    x0: &DVector<f64>,
    cfg: &McConfig,
    query: &Query,
) -> Result<McEstimates> {
    cfg.check()?;
    check_x0(model, x0)?;
    check_query(model, query)?;
    let start = start_node(model.grid(), t0)?;
    let x0s = x0.as_slice();
    let nw = model.noise_dim();
    let samples: Vec<Vec<Option<Integrands>>> = batches(cfg.n_paths)
        .map(|(first, count)| {
            let dw = draw_batch(model.grid(), start, nw, cfg, first, count);
            model.integrands_batch(start, x0s, &dw, count, query)
        })
        .collect();
    reduce(samples.into_iter().flatten().collect(), cfg, query)
}

/// Two-level estimate `2·E[fine] − E[coarse]`, which cancels the leading
/// O(dt) weak error of the Euler scheme. `fine` must be the same model on
/// the grid with every step halved; each coarse path is driven by the sums
/// of consecutive fine increments of the same path.
pub fn estimate_extrapolated<C: PathModel + ?Sized, F: PathModel + ?Sized>(
    coarse: &C,
    fine: &F,
    t0: f64,
    x0: &DVector<f64>,
    cfg: &McConfig,
    query: &Query,
) -> Result<McEstimates> {
    cfg.check()?;
    check_x0(coarse, x0)?;
    check_query(coarse, query)?;
    let (gc, gf) = (*coarse.grid(), *fine.grid());
    if gf != gc.refined()
        || fine.state_dim() != coarse.state_dim()
        || fine.noise_dim() != coarse.noise_dim()
        || fine.n_directions() != coarse.n_directions()
        || fine.n_pairs() != coarse.n_pairs()
    {
        return Err(Error::InvalidArgument(
            "fine model must be the coarse model on the refined grid".into(),
        ));
    }
    let start = start_node(&gc, t0)?;
    let x0s = x0.as_slice();
    let nw = coarse.noise_dim();
    let (nf, nc) = ((gf.len() - 1 - 2 * start) * nw, (gc.len() - 1 - start) * nw);
    let samples: Vec<Vec<Option<Integrands>>> = batches(cfg.n_paths)
        .map(|(first, count)| {
            let dwf = draw_batch(&gf, 2 * start, nw, cfg, first, count);
            let mut dwc = vec![0.0; nc * count];
            for b in 0..count {
                let (f, c) = (&dwf[b * nf..(b + 1) * nf], &mut dwc[b * nc..(b + 1) * nc]);
                for k in 0..nc / nw.max(1) {
                    for w in 0..nw {
                        c[k * nw + w] = f[2 * k * nw + w] + f[(2 * k + 1) * nw + w];
                    }
                }
            }
            let sf = fine.integrands_batch(2 * start, x0s, &dwf, count, query);
            let sc = coarse.integrands_batch(start, x0s, &dwc, count, query);
            let ex = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| 2.0 * u - v).collect();
            sf.into_iter()
                .zip(sc)
                .map(|(f, c)| {
                    let (f, c) = (f?, c?);
                    Some(Integrands {
                        values: ex(&f.values, &c.values),
                        first: ex(&f.first, &c.first),
                        second: ex(&f.second, &c.second),
                    })
                })
                .collect()
        })
        .collect();
    reduce(samples.into_iter().flatten().collect(), cfg, query)
}

fn reduce(samples: Vec<Option<Integrands>>, cfg: &McConfig, query: &Query) -> Result<McEstimates> {
    let flagged = samples.iter().filter(|s| s.is_none()).count();
    if flagged as f64 > MAX_FLAGGED_FRACTION * cfg.n_paths as f64 {
        return Err(Error::TooManyFlaggedPaths {
            flagged,
            total: cfg.n_paths,
        });
    }
    if flagged > 0 {
        warn!("{flagged} of {} paths excluded as non-finite", cfg.n_paths);
    }

    // Antithetic pairs are averaged into one sample; a pair with a flagged
    // member is dropped whole.
    let units: Vec<Integrands> = if cfg.antithetic {
        samples
            .chunks(2)
            .filter_map(|c| match (&c[0], &c[1]) {
                (Some(a), Some(b)) => Some(Integrands {
                    values: avg(&a.values, &b.values),
                    first: avg(&a.first, &b.first),
                    second: avg(&a.second, &b.second),
                }),
                _ => None,
            })
            .collect()
    } else {
        samples.into_iter().flatten().collect()
    };
    if units.len() < 2 {
        return Err(Error::TooManyFlaggedPaths {
            flagged,
            total: cfg.n_paths,
        });
    }
    let used = cfg.n_paths - flagged;
    let column = |f: &dyn Fn(&Integrands) -> f64| -> DerivativeEstimate {
        let v: Vec<f64> = units.iter().map(f).collect();
        summarize(&v, cfg.seed, used)
    };
    Ok(McEstimates {
        values: (0..query.values.len()).map(|j| column(&|s| s.values[j])).collect(),
        first: (0..query.first.len()).map(|j| column(&|s| s.first[j])).collect(),
        second: (0..query.second.len()).map(|j| column(&|s| s.second[j])).collect(),
        flagged,
    })
}

fn avg(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Monte Carlo value of agent `i`.
pub fn estimate_value<M: PathModel + ?Sized>(
    model: &M,
    i: usize,
    t0: f64,
    x0: &DVector<f64>,
    cfg: &McConfig,
) -> Result<DerivativeEstimate> {
    let q = Query {
        values: vec![i],
        ..Query::default()
    };
    Ok(estimate(model, t0, x0, cfg, &q)?.values[0])
}

/// Monte Carlo first derivative of agent `i`'s value along direction `d`.
pub fn estimate_first_derivative<M: PathModel + ?Sized>(
    model: &M,
    i: usize,
    d: usize,
    t0: f64,
    x0: &DVector<f64>,
    cfg: &McConfig,
) -> Result<DerivativeEstimate> {
    let q = Query {
        first: vec![(i, d)],
        ..Query::default()
    };
    Ok(estimate(model, t0, x0, cfg, &q)?.first[0])
}

/// Monte Carlo second derivative of agent `i`'s value along pair `p`.
pub fn estimate_second_derivative<M: PathModel + ?Sized>(
    model: &M,
    i: usize,
    p: usize,
    t0: f64,
    x0: &DVector<f64>,
    cfg: &McConfig,
) -> Result<DerivativeEstimate> {
    let q = Query {
        second: vec![(i, p)],
        ..Query::default()
    };
    Ok(estimate(model, t0, x0, cfg, &q)?.second[0])
}

/// Write paths as CSV: `path,t,X…,Y…,Z…`.
pub fn write_paths_csv<W: Write>(paths: impl IntoIterator<Item = PathBundle>, mut w: W) -> Result<()> {
    let mut header_done = false;
    for path in paths {
        if !header_done {
            let mut h = vec!["path".to_string(), "t".to_string()];
            h.extend((0..path.nx).map(|j| format!("X{j}")));
            for d in 0..path.n_dir {
                h.extend((0..path.nx).map(|j| format!("Y{d}_{j}")));
            }
            for p in 0..path.n_pair {
                h.extend((0..path.nx).map(|j| format!("Z{p}_{j}")));
            }
            writeln!(w, "{}", h.join(","))?;
            header_done = true;
        }
        for k in 0..path.nodes {
            let mut row = vec![path.index.to_string(), format!("{:e}", path.time(k))];
            let fmt = |s: &[f64]| s.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>();
            row.extend(fmt(path.x(k)));
            for d in 0..path.n_dir {
                row.extend(fmt(path.y(d, k)));
            }
            for p in 0..path.n_pair {
                row.extend(fmt(path.z(p, k)));
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}
